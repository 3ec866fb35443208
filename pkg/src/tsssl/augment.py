"""Jitter augmentation, non-overlapping patching and random patch masks."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .data import TimeSeriesSample
from .errors import ConfigError, ContractError, ReconstructionError, TilingError


def derive_seed(*keys: int) -> int:
    """Stable 64-bit seed hashed from integer keys (run seed, epoch, index...)."""
    return int(np.random.SeedSequence([int(k) for k in keys]).generate_state(1, np.uint64)[0])


# --- jitter ----------------------------------------------------------------

def jitter_array(x: np.ndarray, sigma: float, rng: np.random.Generator) -> np.ndarray:
    if sigma < 0:
        raise ConfigError(f"jitter sigma must be >= 0, got {sigma}")
    if sigma == 0:
        return np.array(x, dtype=np.float64)
    return x + sigma * rng.standard_normal(np.shape(x))


def jitter(x: TimeSeriesSample, sigma: float = 1.0, seed: int = 0) -> TimeSeriesSample:
    """Add i.i.d. N(0, sigma^2) noise; the label is carried over."""
    return TimeSeriesSample(jitter_array(x.values, sigma, np.random.default_rng(seed)), x.label)


# --- patches ---------------------------------------------------------------

@dataclass(frozen=True)
class PatchGrid:
    patches: np.ndarray  # (n_patches, c, patch_len), temporal order
    patch_len: int
    source_shape: tuple  # (c, d)

    @property
    def n_patches(self) -> int:
        return self.patches.shape[0]


def check_tiling(d: int, patch_len: int) -> int:
    if patch_len < 1 or d % patch_len:
        raise TilingError(f"length d={d} is not divisible by patch_len={patch_len}")
    return d // patch_len


def patchify_array(x: np.ndarray, patch_len: int) -> np.ndarray:
    """``(..., c, d)`` -> ``(..., n, c * patch_len)`` flattened channel-major tokens."""
    *lead, c, d = x.shape
    n = check_tiling(d, patch_len)
    t = x.reshape(*lead, c, n, patch_len)
    t = np.moveaxis(t, -2, -3)  # (..., n, c, p)
    return t.reshape(*lead, n, c * patch_len)


def unpatchify_array(tokens: np.ndarray, c: int, patch_len: int) -> np.ndarray:
    *lead, n, width = tokens.shape
    if width != c * patch_len:
        raise ReconstructionError(f"token width {width} != c*patch_len = {c * patch_len}")
    t = tokens.reshape(*lead, n, c, patch_len)
    return np.moveaxis(t, -3, -2).reshape(*lead, c, n * patch_len)


def patchify(x: TimeSeriesSample, patch_len: int) -> PatchGrid:
    c, d = x.values.shape
    n = check_tiling(d, patch_len)
    patches = np.moveaxis(x.values.reshape(c, n, patch_len), 1, 0).copy()
    return PatchGrid(patches, patch_len, (c, d))


def unpatchify(grid: PatchGrid, label: Optional[int] = None) -> TimeSeriesSample:
    c, d = grid.source_shape
    expected = d // grid.patch_len
    if grid.n_patches != expected or grid.patches.shape[1:] != (c, grid.patch_len):
        raise ReconstructionError(
            f"grid has {grid.n_patches} patches of shape {grid.patches.shape[1:]}, "
            f"need {expected} of shape {(c, grid.patch_len)}"
        )
    return TimeSeriesSample(np.moveaxis(grid.patches, 0, 1).reshape(c, d).copy(), label)


# --- masks -----------------------------------------------------------------

def n_masked(n_patches: int, mask_ratio: float) -> int:
    return int(np.floor(mask_ratio * n_patches + 0.5))


@dataclass(frozen=True)
class MaskPlan:
    visible_idx: np.ndarray  # sorted
    masked_idx: np.ndarray  # sorted
    mask_ratio: float

    @property
    def n_patches(self) -> int:
        return len(self.visible_idx) + len(self.masked_idx)

    @property
    def order(self) -> np.ndarray:
        """Visible indices followed by masked ones: the decoder token order."""
        return np.concatenate([self.visible_idx, self.masked_idx])


def sample_mask(n_patches: int, mask_ratio: float, seed: int) -> MaskPlan:
    """Uniform random subset of ``round(mask_ratio * n_patches)`` masked indices."""
    if not 0.0 <= mask_ratio < 1.0:
        raise ConfigError(f"mask_ratio {mask_ratio} outside [0, 1)")
    k = n_masked(n_patches, mask_ratio)
    if k >= n_patches:
        raise ConfigError(f"mask_ratio {mask_ratio} leaves no visible patch out of {n_patches}")
    perm = np.random.default_rng(seed).permutation(n_patches)
    return MaskPlan(np.sort(perm[k:]), np.sort(perm[:k]), mask_ratio)


def sample_masks(n_patches: int, mask_ratio: float, base_seed: int, epoch: int, sample_ids: Sequence[int]) -> list:
    """One plan per sample; seeds hashed from (base seed, epoch, sample id)."""
    return [sample_mask(n_patches, mask_ratio, derive_seed(base_seed, epoch, int(i))) for i in sample_ids]


def _check_plan(grid: PatchGrid, plan: MaskPlan) -> None:
    idx = plan.order
    if idx.size and (idx.min() < 0 or idx.max() >= grid.n_patches):
        raise ContractError(f"mask indices out of range for {grid.n_patches} patches")
    if plan.n_patches != grid.n_patches or np.unique(idx).size != idx.size:
        raise ContractError("mask plan does not partition the grid's patch indices")


def gather_visible(grid: PatchGrid, plan: MaskPlan) -> tuple:
    """Visible patches in ascending position order, plus the plan."""
    _check_plan(grid, plan)
    return grid.patches[plan.visible_idx].copy(), plan


def scatter_reconstruction(predicted, plan: MaskPlan, indices: Optional[Sequence[int]] = None,
                           source_shape: Optional[tuple] = None) -> PatchGrid:
    """Place ``predicted[k]`` at position ``indices[k]`` (default ``0..n-1``)."""
    predicted = np.asarray(predicted, dtype=np.float64)
    n = plan.n_patches
    if predicted.shape[0] != n:
        raise ContractError(f"{predicted.shape[0]} predicted patches for {n} positions")
    indices = np.arange(n) if indices is None else np.asarray(indices)
    if sorted(indices.tolist()) != list(range(n)):
        raise ContractError("indices must be a permutation of 0..n_patches-1")
    out = np.empty_like(predicted)
    out[indices] = predicted
    c, p = predicted.shape[1:]
    return PatchGrid(out, p, source_shape or (c, n * p))
