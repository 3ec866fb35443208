"""MAE-style masked reconstruction pretraining on patch tokens."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import autodiff as ad
from . import nn
from .augment import PatchGrid, MaskPlan, check_tiling, derive_seed, patchify_array, sample_masks
from .autodiff import Tape, Tensor
from .contrastive import PretrainResult, _batches
from .data import Dataset, TimeSeriesSample
from .errors import ConfigError, ContractError, NumericError, ShapeError, TrainingError

log = logging.getLogger(__name__)

LOSS_SCOPES = ("masked_only", "all_patches")


@dataclass(frozen=True)
class MaeConfig:
    mask_ratio: float = 0.75
    decoder_blocks: int = 1
    loss_scope: str = "masked_only"
    batch_size: int = 128
    epochs: int = 200
    lr: float = 1e-3
    mask_token_std: float = 0.02
    arch: nn.ArchConfig = field(default_factory=nn.ArchConfig)

    def __post_init__(self):
        if not 0.0 <= self.mask_ratio < 1.0:
            raise ConfigError(f"mask_ratio {self.mask_ratio} outside [0, 1)")
        if self.loss_scope not in LOSS_SCOPES:
            raise ConfigError(f"loss_scope must be one of {LOSS_SCOPES}")
        if self.decoder_blocks < 1 or self.batch_size < 1 or self.epochs < 0 or self.lr <= 0:
            raise ConfigError("invalid MAE training settings")

    @property
    def patch_len(self) -> int:
        return self.arch.patch_len

    def decoder(self, n_channels: int) -> nn.EncoderConfig:
        a = self.arch
        return nn.EncoderConfig(n_channels * a.patch_len, a.model_dim, a.n_heads, a.mlp_dim, self.decoder_blocks)


@dataclass
class MaeForwardResult:
    reconstructed: Tensor  # (B, n_patches, c * patch_len), temporal order
    plans: list
    latent: Tensor  # (B, n_visible, model_dim)
    target: np.ndarray  # (B, n_patches, c * patch_len)
    n_channels: int
    patch_len: int

    @property
    def plan(self) -> MaskPlan:
        return self.plans[0]

    def grid(self, i: int = 0) -> PatchGrid:
        """Reconstruction of sample ``i`` as a :class:`PatchGrid`."""
        n = self.reconstructed.shape[1]
        c, p = self.n_channels, self.patch_len
        return PatchGrid(self.reconstructed.data[i].reshape(n, c, p).copy(), p, (c, n * p))


def init_mae(n_channels: int, config: MaeConfig, seed: int) -> nn.ParameterSet:
    arch = config.arch
    params = nn.init_params(arch.encoder(n_channels), seed)
    rng = np.random.default_rng(derive_seed(seed, 4))
    dec = nn.ParameterSet()
    dec["decoder.mask_token"] = Tensor(rng.normal(0.0, config.mask_token_std, size=(1, arch.model_dim)),
                                       requires_grad=True, name="decoder.mask_token")
    for i in range(config.decoder_blocks):
        nn.add_block(dec, rng, f"decoder.block{i}", arch.model_dim, arch.mlp_dim)
    nn.add_linear(dec, rng, "decoder.head", arch.model_dim, n_channels * arch.patch_len)
    return params.merged(dec)


def mae_forward_batch(x: np.ndarray, params, config: MaeConfig, plans: Sequence[MaskPlan]) -> MaeForwardResult:
    """Encode visible patches, re-insert mask tokens, decode every position.

    All plans in a batch must mask the same number of patches.
    """
    x = np.asarray(x, dtype=np.float64)
    B, c, d = x.shape
    p = config.patch_len
    n = check_tiling(d, p)
    if len(plans) != B:
        raise ContractError(f"{len(plans)} mask plans for {B} samples")
    if any(pl.n_patches != n for pl in plans):
        raise ShapeError(f"mask plan does not cover {n} patches")
    n_vis = {len(pl.visible_idx) for pl in plans}
    if len(n_vis) != 1:
        raise ContractError("plans in one batch must keep the same number of patches")
    tokens = patchify_array(x, p)
    rows = np.arange(B)[:, None]
    vis_idx = np.stack([pl.visible_idx for pl in plans])
    latent = nn.encoder_forward(Tensor(tokens[rows, vis_idx]), params, config.arch.encoder(c), positions=vis_idx)
    n_mask = n - vis_idx.shape[1]
    seq = latent
    if n_mask:
        mask_idx = np.stack([pl.masked_idx for pl in plans])
        pe = nn.positional_encoding(n, config.arch.model_dim)
        fill = params["decoder.mask_token"][np.zeros((B, n_mask), dtype=np.int64)] + Tensor(pe[mask_idx])
        order = np.concatenate([vis_idx, mask_idx], axis=1)
        restore = np.argsort(order, axis=1)
        seq = ad.concat([latent, fill], axis=1)[rows, restore]
    decoded = nn.run_blocks(seq, params, config.decoder(c), prefix="decoder")
    recon = nn.linear(decoded, params, "decoder.head")
    return MaeForwardResult(recon, list(plans), latent, tokens, c, p)


def mae_forward(x, params, config: MaeConfig, plan: MaskPlan) -> MaeForwardResult:
    """Single-sample forward pass; ``x`` is a sample or a ``(c, d)`` array."""
    values = x.values if isinstance(x, TimeSeriesSample) else np.asarray(x)
    return mae_forward_batch(values[None], params, config, [plan])


def _target_tokens(target) -> np.ndarray:
    if isinstance(target, PatchGrid):
        t = target.patches.reshape(target.n_patches, -1)[None]
    else:
        t = np.asarray(target, dtype=np.float64)
        if t.ndim == 2:
            t = t[None]
    return t


def reconstruction_loss(result: MaeForwardResult, target=None, scope: str = "masked_only") -> Tensor:
    """Element-wise mean squared error over the in-scope patches.

    ``target`` defaults to the patches the forward pass was run on; it may
    also be a :class:`PatchGrid` or a ``(B, n, c*p)`` token array.
    """
    if scope not in LOSS_SCOPES:
        raise ConfigError(f"loss_scope must be one of {LOSS_SCOPES}")
    pred = result.reconstructed
    t = result.target if target is None else _target_tokens(target)
    if t.shape != pred.shape:
        raise ShapeError(f"target {t.shape} does not align with reconstruction {pred.shape}")
    if scope == "all_patches":
        diff = pred - Tensor(t)
    else:
        mask_idx = np.stack([pl.masked_idx for pl in result.plans])
        if mask_idx.shape[1] == 0:
            raise ContractError("masked_only loss with no masked patches")
        rows = np.arange(pred.shape[0])[:, None]
        diff = pred[rows, mask_idx] - Tensor(t[rows, mask_idx])
    return ad.reduce_mean(diff * diff)


def pretrain_generative(data: Dataset, config: MaeConfig, seed: int) -> PretrainResult:
    """Masked-reconstruction training; masks are redrawn per (sample, epoch)."""
    start = time.perf_counter()
    check_tiling(data.length, config.patch_len)
    if config.loss_scope == "masked_only" and config.mask_ratio * (data.length // config.patch_len) < 0.5:
        raise ConfigError("masked_only loss needs at least one masked patch")
    params = init_mae(data.n_channels, config, seed)
    best = params.copy()
    history, best_loss, best_epoch = [], np.inf, None
    state = nn.OptimizerState(lr=config.lr)
    shuffle_rng = np.random.default_rng(derive_seed(seed, 2))
    n = data.length // config.patch_len
    x_all = data.values
    for epoch in range(config.epochs):
        losses, sizes = [], []
        for b, idx in enumerate(_batches(len(data), config.batch_size, shuffle_rng)):
            plans = sample_masks(n, config.mask_ratio, seed, epoch, idx)
            params.zero_grad()
            try:
                with Tape() as tape:
                    result = mae_forward_batch(x_all[idx], params, config, plans)
                    loss = reconstruction_loss(result, scope=config.loss_scope)
                tape.backward(loss)
            except NumericError as exc:
                raise TrainingError(f"non-finite reconstruction loss: {exc}", epoch, b) from exc
            nn.adam_step(params, state)
            losses.append(loss.item())
            sizes.append(len(idx))
        epoch_loss = float(np.average(losses, weights=sizes))
        history.append(epoch_loss)
        if epoch_loss < best_loss:
            best_loss, best_epoch, best = epoch_loss, epoch, params.copy()
        log.debug("mae epoch %d loss %.5f", epoch, epoch_loss)
    return PretrainResult(best.subset("encoder").copy(), best, history, best_epoch,
                          time.perf_counter() - start)


def reconstruct(data: Dataset, params, config: MaeConfig, seed: int, epoch: int = 0,
                keep_visible: bool = True) -> np.ndarray:
    """Reconstructed series ``(N, c, d)`` under freshly drawn masks (no tape).

    With ``keep_visible`` the observed patches are copied from the input and
    only the masked ones come from the decoder.
    """
    from .augment import unpatchify_array

    n = data.length // config.patch_len
    plans = sample_masks(n, config.mask_ratio, seed, epoch, range(len(data)))
    with ad.no_grad():
        res = mae_forward_batch(data.values, params, config, plans)
    tokens = res.reconstructed.data.copy()
    if keep_visible:
        for b, plan in enumerate(plans):
            tokens[b, plan.visible_idx] = res.target[b, plan.visible_idx]
    return unpatchify_array(tokens, data.n_channels, config.patch_len)
