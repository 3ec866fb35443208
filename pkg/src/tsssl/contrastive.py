"""SimCLR-style contrastive pretraining with the NT-Xent objective."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import autodiff as ad
from . import nn
from .augment import derive_seed, jitter_array
from .autodiff import Tape, Tensor
from .data import Dataset, TimeSeriesSample
from .errors import ConfigError, ContractError, NumericError, TrainingError

log = logging.getLogger(__name__)

ANCHOR_MODES = ("all", "originals_only")


@dataclass(frozen=True)
class ContrastiveConfig:
    temperature: float = 0.5
    jitter_sigma: float = 1.0
    use_projection_head: bool = True
    projection_dim: int = 64
    batch_size: int = 128
    epochs: int = 200
    lr: float = 1e-3
    anchors: str = "all"
    arch: nn.ArchConfig = field(default_factory=nn.ArchConfig)

    def __post_init__(self):
        if self.temperature <= 0:
            raise ConfigError("temperature must be positive")
        if self.batch_size < 2:
            raise ConfigError("batch_size must be >= 2 (NT-Xent needs a negative)")
        if self.jitter_sigma < 0 or self.epochs < 0 or self.lr <= 0:
            raise ConfigError("invalid contrastive training settings")
        if self.anchors not in ANCHOR_MODES:
            raise ConfigError(f"anchors must be one of {ANCHOR_MODES}")


@dataclass
class ContrastiveBatch:
    anchors: Tensor  # (N, dim) embeddings of the originals
    positives: Tensor  # (N, dim) embeddings of their jittered views


@dataclass
class PretrainResult:
    encoder: nn.ParameterSet
    params: nn.ParameterSet  # everything that was trained, at the best epoch
    loss_history: list
    best_epoch: Optional[int]
    seconds: float


def make_views(batch, sigma: float, seed: int) -> tuple:
    """Pair each series with a jittered copy; returns ``(originals, views)`` arrays."""
    x = np.asarray([s.values for s in batch] if isinstance(batch, (list, tuple)) else batch, dtype=np.float64)
    if x.shape[0] == 0:
        raise ContractError("empty batch")
    return x, jitter_array(x, sigma, np.random.default_rng(seed))


def init_contrastive(n_channels: int, config: ContrastiveConfig, seed: int) -> nn.ParameterSet:
    arch = config.arch
    params = nn.init_params(arch.encoder(n_channels), seed)
    if config.use_projection_head:
        head = nn.init_mlp_head(arch.model_dim, arch.model_dim, config.projection_dim,
                                derive_seed(seed, 1), prefix="projection")
        params = params.merged(head)
    return params


def encode_series(x, params, config: ContrastiveConfig) -> Tensor:
    """Embeddings ``(B, projection_dim)`` (or ``(B, model_dim)`` without the head).

    Accepts a single :class:`TimeSeriesSample`, a ``(c, d)`` array or a
    ``(B, c, d)`` batch.
    """
    if isinstance(x, TimeSeriesSample):
        x = x.values
    z = nn.pooled_embedding(x, params, config.arch)
    if config.use_projection_head:
        z = nn.mlp_head(z, params, "projection")
    return z


def nt_xent_loss(batch: ContrastiveBatch, temperature: float, anchors: str = "all") -> Tensor:
    """Normalised temperature-scaled cross entropy over 2N embeddings.

    Row ``i`` of the stacked ``[anchors; positives]`` matrix has its partner
    at ``(i + N) mod 2N``; the denominator runs over the other ``2N - 1``
    rows. ``anchors="originals_only"`` averages over the first N rows only.
    """
    za, zp = batch.anchors, batch.positives
    if za.shape != zp.shape or za.ndim != 2:
        raise ContractError(f"anchor/positive shapes differ: {za.shape} vs {zp.shape}")
    n = za.shape[0]
    if n < 2:
        raise ContractError("NT-Xent needs N >= 2")
    if temperature <= 0:
        raise ConfigError("temperature must be positive")
    if anchors not in ANCHOR_MODES:
        raise ConfigError(f"anchors must be one of {ANCHOR_MODES}")
    z = ad.l2_normalize(ad.concat([za, zp], axis=0), axis=-1)
    sim = ad.matmul(z, ad.transpose(z)) * (1.0 / temperature)
    rows = np.arange(2 * n)
    partner = (rows + n) % (2 * n)
    lse = ad.logsumexp(sim, axis=-1, exclude=np.eye(2 * n, dtype=bool))
    per_anchor = lse - sim[rows, partner]
    if anchors == "originals_only":
        per_anchor = per_anchor[np.arange(n)]
    return ad.reduce_mean(per_anchor)


def _batches(n: int, batch_size: int, rng: np.random.Generator, min_size: int = 1) -> list:
    perm = rng.permutation(n)
    out = [perm[i:i + batch_size] for i in range(0, n, batch_size)]
    return [b for b in out if len(b) >= min_size]


def pretrain_contrastive(data: Dataset, config: ContrastiveConfig, seed: int) -> PretrainResult:
    """Train encoder (+ projection head) with NT-Xent; keep the lowest-loss epoch."""
    start = time.perf_counter()
    params = init_contrastive(data.n_channels, config, seed)
    best = params.copy()
    history, best_loss, best_epoch = [], np.inf, None
    state = nn.OptimizerState(lr=config.lr)
    shuffle_rng = np.random.default_rng(derive_seed(seed, 2))
    x_all = data.values
    for epoch in range(config.epochs):
        losses, sizes = [], []
        for b, idx in enumerate(_batches(len(data), config.batch_size, shuffle_rng, min_size=2)):
            originals, views = make_views(x_all[idx], config.jitter_sigma, derive_seed(seed, 3, epoch, b))
            params.zero_grad()
            try:
                with Tape() as tape:
                    z = encode_series(np.concatenate([originals, views]), params, config)
                    n = len(idx)
                    loss = nt_xent_loss(ContrastiveBatch(z[:n], z[n:]), config.temperature, config.anchors)
                tape.backward(loss)
            except NumericError as exc:
                raise TrainingError(f"non-finite contrastive loss: {exc}", epoch, b) from exc
            nn.adam_step(params, state)
            losses.append(loss.item())
            sizes.append(len(idx))
        if not losses:
            raise TrainingError("pretraining set too small for one batch of 2", epoch)
        epoch_loss = float(np.average(losses, weights=sizes))
        history.append(epoch_loss)
        if epoch_loss < best_loss:
            best_loss, best_epoch, best = epoch_loss, epoch, params.copy()
        log.debug("simclr epoch %d loss %.5f", epoch, epoch_loss)
    return PretrainResult(best.subset("encoder").copy(), best, history, best_epoch,
                          time.perf_counter() - start)
