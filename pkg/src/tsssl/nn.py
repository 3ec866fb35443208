"""Transformer building blocks shared by both pretraining pipelines.

Parameters are plain :class:`~tsssl.autodiff.Tensor` leaves collected in a
:class:`ParameterSet` under dotted names such as ``encoder.block0.attn.wq``.
Layer functions take the set plus a name prefix rather than owning state.
"""

from __future__ import annotations

import json
from collections.abc import MutableMapping
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Union

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, ContractError, DataError, ShapeError

CHECKPOINT_FORMAT = "tsssl-checkpoint"
CHECKPOINT_VERSION = 1


class ParameterSet(MutableMapping):
    """Ordered name -> Tensor mapping holding trainable weights."""

    def __init__(self, entries: Optional[Iterable] = None):
        self._entries: dict[str, Tensor] = {}
        if entries is not None:
            items = entries.items() if hasattr(entries, "items") else entries
            for name, t in items:
                self[name] = t

    def __getitem__(self, name: str) -> Tensor:
        try:
            return self._entries[name]
        except KeyError:
            raise KeyError(f"no parameter named {name!r}") from None

    def __setitem__(self, name: str, value: Tensor) -> None:
        if not isinstance(value, Tensor):
            value = Tensor(value, requires_grad=True)
        self._entries[name] = value

    def __delitem__(self, name: str) -> None:
        del self._entries[name]

    def __iter__(self):
        return iter(self._entries)

    def __len__(self) -> int:
        return len(self._entries)

    def __repr__(self) -> str:
        return f"ParameterSet({len(self)} tensors, {self.n_values()} values)"

    def n_values(self) -> int:
        return int(sum(t.size for t in self._entries.values()))

    def copy(self, requires_grad: Optional[bool] = None) -> "ParameterSet":
        """Deep copy of values; gradients are not carried over."""
        out = ParameterSet()
        for name, t in self._entries.items():
            rg = t.requires_grad if requires_grad is None else requires_grad
            out._entries[name] = Tensor(t.data.copy(), requires_grad=rg, name=name)
        return out

    def frozen(self) -> "ParameterSet":
        return self.copy(requires_grad=False)

    def subset(self, prefix: str) -> "ParameterSet":
        """Entries whose name starts with ``prefix + '.'`` (tensors shared)."""
        dotted = prefix + "."
        out = ParameterSet()
        out._entries = {k: v for k, v in self._entries.items() if k.startswith(dotted)}
        return out

    def merged(self, *others: "ParameterSet") -> "ParameterSet":
        out = ParameterSet()
        out._entries = dict(self._entries)
        for other in others:
            for k, v in other.items():
                if k in out._entries:
                    raise ContractError(f"duplicate parameter name {k!r}")
                out._entries[k] = v
        return out

    def zero_grad(self) -> None:
        for t in self._entries.values():
            t.grad = np.zeros_like(t.data)

    def equal(self, other: "ParameterSet") -> bool:
        """Same names, same order, bit-identical values."""
        if list(self) != list(other):
            return False
        return all(self[k].data.tobytes() == other[k].data.tobytes() and
                   self[k].shape == other[k].shape for k in self)

    # --- checkpoint files --------------------------------------------------
    def save(self, path: Union[str, Path]) -> Path:
        """Write an uncompressed ``.npz`` with one fp64 array per name.

        The archive also holds ``__manifest__``: a JSON document listing
        ``format``, ``version`` and ``(name, shape)`` for every entry in
        insertion order. Loading restores that order.
        """
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        manifest = {
            "format": CHECKPOINT_FORMAT,
            "version": CHECKPOINT_VERSION,
            "dtype": "float64",
            "entries": [{"name": k, "shape": list(t.shape)} for k, t in self._entries.items()],
        }
        arrays = {f"p{i}": t.data for i, t in enumerate(self._entries.values())}
        with open(path, "wb") as fh:
            np.savez(fh, __manifest__=np.array(json.dumps(manifest)), **arrays)
        return path

    @classmethod
    def load(cls, path: Union[str, Path], requires_grad: bool = True) -> "ParameterSet":
        with np.load(Path(path), allow_pickle=False) as archive:
            if "__manifest__" not in archive:
                raise DataError(f"{path}: not a tsssl checkpoint (no manifest)")
            manifest = json.loads(str(archive["__manifest__"]))
            if manifest.get("format") != CHECKPOINT_FORMAT:
                raise DataError(f"{path}: unknown checkpoint format {manifest.get('format')!r}")
            out = cls()
            for i, entry in enumerate(manifest["entries"]):
                arr = np.array(archive[f"p{i}"], dtype=np.float64)
                if list(arr.shape) != list(entry["shape"]):
                    raise DataError(f"{path}: shape mismatch for {entry['name']}")
                out._entries[entry["name"]] = Tensor(arr, requires_grad=requires_grad, name=entry["name"])
        return out


@dataclass(frozen=True)
class EncoderConfig:
    input_dim: int
    model_dim: int = 64
    n_heads: int = 4
    mlp_dim: int = 128
    n_blocks: int = 2

    def __post_init__(self):
        if self.n_blocks < 1:
            raise ConfigError("n_blocks must be >= 1")
        if self.input_dim < 1 or self.mlp_dim < 1:
            raise ConfigError("input_dim and mlp_dim must be positive")
        if self.model_dim < 2 or self.model_dim % 2:
            raise ConfigError(f"model_dim must be even, got {self.model_dim}")
        if self.n_heads < 1 or self.model_dim % self.n_heads:
            raise ConfigError(f"model_dim {self.model_dim} not divisible by n_heads {self.n_heads}")


# --- initialisation --------------------------------------------------------

def glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def _put(params: ParameterSet, name: str, value: np.ndarray) -> None:
    params[name] = Tensor(value, requires_grad=True, name=name)


def add_linear(params, rng, prefix: str, fan_in: int, fan_out: int, w="w", b="b") -> None:
    _put(params, f"{prefix}.{w}", glorot(rng, fan_in, fan_out))
    _put(params, f"{prefix}.{b}", np.zeros(fan_out))


def add_layer_norm(params, prefix: str, dim: int) -> None:
    _put(params, f"{prefix}.g", np.ones(dim))
    _put(params, f"{prefix}.b", np.zeros(dim))


def add_block(params: ParameterSet, rng, prefix: str, model_dim: int, mlp_dim: int) -> None:
    add_layer_norm(params, f"{prefix}.ln1", model_dim)
    for proj in ("q", "k", "v", "o"):
        add_linear(params, rng, f"{prefix}.attn", model_dim, model_dim, w=f"w{proj}", b=f"b{proj}")
    add_layer_norm(params, f"{prefix}.ln2", model_dim)
    add_linear(params, rng, f"{prefix}.mlp", model_dim, mlp_dim, w="w1", b="b1")
    add_linear(params, rng, f"{prefix}.mlp", mlp_dim, model_dim, w="w2", b="b2")


def init_params(config: EncoderConfig, seed: int, prefix: str = "encoder") -> ParameterSet:
    """Fresh encoder weights; a pure function of ``(config, seed, prefix)``.

    Weight matrices are Glorot-uniform, biases zero, layer-norm gains one.
    """
    rng = np.random.default_rng(seed)
    params = ParameterSet()
    add_linear(params, rng, f"{prefix}.embed", config.input_dim, config.model_dim)
    for i in range(config.n_blocks):
        add_block(params, rng, f"{prefix}.block{i}", config.model_dim, config.mlp_dim)
    return params


def init_mlp_head(in_dim: int, hidden_dim: int, out_dim: int, seed: int, prefix: str) -> ParameterSet:
    rng = np.random.default_rng(seed)
    params = ParameterSet()
    add_linear(params, rng, prefix, in_dim, hidden_dim, w="w1", b="b1")
    add_linear(params, rng, prefix, hidden_dim, out_dim, w="w2", b="b2")
    return params


# --- layers ----------------------------------------------------------------

def positional_encoding(n_positions: int, model_dim: int) -> np.ndarray:
    """Fixed sinusoidal table: sin on even columns, cos on odd columns."""
    if model_dim % 2:
        raise ConfigError(f"positional encoding needs an even model_dim, got {model_dim}")
    pos = np.arange(n_positions, dtype=np.float64)[:, None]
    i2 = np.arange(0, model_dim, 2, dtype=np.float64)
    angle = pos / np.power(10000.0, i2 / model_dim)
    pe = np.empty((n_positions, model_dim))
    pe[:, 0::2] = np.sin(angle)
    pe[:, 1::2] = np.cos(angle)
    return pe


def linear(x: Tensor, params, prefix: str, w: str = "w", b: str = "b") -> Tensor:
    weight = params[f"{prefix}.{w}"]
    if x.shape[-1] != weight.shape[0]:
        raise ShapeError(f"{prefix}: input width {x.shape[-1]} != weight rows {weight.shape[0]}")
    return ad.matmul(x, weight) + params[f"{prefix}.{b}"]


def attention_forward(x: Tensor, params, n_heads: int, prefix: str, return_weights: bool = False):
    """Multi-head scaled dot-product self-attention over axis -2.

    ``x`` is ``(..., L, D)``. With ``return_weights`` the per-head attention
    matrix ``(..., H, L, L)`` is returned as a second value.
    """
    *lead, L, D = x.shape
    if D % n_heads:
        raise ShapeError(f"width {D} not divisible by {n_heads} heads")
    dh = D // n_heads

    def heads(t):
        t = ad.reshape(t, (*lead, L, n_heads, dh))
        return ad.transpose(t, tuple(range(len(lead))) + tuple(len(lead) + i for i in (1, 0, 2)))

    q = heads(linear(x, params, prefix, "wq", "bq"))
    k = heads(linear(x, params, prefix, "wk", "bk"))
    v = heads(linear(x, params, prefix, "wv", "bv"))
    n = len(lead)
    kt = ad.transpose(k, tuple(range(n + 1)) + (n + 2, n + 1))
    weights = ad.softmax(ad.matmul(q, kt) * (1.0 / np.sqrt(dh)), axis=-1)
    ctx = ad.matmul(weights, v)
    ctx = ad.transpose(ctx, tuple(range(n)) + tuple(n + i for i in (1, 0, 2)))
    out = linear(ad.reshape(ctx, (*lead, L, D)), params, prefix, "wo", "bo")
    return (out, weights) if return_weights else out


def mlp(x: Tensor, params, prefix: str) -> Tensor:
    """Linear -> GELU -> Linear using ``w1/b1`` and ``w2/b2``."""
    return linear(ad.gelu(linear(x, params, prefix, "w1", "b1")), params, prefix, "w2", "b2")


def mlp_head(h: Tensor, params, prefix: str = "classifier") -> Tensor:
    return mlp(h, params, prefix)


def transformer_block(x: Tensor, params, prefix: str, n_heads: int) -> Tensor:
    """Pre-norm residual block: ``x + Attn(LN(x))`` then ``+ MLP(LN(.))``."""
    h = x + attention_forward(
        ad.layer_norm(x, params[f"{prefix}.ln1.g"], params[f"{prefix}.ln1.b"]), params, n_heads, f"{prefix}.attn"
    )
    return h + mlp(ad.layer_norm(h, params[f"{prefix}.ln2.g"], params[f"{prefix}.ln2.b"]), params, f"{prefix}.mlp")


def embed_tokens(tokens: Tensor, params, config: EncoderConfig, positions=None, prefix: str = "encoder") -> Tensor:
    """Linear token embedding plus sinusoidal encodings of ``positions``.

    ``positions`` defaults to ``0..L-1``; it may also be a ``(B, L)`` integer
    array when each sequence keeps a different subset of positions.
    """
    L = tokens.shape[-2]
    if positions is None:
        positions = np.arange(L)
    positions = np.asarray(positions)
    table = positional_encoding(int(positions.max()) + 1, config.model_dim)
    return linear(tokens, params, f"{prefix}.embed") + Tensor(table[positions])


def run_blocks(x: Tensor, params, config: EncoderConfig, prefix: str = "encoder") -> Tensor:
    for i in range(config.n_blocks):
        x = transformer_block(x, params, f"{prefix}.block{i}", config.n_heads)
    return x


def encoder_forward(tokens: Tensor, params, config: EncoderConfig, positions=None, prefix: str = "encoder") -> Tensor:
    """Token sequence ``(..., L, input_dim)`` -> contextual states ``(..., L, model_dim)``."""
    if tokens.shape[-1] != config.input_dim:
        raise ShapeError(f"token width {tokens.shape[-1]} != encoder input_dim {config.input_dim}")
    return run_blocks(embed_tokens(tokens, params, config, positions, prefix), params, config, prefix)


# --- optimiser -------------------------------------------------------------

@dataclass
class OptimizerState:
    lr: float = 1e-3
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: ParameterSet, state: OptimizerState) -> None:
    """One bias-corrected Adam update of every tensor in ``params``.

    Gradients must be populated (zero arrays are fine); they are zeroed
    afterwards. Parameter arrays are replaced, never modified in place, so
    earlier snapshots stay valid.
    """
    for name, t in params.items():
        if t.grad is None:
            raise ContractError(f"parameter {name!r} has no gradient")
    b1, b2 = state.betas
    state.step += 1
    t_ = state.step
    c1, c2 = 1.0 - b1**t_, 1.0 - b2**t_
    for name, t in params.items():
        g = t.grad
        m = state.m.get(name)
        if m is None:
            m = np.zeros_like(t.data)
            v = np.zeros_like(t.data)
        else:
            v = state.v[name]
            if m.shape != t.shape:
                raise ContractError(f"optimizer state for {name!r} has shape {m.shape}, parameter {t.shape}")
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        state.m[name], state.v[name] = m, v
        t.data = t.data - state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        t.grad = np.zeros_like(t.data)


# --- shared series encoder -------------------------------------------------

@dataclass(frozen=True)
class ArchConfig:
    """Architecture shared by both pipelines; series are fed as patch tokens."""

    patch_len: int = 10
    model_dim: int = 64
    n_heads: int = 4
    mlp_dim: int = 128
    n_blocks: int = 2

    def encoder(self, n_channels: int) -> EncoderConfig:
        return EncoderConfig(
            input_dim=n_channels * self.patch_len,
            model_dim=self.model_dim,
            n_heads=self.n_heads,
            mlp_dim=self.mlp_dim,
            n_blocks=self.n_blocks,
        )


def pooled_embedding(x: np.ndarray, params, arch: ArchConfig, prefix: str = "encoder") -> Tensor:
    """``(B, c, d)`` series -> ``(B, model_dim)``: patch tokens, encoder, mean over positions."""
    from .augment import patchify_array

    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 2:
        x = x[None]
    tokens = Tensor(patchify_array(x, arch.patch_len))
    states = encoder_forward(tokens, params, arch.encoder(x.shape[1]), prefix=prefix)
    return ad.reduce_mean(states, axis=1)
