"""A small reverse-mode autodiff engine on top of numpy (fp64 only).

Operations are recorded on an explicit :class:`Tape` only while one is
active::

    with Tape() as tape:
        loss = (x * x).sum()
    tape.backward(loss)          # or loss.backward()

Outside a tape nothing is recorded, which is how evaluation runs. Tapes are
tracked per thread, so independent training runs can use separate threads.

Broadcasting is deliberately limited: the right operand of an element-wise
op may be a python scalar, a tensor of the same shape, or a tensor whose
shape is a trailing suffix of the left operand's shape (bias vectors,
positional tables). ``matmul`` batches over leading axes.
"""

from __future__ import annotations

import threading
from collections.abc import Mapping
from typing import Callable, NamedTuple, Optional, Sequence, Union

import numpy as np

from .errors import AxisError, ConfigError, ContractError, DeterminismError, NumericError, ShapeError

Scalar = Union[int, float]

_state = threading.local()


def _tape_stack() -> list:
    stack = getattr(_state, "stack", None)
    if stack is None:
        stack = _state.stack = []
    return stack


def active_tape() -> Optional["Tape"]:
    stack = _tape_stack()
    return stack[-1] if stack else None


class Node(NamedTuple):
    op: str
    inputs: tuple
    output: "Tensor"
    backward: Callable[[np.ndarray], tuple]


class Tape:
    """Append-only record of the operations of one forward pass."""

    def __init__(self):
        self.nodes: list[Node] = []

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()
        else:  # pragma: no cover - misuse of nested tapes
            stack.remove(self)

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, op: str, inputs: tuple, output: "Tensor", backward) -> None:
        output._tape = self
        self.nodes.append(Node(op, inputs, output, backward))

    def reset(self, zero_grads: bool = False) -> None:
        """Drop all recorded nodes; optionally zero leaf gradient buffers.

        Parameter values are never touched.
        """
        if zero_grads:
            for node in self.nodes:
                for t in node.inputs:
                    if t._leaf and t.grad is not None:
                        t.grad[...] = 0.0
        self.nodes.clear()

    def backward(self, loss: "Tensor") -> None:
        """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf.

        Nodes are visited in exact reverse append order. Gradients are
        added to existing buffers, so calling this twice doubles them.
        """
        if loss.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        leaves: dict[int, Tensor] = {}
        if loss._leaf and loss.requires_grad:
            leaves[id(loss)] = loss
        for node in reversed(self.nodes):
            g = grads.pop(id(node.output), None)
            if g is None:
                continue
            input_grads = node.backward(g)
            for inp, gi in zip(node.inputs, input_grads):
                if gi is None or not inp.requires_grad:
                    continue
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
                if inp._leaf:
                    leaves[key] = inp
        for key, leaf in leaves.items():
            g = grads.get(key)
            if g is None:
                continue
            if leaf.grad is None:
                leaf.grad = np.array(g, dtype=np.float64)
            else:
                leaf.grad += g


class no_grad:
    """Suspend recording on the current thread (evaluation mode)."""

    def __enter__(self):
        stack = _tape_stack()
        self._saved = list(stack)
        stack.clear()
        return self

    def __exit__(self, *exc):
        stack = _tape_stack()
        stack.clear()
        stack.extend(self._saved)


class Tensor:
    """Dense fp64 array with an optional gradient buffer.

    Tensors created by the user are leaves; tensors produced by operations
    are intermediates whose gradients live only inside ``Tape.backward``.
    """

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        arr = np.array(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise NumericError("tensor values must be finite")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self._leaf = True
        self._tape: Optional[Tape] = None

    @classmethod
    def _result(cls, data: np.ndarray, op: str) -> "Tensor":
        if not np.all(np.isfinite(data)):
            raise NumericError(f"non-finite value produced by {op}")
        t = cls.__new__(cls)
        t.data = data
        t.requires_grad = False
        t.grad = None
        t.name = None
        t._leaf = False
        t._tape = None
        return t

    # --- array-ish surface -------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def values(self) -> np.ndarray:
        return self.data

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.size == 1 else float(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __len__(self) -> int:
        return self.shape[0]

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def backward(self) -> None:
        if self.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {self.shape}")
        if self._tape is None:
            return
        self._tape.backward(self)

    # --- operators ---------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("tensor/tensor division is not supported; use l2_normalize or mul")
        return mul(self, 1.0 / other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return index(self, idx)

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce_mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _emit(op: str, data: np.ndarray, inputs: tuple, backward) -> Tensor:
    out = Tensor._result(data, op)
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.record(op, inputs, out, backward)
    return out


def _is_suffix(small: tuple, big: tuple) -> bool:
    return len(small) <= len(big) and tuple(big[len(big) - len(small):]) == tuple(small)


def _reduce_to(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    return g.reshape((-1,) + tuple(g.shape[lead:])).sum(axis=0).reshape(shape)


def _check_binary(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape == b.shape or _is_suffix(b.shape, a.shape):
        return
    raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}")


# --- element-wise ----------------------------------------------------------

def add(a: Tensor, b: Union[Tensor, Scalar]) -> Tensor:
    if not isinstance(b, Tensor):
        s = float(b)
        return _emit("add", a.data + s, (a,), lambda g: (g,))
    _check_binary("add", a, b)
    return _emit("add", a.data + b.data, (a, b), lambda g: (g, _reduce_to(g, b.shape)))


def sub(a: Tensor, b: Union[Tensor, Scalar]) -> Tensor:
    if not isinstance(b, Tensor):
        s = float(b)
        return _emit("sub", a.data - s, (a,), lambda g: (g,))
    _check_binary("sub", a, b)
    return _emit("sub", a.data - b.data, (a, b), lambda g: (g, -_reduce_to(g, b.shape)))


def mul(a: Tensor, b: Union[Tensor, Scalar]) -> Tensor:
    if not isinstance(b, Tensor):
        s = float(b)
        return _emit("scalar_mul", a.data * s, (a,), lambda g: (g * s,))
    _check_binary("mul", a, b)
    ad, bd = a.data, b.data
    return _emit(
        "mul", ad * bd, (a, b), lambda g: (g * bd, _reduce_to(g * ad, b.shape))
    )


def neg(a: Tensor) -> Tensor:
    return _emit("neg", -a.data, (a,), lambda g: (-g,))


def elementwise(op: str, a: Tensor, b: Union[Tensor, Scalar]) -> Tensor:
    """Dispatch by name: ``add``, ``sub``, ``mul`` or ``scalar-mul``."""
    if op == "add":
        return add(a, b)
    if op == "sub":
        return sub(a, b)
    if op in ("mul", "scalar-mul", "scalar_mul"):
        if op != "mul" and isinstance(b, Tensor):
            raise ShapeError("scalar-mul expects a python scalar")
        return mul(a, b)
    raise ContractError(f"unknown element-wise op {op!r}")


def gelu(a: Tensor) -> Tensor:
    """tanh-approximation GELU with its exact analytic derivative."""
    x = a.data
    c = np.sqrt(2.0 / np.pi)
    inner = c * (x + 0.044715 * x**3)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def backward(g):
        dinner = c * (1.0 + 3 * 0.044715 * x**2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner),)

    return _emit("gelu", out, (a,), backward)


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return _emit("exp", out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    x = a.data
    if np.any(x <= 0):
        raise NumericError("log of non-positive value")
    return _emit("log", np.log(x), (a,), lambda g: (g / x,))


# --- linear algebra --------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes.

    ``b`` is either a plain matrix shared across ``a``'s leading axes or has
    the same leading axes as ``a``.
    """
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs >=2-d operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2] or (b.ndim > 2 and a.shape[:-2] != b.shape[:-2]):
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    ad, bd = a.data, b.data
    out = ad @ bd

    def backward(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        if bd.ndim == 2 and ad.ndim > 2:
            k, n = bd.shape
            gb = ad.reshape(-1, k).T @ g.reshape(-1, n)
        else:
            gb = np.swapaxes(ad, -1, -2) @ g
        return ga, gb

    return _emit("matmul", out, (a, b), backward)


# --- reductions ------------------------------------------------------------

def _norm_axes(axis, ndim: int) -> tuple:
    if axis is None:
        return tuple(range(ndim))
    axes = (axis,) if isinstance(axis, (int, np.integer)) else tuple(axis)
    out = []
    for ax in axes:
        if not -ndim <= ax < ndim:
            raise AxisError(f"axis {ax} out of range for {ndim}-d tensor")
        out.append(ax % ndim)
    if len(set(out)) != len(out):
        raise AxisError(f"repeated axis in {axis}")
    return tuple(sorted(out))


def _expand_back(g: np.ndarray, axes: tuple, keepdims: bool, shape: tuple) -> np.ndarray:
    if not keepdims:
        g = np.expand_dims(g, axes)
    return np.broadcast_to(g, shape)


def reduce_sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    shape = a.shape
    out = np.sum(a.data, axis=axes, keepdims=keepdims)
    return _emit(
        "sum", np.asarray(out, dtype=np.float64), (a,),
        lambda g: (np.array(_expand_back(g, axes, keepdims, shape)),),
    )


def reduce_mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    shape = a.shape
    count = int(np.prod([shape[i] for i in axes])) if axes else 1
    out = np.sum(a.data, axis=axes, keepdims=keepdims) / count
    return _emit(
        "mean", np.asarray(out, dtype=np.float64), (a,),
        lambda g: (np.array(_expand_back(g, axes, keepdims, shape)) / count,),
    )


def reduce(op: str, a: Tensor, axis=None) -> Tensor:
    if op == "sum":
        return reduce_sum(a, axis)
    if op == "mean":
        return reduce_mean(a, axis)
    raise ContractError(f"unknown reduction {op!r}")


# --- normalisations --------------------------------------------------------

def softmax(a: Tensor, axis: int = -1) -> Tensor:
    (ax,) = _norm_axes(axis, a.ndim)
    z = a.data - np.max(a.data, axis=ax, keepdims=True)
    e = np.exp(z)
    y = e / np.sum(e, axis=ax, keepdims=True)

    def backward(g):
        return (y * (g - np.sum(g * y, axis=ax, keepdims=True)),)

    return _emit("softmax", y, (a,), backward)


def logsumexp(a: Tensor, axis: int = -1, exclude: Optional[np.ndarray] = None) -> Tensor:
    """log(sum(exp(a))) along ``axis``; entries where ``exclude`` is True are left out."""
    (ax,) = _norm_axes(axis, a.ndim)
    x = a.data
    keep = np.ones(x.shape, dtype=bool) if exclude is None else ~np.broadcast_to(exclude, x.shape)
    if not np.all(np.any(keep, axis=ax)):
        raise ContractError("logsumexp: a slice has every entry excluded")
    masked = np.where(keep, x, -np.inf)
    m = np.max(masked, axis=ax, keepdims=True)
    e = np.where(keep, np.exp(masked - m), 0.0)
    s = np.sum(e, axis=ax, keepdims=True)
    out = np.squeeze(m + np.log(s), axis=ax)
    w = e / s

    def backward(g):
        return (np.expand_dims(g, ax) * w,)

    return _emit("logsumexp", out, (a,), backward)


def layer_norm(a: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise the last axis to zero mean / unit variance, then scale and shift."""
    d = a.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm: gain {gain.shape} / bias {bias.shape} must be ({d},)")
    if eps <= 0:
        raise ConfigError("layer_norm eps must be positive")
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    gd = gain.data
    out = xhat * gd + bias.data

    def backward(g):
        dxhat = g * gd
        dx = rstd * (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        )
        return dx, _reduce_to(g * xhat, (d,)), _reduce_to(g, (d,))

    return _emit("layer_norm", out, (a, gain, bias), backward)


def l2_normalize(a: Tensor, axis: int = -1) -> Tensor:
    """Scale each slice along ``axis`` to unit Euclidean norm."""
    (ax,) = _norm_axes(axis, a.ndim)
    x = a.data
    n = np.sqrt(np.sum(x * x, axis=ax, keepdims=True))
    if np.any(n == 0.0):
        raise NumericError("l2_normalize: zero-norm vector")
    y = x / n

    def backward(g):
        return ((g - y * np.sum(g * y, axis=ax, keepdims=True)) / n,)

    return _emit("l2_normalize", y, (a,), backward)


# --- structural ------------------------------------------------------------

def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    src = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"cannot reshape {src} to {tuple(shape)}") from exc
    return _emit("reshape", out, (a,), lambda g: (g.reshape(src),))


def transpose(a: Tensor, axes: Optional[Sequence[int]] = None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    if sorted(ax % a.ndim for ax in axes) != list(range(a.ndim)):
        raise AxisError(f"bad permutation {axes} for {a.ndim}-d tensor")
    inv = tuple(np.argsort(axes))
    return _emit(
        "transpose", np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),)
    )


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(tensors)
    if not tensors:
        raise ContractError("concat of an empty sequence")
    (ax,) = _norm_axes(axis, tensors[0].ndim)
    try:
        out = np.concatenate([t.data for t in tensors], axis=ax)
    except ValueError as exc:
        raise ShapeError(f"concat: {[t.shape for t in tensors]}") from exc
    bounds = np.cumsum([t.shape[ax] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=ax))

    return _emit("concat", out, tensors, backward)


def index(a: Tensor, idx) -> Tensor:
    """numpy-style (including fancy) indexing; gradients scatter-add back."""
    try:
        out = np.array(a.data[idx], dtype=np.float64)
    except IndexError as exc:
        raise ContractError(f"index out of range for shape {a.shape}: {exc}") from exc
    shape = a.shape

    def backward(g):
        full = np.zeros(shape)
        np.add.at(full, idx, g)
        return (full,)

    return _emit("index", out, (a,), backward)


# --- gradient checking -----------------------------------------------------

def _named_tensors(params) -> list:
    if isinstance(params, Tensor):
        return [("x", params)]
    if isinstance(params, Mapping):
        return list(params.items())
    return [(str(i), t) for i, t in enumerate(params)]


def grad_check(
    f: Callable[[], Tensor],
    params,
    h: float = 1e-5,
    max_coords: Optional[int] = 20,
    seed: int = 0,
) -> float:
    """Largest relative gap between taped and central-difference gradients.

    ``f`` takes no arguments and must read the tensors in ``params`` (a
    ParameterSet, mapping, tensor or list of tensors). Up to ``max_coords``
    coordinates per tensor are sampled; ``None`` checks them all. The error
    for one coordinate is ``|analytic - numeric| / max(1, |numeric|)``.
    """
    if not 1e-7 <= h <= 1e-4:
        raise ConfigError(f"finite-difference step {h} outside [1e-7, 1e-4]")
    named = _named_tensors(params)
    with no_grad():
        first, second = f().item(), f().item()
    if first != second:
        raise DeterminismError(f"f is not deterministic: {first!r} != {second!r}")

    saved = [t.grad for _, t in named]
    for _, t in named:
        t.grad = None
    try:
        with Tape() as tape:
            loss = f()
        tape.backward(loss)
        analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for _, t in named]
    finally:
        for (_, t), g in zip(named, saved):
            t.grad = g

    rng = np.random.default_rng(seed)
    worst = 0.0
    with no_grad():
        for (_, t), ga in zip(named, analytic):
            t.data = np.ascontiguousarray(t.data)
            flat = t.data.reshape(-1)
            coords = np.arange(flat.size)
            if max_coords is not None and flat.size > max_coords:
                coords = rng.choice(flat.size, size=max_coords, replace=False)
            for i in coords:
                orig = flat[i]
                flat[i] = orig + h
                up = f().item()
                flat[i] = orig - h
                down = f().item()
                flat[i] = orig
                numeric = (up - down) / (2 * h)
                err = abs(ga.reshape(-1)[i] - numeric) / max(1.0, abs(numeric))
                worst = max(worst, err)
    return worst
