"""Reverse-mode autodiff on a flat tape of numpy float64 arrays.

Complex quantities never use a complex dtype here: a complex array of shape
[...] travels as a real array of shape [..., 2] (trailing axis = re, im).
Spectral ops (``rfft`` / ``irfft``) are registered into the op table by the
:mod:`modeformer.fft` module at import time.

Broadcasting for elementwise binary ops is deliberately narrower than numpy:
after right-alignment an operand may broadcast only on axes that form a
leading prefix of its own aligned shape (a scalar, a bias [H] against [L, H],
a mask [L, L] against [B, h, L, L]). Anything fancier must be written as an
explicit reduction + expansion so gradients stay easy to audit.
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Graph",
    "ShapeError",
    "GraphError",
    "NonFiniteError",
    "forward_op",
    "register_op",
    "registered_ops",
    "concat",
    "finite_diff_gradient",
    "deterministic_mode",
    "strict_mode",
    "is_deterministic",
]

NEG_MASK_VALUE = -1e30  # additive attention-mask sentinel; absorbs any real score


class ShapeError(ValueError):
    """An op was called with incompatible or malformed shapes."""


class GraphError(RuntimeError):
    """Tape misuse: nested graphs, detached losses, unknown ops."""


class NonFiniteError(FloatingPointError):
    """A NaN/Inf was seen where strict mode forbids it."""


# --------------------------------------------------------------------------
# global modes

_STATE = threading.local()


def _state():
    if not hasattr(_STATE, "graph"):
        _STATE.graph = None
        _STATE.deterministic = False
        _STATE.strict = False
    return _STATE


def is_deterministic() -> bool:
    return _state().deterministic


@contextlib.contextmanager
def deterministic_mode(flag: bool = True):
    """Route matmuls through einsum so accumulation order is shape-independent.

    Under this mode, padding extra rows onto an operand cannot perturb the
    bit pattern of the untouched rows (BLAS kernels may re-block by shape).
    """
    st = _state()
    prev, st.deterministic = st.deterministic, bool(flag)
    try:
        yield
    finally:
        st.deterministic = prev


@contextlib.contextmanager
def strict_mode(flag: bool = True):
    """Validate that every op input and output is finite."""
    st = _state()
    prev, st.strict = st.strict, bool(flag)
    try:
        yield
    finally:
        st.strict = prev


# --------------------------------------------------------------------------
# tensor + tape

class Tensor:
    """A float64 array plus grad slot. Hashed by identity, never by value."""

    __slots__ = ("data", "requires_grad", "grad", "_tracked")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._tracked = self.requires_grad

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{flag})"

    # -- operator sugar (everything routes through forward_op) --

    def __add__(self, other):
        return forward_op("add", (self, as_tensor(other)))

    def __radd__(self, other):
        return forward_op("add", (as_tensor(other), self))

    def __sub__(self, other):
        return forward_op("sub", (self, as_tensor(other)))

    def __rsub__(self, other):
        return forward_op("sub", (as_tensor(other), self))

    def __mul__(self, other):
        return forward_op("mul", (self, as_tensor(other)))

    def __rmul__(self, other):
        return forward_op("mul", (as_tensor(other), self))

    def __truediv__(self, other):
        return forward_op("div", (self, as_tensor(other)))

    def __rtruediv__(self, other):
        return forward_op("div", (as_tensor(other), self))

    def __neg__(self):
        return forward_op("mul", (self, as_tensor(-1.0)))

    def __matmul__(self, other):
        return forward_op("matmul", (self, as_tensor(other)))

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return forward_op("reshape", (self,), {"shape": tuple(shape)})

    def transpose(self, axes: Sequence[int]) -> "Tensor":
        return forward_op("transpose", (self,), {"axes": tuple(axes)})

    def slice(self, starts, stops) -> "Tensor":
        return forward_op("slice", (self,), {"starts": tuple(starts), "stops": tuple(stops)})

    def pad(self, widths) -> "Tensor":
        return forward_op("pad", (self,), {"widths": tuple(tuple(w) for w in widths)})

    def gather(self, axis: int, indices) -> "Tensor":
        return forward_op("gather", (self,), {"axis": axis, "indices": indices})

    def scatter(self, axis: int, indices, extent: int) -> "Tensor":
        return forward_op("scatter", (self,), {"axis": axis, "indices": indices, "extent": extent})

    def sum(self, axes=None, keepdims: bool = False) -> "Tensor":
        return forward_op("sum", (self,), {"axes": axes, "keepdims": keepdims})

    def mean(self, axes=None, keepdims: bool = False) -> "Tensor":
        return forward_op("mean", (self,), {"axes": axes, "keepdims": keepdims})

    def sqrt(self) -> "Tensor":
        return forward_op("sqrt", (self,))

    def log(self) -> "Tensor":
        return forward_op("log", (self,))

    def abs(self) -> "Tensor":
        return forward_op("abs", (self,))

    def clamp(self, lo: float, hi: float) -> "Tensor":
        return forward_op("clamp", (self,), {"lo": lo, "hi": hi})

    def softmax(self) -> "Tensor":
        return forward_op("softmax", (self,))

    def rms_normalize(self, eps: float = 1e-12) -> "Tensor":
        return forward_op("rmsnorm", (self,), {"eps": eps})

    def silu(self) -> "Tensor":
        return forward_op("silu", (self,))

    def rope(self, positions, base: float = 10000.0) -> "Tensor":
        return forward_op("rope", (self,), {"positions": positions, "base": base})


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    return forward_op("concat", tuple(parts), {"axis": axis})


class _Node:
    __slots__ = ("tag", "inputs", "out", "vjp")

    def __init__(self, tag, inputs, out, vjp):
        self.tag = tag
        self.inputs = inputs
        self.out = out
        self.vjp = vjp


class Graph:
    """Append-only tape. Use as a context manager; graphs do not nest."""

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self) -> "Graph":
        st = _state()
        if st.graph is not None:
            raise GraphError("autodiff graphs do not nest")
        st.graph = self
        return self

    def __exit__(self, *exc):
        _state().graph = None
        return False

    def backward(self, loss: Tensor) -> dict[Tensor, np.ndarray]:
        """Walk the tape in strict reverse order; return grads for leaves.

        Also accumulates into each leaf's ``.grad``. The loss must be a
        scalar produced by an op recorded on this graph.
        """
        if loss.data.shape != ():
            raise GraphError(f"backward needs a scalar loss, got shape {loss.data.shape}")
        produced = {id(n.out) for n in self.nodes}
        if id(loss) not in produced:
            raise GraphError("loss tensor was not produced on this graph")

        grads: dict[int, np.ndarray] = {id(loss): np.ones((), dtype=np.float64)}
        leaves: dict[int, Tensor] = {}
        for node in reversed(self.nodes):
            g = grads.pop(id(node.out), None)
            if g is None:
                continue
            for t, gi in zip(node.inputs, node.vjp(g)):
                if gi is None or not t._tracked:
                    continue
                prev = grads.get(id(t))
                grads[id(t)] = gi if prev is None else prev + gi
                if t.requires_grad:
                    leaves[id(t)] = t

        result: dict[Tensor, np.ndarray] = {}
        for tid, t in leaves.items():
            g = np.asarray(grads[tid], dtype=np.float64)
            if g.shape != t.data.shape:  # scalar leaves vs () reductions
                g = g.reshape(t.data.shape)
            result[t] = g
            t.grad = g.copy() if t.grad is None else t.grad + g
        return result


# --------------------------------------------------------------------------
# dispatch

_OPS: dict[str, Callable] = {}


def register_op(tag: str, fn: Callable) -> None:
    """Install an op: fn(datas, attrs) -> (out_array, vjp).

    vjp(g) must return one gradient array (or None) per input, in order.
    """
    _OPS[tag] = fn


def registered_ops() -> tuple[str, ...]:
    return tuple(sorted(_OPS))


def forward_op(tag: str, inputs: Sequence[Tensor], attrs: dict | None = None) -> Tensor:
    fn = _OPS.get(tag)
    if fn is None:
        raise GraphError(f"unknown op {tag!r}")
    st = _state()
    datas = [t.data for t in inputs]
    if st.strict:
        for i, d in enumerate(datas):
            if not np.all(np.isfinite(d)):
                raise NonFiniteError(f"{tag}: non-finite values in input {i}")
    out_data, vjp = fn(datas, attrs or {})
    if st.strict and not np.all(np.isfinite(out_data)):
        raise NonFiniteError(f"{tag}: produced non-finite output")
    out = Tensor(out_data)
    if st.graph is not None and any(t._tracked for t in inputs):
        out._tracked = True
        st.graph.nodes.append(_Node(tag, tuple(inputs), out, vjp))
    return out


# --------------------------------------------------------------------------
# broadcasting helpers (prefix-singleton rule)

def _aligned(shape: tuple[int, ...], rank: int):
    return (None,) * (rank - len(shape)) + shape


def _check_prefix_broadcast(op: str, sa: tuple[int, ...], sb: tuple[int, ...]) -> None:
    rank = max(len(sa), len(sb))
    aa, ab = _aligned(sa, rank), _aligned(sb, rank)
    seen_fixed_a = seen_fixed_b = False
    for ea, eb in zip(aa, ab):
        if ea is not None and eb is not None and ea != eb and 1 not in (ea, eb):
            raise ShapeError(f"{op}: cannot broadcast {sa} with {sb}")
        ba = ea is None or (ea == 1 and eb not in (None, 1) and eb != ea)
        bb = eb is None or (eb == 1 and ea not in (None, 1) and ea != eb)
        if ba and seen_fixed_a or bb and seen_fixed_b:
            raise ShapeError(
                f"{op}: broadcast of {sa} with {sb} is not prefix-only; "
                "reduce/expand explicitly instead"
            )
        seen_fixed_a |= not ba
        seen_fixed_b |= not bb


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, ts) in enumerate(zip(g.shape, shape)) if ts == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _norm_axes(axes, ndim: int) -> tuple[int, ...]:
    if axes is None:
        return tuple(range(ndim))
    if isinstance(axes, int):
        axes = (axes,)
    out = tuple(a % ndim for a in axes)
    if len(set(out)) != len(out):
        raise ShapeError(f"duplicate reduction axes {axes}")
    return out


# --------------------------------------------------------------------------
# elementwise / linear ops

def _op_add(datas, attrs):
    a, b = datas
    _check_prefix_broadcast("add", a.shape, b.shape)
    out = a + b

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return out, vjp


def _op_sub(datas, attrs):
    a, b = datas
    _check_prefix_broadcast("sub", a.shape, b.shape)
    out = a - b

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return out, vjp


def _op_mul(datas, attrs):
    a, b = datas
    _check_prefix_broadcast("mul", a.shape, b.shape)
    out = a * b

    def vjp(g):
        return _unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)

    return out, vjp


def _op_div(datas, attrs):
    a, b = datas
    _check_prefix_broadcast("div", a.shape, b.shape)
    out = a / b

    def vjp(g):
        return _unbroadcast(g / b, a.shape), _unbroadcast(-g * a / (b * b), b.shape)

    return out, vjp


def _matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if is_deterministic():
        return np.einsum("...ik,...kj->...ij", a, b)
    return a @ b


def _op_matmul(datas, attrs):
    a, b = datas
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs rank >= 2 operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner extents differ: {a.shape} @ {b.shape}")
    _check_prefix_broadcast("matmul", a.shape[:-2], b.shape[:-2])
    out = _matmul(a, b)

    def vjp(g):
        ga = _matmul(g, np.swapaxes(b, -1, -2))
        gb = _matmul(np.swapaxes(a, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return out, vjp


# --------------------------------------------------------------------------
# structural ops

def _op_reshape(datas, attrs):
    (a,) = datas
    shape = attrs["shape"]
    out = a.reshape(shape)

    def vjp(g):
        return (g.reshape(a.shape),)

    return out, vjp


def _op_transpose(datas, attrs):
    (a,) = datas
    axes = attrs["axes"]
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeError(f"transpose axes {axes} are not a permutation of rank {a.ndim}")
    inv = tuple(np.argsort(axes))
    out = a.transpose(axes)

    def vjp(g):
        return (g.transpose(inv),)

    return out, vjp


def _op_slice(datas, attrs):
    (a,) = datas
    starts, stops = attrs["starts"], attrs["stops"]
    if len(starts) != a.ndim or len(stops) != a.ndim:
        raise ShapeError(f"slice bounds rank {len(starts)} vs array rank {a.ndim}")
    sl = []
    for ax, (s, e) in enumerate(zip(starts, stops)):
        s = 0 if s is None else s
        e = a.shape[ax] if e is None else e
        if not (0 <= s < e <= a.shape[ax]):
            raise ShapeError(f"slice [{s}:{e}] out of range for axis {ax} extent {a.shape[ax]}")
        sl.append(slice(s, e))
    sl = tuple(sl)
    out = a[sl].copy()

    def vjp(g):
        ga = np.zeros_like(a)
        ga[sl] = g
        return (ga,)

    return out, vjp


def _op_pad(datas, attrs):
    (a,) = datas
    widths = attrs["widths"]
    if len(widths) != a.ndim:
        raise ShapeError(f"pad widths rank {len(widths)} vs array rank {a.ndim}")
    out = np.pad(a, widths)
    inner = tuple(slice(b, b + n) for (b, _), n in zip(widths, a.shape))

    def vjp(g):
        return (g[inner].copy(),)

    return out, vjp


def _take_index(ndim: int, axis: int, idx: np.ndarray):
    return (slice(None),) * axis + (idx,)


def _op_gather(datas, attrs):
    (a,) = datas
    axis = attrs["axis"] % a.ndim
    idx = np.asarray(attrs["indices"], dtype=np.intp)
    if idx.ndim != 1:
        raise ShapeError(f"gather indices must be 1-D, got shape {idx.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[axis]):
        raise ShapeError(f"gather index out of range for axis {axis} extent {a.shape[axis]}")
    out = np.take(a, idx, axis=axis)

    def vjp(g):
        ga = np.zeros_like(a)
        np.add.at(ga, _take_index(a.ndim, axis, idx), g)
        return (ga,)

    return out, vjp


def _op_scatter(datas, attrs):
    (a,) = datas
    axis = attrs["axis"] % a.ndim
    extent = int(attrs["extent"])
    idx = np.asarray(attrs["indices"], dtype=np.intp)
    if idx.ndim != 1 or idx.size != a.shape[axis]:
        raise ShapeError(
            f"scatter needs one index per source slot: {idx.shape} vs extent {a.shape[axis]}"
        )
    if idx.size != np.unique(idx).size:
        raise ShapeError("scatter indices must be unique")
    if idx.size and (idx.min() < 0 or idx.max() >= extent):
        raise ShapeError(f"scatter index out of range for target extent {extent}")
    shape = list(a.shape)
    shape[axis] = extent
    out = np.zeros(shape, dtype=np.float64)
    out[_take_index(a.ndim, axis, idx)] = a

    def vjp(g):
        return (np.take(g, idx, axis=axis),)

    return out, vjp


def _op_concat(datas, attrs):
    axis = attrs["axis"]
    ranks = {d.ndim for d in datas}
    if len(ranks) != 1:
        raise ShapeError(f"concat inputs have mixed ranks {sorted(ranks)}")
    axis %= datas[0].ndim
    out = np.concatenate(datas, axis=axis)
    sizes = [d.shape[axis] for d in datas]
    offsets = np.cumsum([0] + sizes)

    def vjp(g):
        return tuple(
            np.take(g, np.arange(offsets[i], offsets[i + 1]), axis=axis)
            for i in range(len(datas))
        )

    return out, vjp


# --------------------------------------------------------------------------
# reductions

def _op_sum(datas, attrs):
    (a,) = datas
    axes = _norm_axes(attrs.get("axes"), a.ndim)
    keepdims = bool(attrs.get("keepdims", False))
    out = a.sum(axis=axes, keepdims=keepdims)

    def vjp(g):
        gg = g
        if not keepdims:
            gg = np.expand_dims(gg, axes)
        return (np.broadcast_to(gg, a.shape).copy(),)

    return out, vjp


def _op_mean(datas, attrs):
    (a,) = datas
    axes = _norm_axes(attrs.get("axes"), a.ndim)
    keepdims = bool(attrs.get("keepdims", False))
    count = 1
    for ax in axes:
        count *= a.shape[ax]
    out = a.mean(axis=axes, keepdims=keepdims)

    def vjp(g):
        gg = g
        if not keepdims:
            gg = np.expand_dims(gg, axes)
        return (np.broadcast_to(gg / count, a.shape).copy(),)

    return out, vjp


# --------------------------------------------------------------------------
# nonlinear ops

def _op_softmax(datas, attrs):
    (a,) = datas
    shifted = a - a.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        dot = (g * out).sum(axis=-1, keepdims=True)
        return (out * (g - dot),)

    return out, vjp


def _op_rmsnorm(datas, attrs):
    (a,) = datas
    eps = float(attrs.get("eps", 1e-12))
    n = a.shape[-1]
    r = 1.0 / np.sqrt((a * a).mean(axis=-1, keepdims=True) + eps)
    out = a * r

    def vjp(g):
        dot = (g * a).sum(axis=-1, keepdims=True)
        return (g * r - a * (dot / n) * r**3,)

    return out, vjp


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _op_silu(datas, attrs):
    (a,) = datas
    s = _sigmoid(a)
    out = a * s

    def vjp(g):
        return (g * s * (1.0 + a * (1.0 - s)),)

    return out, vjp


def _op_sqrt(datas, attrs):
    (a,) = datas
    if np.any(a < 0):
        raise ShapeError("sqrt of negative input")
    out = np.sqrt(a)

    def vjp(g):
        return (g * 0.5 / out,)

    return out, vjp


def _op_log(datas, attrs):
    (a,) = datas
    if np.any(a <= 0):
        raise ShapeError("log of non-positive input")
    out = np.log(a)

    def vjp(g):
        return (g / a,)

    return out, vjp


def _op_abs(datas, attrs):
    (a,) = datas
    out = np.abs(a)

    def vjp(g):
        return (g * np.sign(a),)

    return out, vjp


def _op_clamp(datas, attrs):
    (a,) = datas
    lo, hi = float(attrs["lo"]), float(attrs["hi"])
    if lo > hi:
        raise ShapeError(f"clamp bounds inverted: [{lo}, {hi}]")
    out = np.clip(a, lo, hi)
    inside = (a >= lo) & (a <= hi)

    def vjp(g):
        return (g * inside,)

    return out, vjp


def _op_rope(datas, attrs):
    """Rotary position mixing on interleaved pairs of the last axis.

    Input [..., L, heads, head_dim]; positions has length L and indexes
    axis -3. Pair m of the last axis rotates by angle pos * base^(-2m/head_dim).
    """
    (a,) = datas
    if a.ndim < 3:
        raise ShapeError(f"rope needs rank >= 3 [..., L, heads, head_dim], got {a.shape}")
    hd = a.shape[-1]
    if hd % 2:
        raise ShapeError(f"rope head_dim must be even, got {hd}")
    pos = np.asarray(attrs["positions"], dtype=np.float64)
    if pos.shape != (a.shape[-3],):
        raise ShapeError(f"rope positions {pos.shape} vs sequence extent {a.shape[-3]}")
    base = float(attrs.get("base", 10000.0))
    half = hd // 2
    theta = base ** (-2.0 * np.arange(half) / hd)  # [half]
    ang = pos[:, None, None] * theta[None, None, :]  # [L, 1, half]
    c, s = np.cos(ang), np.sin(ang)
    ae, ao = a[..., 0::2], a[..., 1::2]
    out = np.empty_like(a)
    out[..., 0::2] = ae * c - ao * s
    out[..., 1::2] = ae * s + ao * c

    def vjp(g):
        ge, go = g[..., 0::2], g[..., 1::2]
        ga = np.empty_like(g)
        ga[..., 0::2] = ge * c + go * s
        ga[..., 1::2] = -ge * s + go * c
        return (ga,)

    return out, vjp


for _tag, _fn in {
    "add": _op_add,
    "sub": _op_sub,
    "mul": _op_mul,
    "div": _op_div,
    "matmul": _op_matmul,
    "reshape": _op_reshape,
    "transpose": _op_transpose,
    "slice": _op_slice,
    "pad": _op_pad,
    "gather": _op_gather,
    "scatter": _op_scatter,
    "concat": _op_concat,
    "sum": _op_sum,
    "mean": _op_mean,
    "softmax": _op_softmax,
    "rmsnorm": _op_rmsnorm,
    "silu": _op_silu,
    "sqrt": _op_sqrt,
    "log": _op_log,
    "abs": _op_abs,
    "clamp": _op_clamp,
    "rope": _op_rope,
}.items():
    register_op(_tag, _fn)


# --------------------------------------------------------------------------
# finite differences

def finite_diff_gradient(f: Callable[[Tensor], "Tensor | float"], x: Tensor,
                         h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of scalar f wrt every entry of x.

    Perturbs x.data in place and restores it. The independent check for
    everything the tape computes; O(2 * x.size) evaluations of f.
    """
    base = x.data
    grad = np.zeros_like(base)
    flat_src = base.reshape(-1)
    flat_out = grad.reshape(-1)
    for i in range(flat_src.size):
        orig = flat_src[i]
        flat_src[i] = orig + h
        fp = _scalar(f(x))
        flat_src[i] = orig - h
        fm = _scalar(f(x))
        flat_src[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NonFiniteError(f"finite_diff_gradient: f returned non-finite at index {i}")
        flat_out[i] = (fp - fm) / (2.0 * h)
    return grad


def _scalar(v) -> float:
    if isinstance(v, Tensor):
        return float(v.data)
    return float(v)
