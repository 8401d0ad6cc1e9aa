"""Minimal define-by-run reverse-mode autodiff over float64 numpy arrays.

Every differentiable primitive is registered as a (forward, backward) pair in
``_OPS``.  Calling a primitive builds a graph node on its output tensor; when a
:class:`Tape` is active the call is additionally recorded so the forward pass
can be replayed from (possibly modified) leaf values.
"""
from __future__ import annotations

import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import ContractError, NonFiniteError, ShapeError

_state = threading.local()


def _tape_stack() -> list:
    if not hasattr(_state, "tapes"):
        _state.tapes = []
    return _state.tapes


def grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextmanager
def no_grad():
    """Disable graph construction (evaluation passes)."""
    prev = grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


class Tensor:
    __slots__ = ("values", "requires_grad", "grad", "node_id", "_node")

    def __init__(self, values, requires_grad: bool = False):
        self.values = np.array(values, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad = None
        self.node_id = None
        self._node = None

    @property
    def shape(self) -> tuple:
        return self.values.shape

    @property
    def size(self) -> int:
        return self.values.size

    def item(self) -> float:
        return float(self.values.item())

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def backward(self):
        return backward(self)


@dataclass
class _Node:
    kind: str
    inputs: tuple
    attrs: dict
    cache: object


@dataclass
class TapeEntry:
    kind: str
    input_ids: tuple
    attrs: dict
    output_id: int


@dataclass
class Tape:
    """Ordered record of primitive calls made while the tape is active.

    Recording order is a topological order of the dataflow graph because every
    entry is appended only after its inputs exist.
    """

    entries: list = field(default_factory=list)
    tensors: list = field(default_factory=list)
    leaf_ids: list = field(default_factory=list)
    _slots: dict = field(default_factory=dict, repr=False)

    def __enter__(self):
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc):
        _tape_stack().remove(self)
        return False

    def _register(self, t: Tensor) -> int:
        slot = self._slots.get(id(t))
        if slot is not None:
            return slot
        self.tensors.append(t)
        t.node_id = self._slots[id(t)] = len(self.tensors) - 1
        self.leaf_ids.append(t.node_id)
        return t.node_id

    def _record(self, kind, inputs, attrs, out: Tensor):
        ids = tuple(self._register(t) for t in inputs)
        self.tensors.append(out)
        out.node_id = self._slots[id(out)] = len(self.tensors) - 1
        self.entries.append(TapeEntry(kind, ids, dict(attrs), out.node_id))

    def replay(self, leaf_values: dict | None = None) -> list:
        """Re-run the recorded forward pass; returns the value of every tape slot.

        ``leaf_values`` maps leaf ids to replacement arrays; unspecified leaves
        keep their recorded values.
        """
        env: dict = {}
        for i in self.leaf_ids:
            env[i] = self.tensors[i].values
        if leaf_values:
            for i, v in leaf_values.items():
                if i not in env:
                    raise ContractError(f"tape slot {i} is not a leaf")
                env[i] = np.asarray(v, dtype=np.float64)
        for e in self.entries:
            fwd = _OPS[e.kind][0]
            env[e.output_id], _ = fwd(*(env[i] for i in e.input_ids), **e.attrs)
        return [env[i] for i in range(len(self.tensors))]


_OPS: dict = {}


def register(kind: str, forward: Callable, backward: Callable | None):
    _OPS[kind] = (forward, backward)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _apply(kind: str, inputs: Sequence[Tensor], **attrs) -> Tensor:
    inputs = tuple(_as_tensor(t) for t in inputs)
    forward, bwd = _OPS[kind]
    with np.errstate(over="ignore", invalid="ignore"):
        values, cache = forward(*(t.values for t in inputs), **attrs)
    if not np.all(np.isfinite(values)):
        raise NonFiniteError(f"{kind} produced non-finite values")
    out = Tensor.__new__(Tensor)
    out.values = values
    out.grad = None
    out.node_id = None
    out.requires_grad = (
        bwd is not None and grad_enabled() and any(t.requires_grad for t in inputs)
    )
    out._node = _Node(kind, inputs, attrs, cache) if out.requires_grad else None
    for tape in _tape_stack():
        tape._record(kind, inputs, attrs, out)
    return out


# ---------------------------------------------------------------------------
# primitives


def _check_broadcast(a, b, kind):
    if a.shape == b.shape or b.shape == a.shape[1:]:
        return
    raise ShapeError(f"{kind}: cannot combine shapes {a.shape} and {b.shape}")


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    return g.sum(axis=0)


def _add_fwd(a, b):
    _check_broadcast(a, b, "add")
    return a + b, None


def _add_bwd(g, cache, a, b):
    return g, _unbroadcast(g, b.shape)


def _sub_fwd(a, b):
    _check_broadcast(a, b, "sub")
    return a - b, None


def _sub_bwd(g, cache, a, b):
    return g, -_unbroadcast(g, b.shape)


def _mul_fwd(a, b):
    _check_broadcast(a, b, "mul")
    return a * b, None


def _mul_bwd(g, cache, a, b):
    return g * b, _unbroadcast(g * a, b.shape)


def _scale_fwd(a, c):
    return a * c, None


def _scale_bwd(g, cache, a, c):
    return (g * c,)


def _relu_fwd(a):
    return np.maximum(a, 0.0), None


def _relu_bwd(g, cache, a):
    # subgradient at exactly 0 is 0
    return (g * (a > 0),)


def _sum_fwd(a):
    return np.array(a.sum()), None


def _sum_bwd(g, cache, a):
    return (np.full(a.shape, float(g)),)


def _mean_fwd(a):
    return np.array(a.sum() / a.size), None


def _mean_bwd(g, cache, a):
    return (np.full(a.shape, float(g) / a.size),)


def _mse_fwd(a, b):
    if a.shape != b.shape:
        raise ShapeError(f"mse: shapes {a.shape} and {b.shape} differ")
    d = a - b
    return np.array((d * d).sum() / d.size), d


def _mse_bwd(g, d, a, b):
    ga = (2.0 * float(g) / d.size) * d
    return ga, -ga


def _matmul_fwd(a, b):
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    return a @ b, None


def _matmul_bwd(g, cache, a, b, needs=(True, True)):
    return (g @ b.T if needs[0] else None), (a.T @ g if needs[1] else None)


def _reshape_fwd(a, shape):
    shape = tuple(shape)
    if int(np.prod(shape)) != a.size:
        raise ShapeError(f"reshape: {a.shape} -> {shape}")
    return a.reshape(shape), None


def _reshape_bwd(g, cache, a, shape):
    return (g.reshape(a.shape),)


def _log_softmax_fwd(x):
    if x.ndim == 0 or x.shape[-1] < 1:
        raise ShapeError("log_softmax needs a non-empty last axis")
    z = x - x.max(axis=-1, keepdims=True)
    out = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    return out, out


def _log_softmax_bwd(g, out, x):
    p = np.exp(out)
    return (g - p * g.sum(axis=-1, keepdims=True),)


def _conv_geometry(x_shape, w_shape, pad, stride):
    if len(x_shape) != 4 or len(w_shape) != 4:
        raise ShapeError("conv2d expects N×C×H×W input and O×C×kh×kw kernel")
    n, c, h, w = x_shape
    o, ck, kh, kw = w_shape
    if c != ck:
        raise ShapeError(f"conv2d: input has {c} channels, kernel expects {ck}")
    if stride < 1 or pad < 0:
        raise ShapeError("conv2d: stride must be >= 1 and pad >= 0")
    hp, wp = h + 2 * pad, w + 2 * pad
    if kh > hp or kw > wp:
        raise ShapeError("conv2d: kernel larger than padded input")
    if (hp - kh) % stride or (wp - kw) % stride:
        raise ShapeError(
            f"conv2d: stride {stride} does not tile padded input {hp}×{wp} "
            f"with kernel {kh}×{kw}"
        )
    return (hp - kh) // stride + 1, (wp - kw) // stride + 1


def _conv2d_fwd(x, w, b, pad, stride):
    ho, wo = _conv_geometry(x.shape, w.shape, pad, stride)
    n, c, _, _ = x.shape
    o, _, kh, kw = w.shape
    if b.shape != (o,):
        raise ShapeError(f"conv2d: bias shape {b.shape} != ({o},)")
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    xt = xp.transpose(1, 0, 2, 3)
    # cols rows ordered (c, i, j) to match w.reshape(o, -1)
    cols = np.empty((c, kh, kw, n, ho, wo))
    for i in range(kh):
        for j in range(kw):
            cols[:, i, j] = xt[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride]
    cols = cols.reshape(c * kh * kw, n * ho * wo)
    out = w.reshape(o, -1) @ cols + b[:, None]
    return out.reshape(o, n, ho, wo).transpose(1, 0, 2, 3), cols


def _conv2d_bwd(g, cols, x, w, b, pad, stride, needs=(True, True, True)):
    n, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    ho, wo = g.shape[2], g.shape[3]
    g2 = g.transpose(1, 0, 2, 3).reshape(o, -1)
    dw = (g2 @ cols.T).reshape(w.shape) if needs[1] else None
    db = g2.sum(axis=1) if needs[2] else None
    dx = None
    if needs[0]:
        dcols = (w.reshape(o, -1).T @ g2).reshape(c, kh, kw, n, ho, wo)
        dxt = np.zeros((c, n, h + 2 * pad, wd + 2 * pad))
        for i in range(kh):
            for j in range(kw):
                dxt[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += dcols[:, i, j]
        dx = dxt.transpose(1, 0, 2, 3)
        if pad:
            dx = dx[:, :, pad : pad + h, pad : pad + wd]
    return dx, dw, db


def _detach_fwd(a):
    return a.copy(), None


register("add", _add_fwd, _add_bwd)
register("sub", _sub_fwd, _sub_bwd)
register("mul", _mul_fwd, _mul_bwd)
register("scale", _scale_fwd, _scale_bwd)
register("relu", _relu_fwd, _relu_bwd)
register("sum", _sum_fwd, _sum_bwd)
register("mean", _mean_fwd, _mean_bwd)
register("mse", _mse_fwd, _mse_bwd)
register("matmul", _matmul_fwd, _matmul_bwd)
register("reshape", _reshape_fwd, _reshape_bwd)
register("conv2d", _conv2d_fwd, _conv2d_bwd)
_WANTS_NEEDS = {"conv2d", "matmul"}
register("detach", _detach_fwd, None)
register("log_softmax", _log_softmax_fwd, _log_softmax_bwd)


def add(a, b) -> Tensor:
    return _apply("add", (a, b))


def sub(a, b) -> Tensor:
    return _apply("sub", (a, b))


def mul(a, b) -> Tensor:
    return _apply("mul", (a, b))


def scale(a, c: float) -> Tensor:
    return _apply("scale", (a,), c=float(c))


def relu(a) -> Tensor:
    return _apply("relu", (a,))


def sum(a) -> Tensor:  # noqa: A001 - mirrors the op name
    return _apply("sum", (a,))


def mean(a) -> Tensor:
    return _apply("mean", (a,))


def mse(a, b) -> Tensor:
    """Mean of squared differences over every element."""
    return _apply("mse", (a, b))


def matmul(a, b) -> Tensor:
    return _apply("matmul", (a, b))


def reshape(a, shape) -> Tensor:
    return _apply("reshape", (a,), shape=tuple(int(s) for s in shape))


def log_softmax(x) -> Tensor:
    """Max-shifted log-softmax over the last axis."""
    return _apply("log_softmax", (x,))


def conv2d(x, kernel, bias, pad: int = 0, stride: int = 1) -> Tensor:
    """Zero-padded cross-correlation.  ``(H + 2*pad - kh)`` must divide by ``stride``."""
    return _apply("conv2d", (x, kernel, bias), pad=int(pad), stride=int(stride))


def detach(x) -> Tensor:
    """Same values, cut from the graph."""
    return _apply("detach", (x,))


# ---------------------------------------------------------------------------
# backward


def _topo_order(root: Tensor) -> list:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        t, expanded = stack.pop()
        if expanded:
            order.append(t)
            continue
        if id(t) in seen:
            continue
        seen.add(id(t))
        stack.append((t, True))
        if t._node is not None:
            for p in t._node.inputs:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
    return order


def backward(loss: Tensor) -> dict:
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every reachable leaf.

    Gradients accumulate across calls until ``zero_grad`` is called; stored
    arrays may alias each other and must not be mutated in place.  Returns
    a map from ``id(leaf)`` to the gradient contributed by this call.
    """
    if loss.values.size != 1 or loss.values.ndim != 0:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return {}
    grads = {id(loss): np.ones_like(loss.values)}
    contributed = {}
    for t in reversed(_topo_order(loss)):
        g = grads.pop(id(t), None)
        if g is None:
            continue
        node = t._node
        if node is None:
            t.grad = g if t.grad is None else t.grad + g
            contributed[id(t)] = g
            continue
        bwd = _OPS[node.kind][1]
        if node.kind in _WANTS_NEEDS:
            needs = tuple(p.requires_grad for p in node.inputs)
            in_grads = bwd(g, node.cache, *(p.values for p in node.inputs), needs=needs, **node.attrs)
        else:
            in_grads = bwd(g, node.cache, *(p.values for p in node.inputs), **node.attrs)
        for p, gp in zip(node.inputs, in_grads):
            if gp is None or not p.requires_grad:
                continue
            key = id(p)
            grads[key] = gp if key not in grads else grads[key] + gp
    return contributed


# ---------------------------------------------------------------------------
# gradient checking


def finite_diff_check(
    f: Callable[..., Tensor],
    inputs: Sequence,
    eps: float = 1e-5,
    kink_tol: float = 1e-3,
) -> float:
    """Worst relative disagreement between autodiff and central differences.

    ``f`` maps tensors to a scalar tensor.  Error per entry is
    ``|analytic - numeric| / max(1, |analytic|, |numeric|)``.  Entries where
    the forward and backward one-sided slopes disagree by more than
    ``kink_tol`` straddle a non-differentiable point and are skipped.
    """
    if eps <= 0:
        raise ContractError("eps must be positive")
    arrays = [np.array(x.values if isinstance(x, Tensor) else x, dtype=np.float64) for x in inputs]
    leaves = [Tensor(a, requires_grad=True) for a in arrays]
    out = f(*leaves)
    if out.values.ndim != 0:
        raise ContractError(f"finite_diff_check needs a scalar function, got {out.shape}")
    backward(out)

    def value(arrs):
        with no_grad():
            return f(*(Tensor(a) for a in arrs)).item()

    f0 = out.item()
    worst = 0.0
    for k, base in enumerate(arrays):
        analytic = leaves[k].grad if leaves[k].grad is not None else np.zeros_like(base)
        for idx in np.ndindex(base.shape):
            orig = base[idx]
            base[idx] = orig + eps
            fp = value(arrays)
            base[idx] = orig - eps
            fm = value(arrays)
            base[idx] = orig
            slope_r, slope_l = (fp - f0) / eps, (f0 - fm) / eps
            if abs(slope_r - slope_l) > kink_tol * max(1.0, abs(slope_r), abs(slope_l)):
                continue
            numeric = (fp - fm) / (2 * eps)
            a = analytic[idx]
            err = abs(a - numeric) / max(1.0, abs(a), abs(numeric))
            worst = max(worst, err)
    return worst
