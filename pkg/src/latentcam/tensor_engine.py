"""Minimal n-dimensional float64 tensor engine with reverse-mode autodiff.

Everything downstream (renderer outputs, encoders, the adapter, the DiT,
the training loop) is built on the `Tensor` class here. Design points:

* float64 everywhere, C-contiguous, numpy-backed storage.
* Dynamic tape: each op records (parent, vjp) closures on its output;
  `backward(loss)` replays them in reverse topological order.
* Elementwise binary ops require exactly matching shapes. The only
  implicit broadcasting is over leading batch dimensions of `matmul`;
  everything else goes through explicit `reshape` / `expand`.
* Non-finite values raise at the op that produced them. Tensors holding
  intentional sentinels (the renderer's +inf sky depth) are constructed
  with `allow_nonfinite=True`.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "Tensor",
    "Parameter",
    "ParameterSet",
    "AttentionWeights",
    "ShapeError",
    "NonFiniteError",
    "GraphConsumedError",
    "matmul",
    "multi_head_attention",
    "layer_norm",
    "softmax",
    "gelu",
    "concat",
    "narrow",
    "expand",
    "gather_rows",
    "backward",
    "finite_diff_check",
    "save_tensor",
    "load_tensor",
    "tensor_to_bytes",
    "tensor_from_stream",
]


class ShapeError(ValueError):
    """Operand shapes violate an operation's contract."""


class NonFiniteError(FloatingPointError):
    """An operation produced (or was handed) NaN/Inf values."""


class GraphConsumedError(RuntimeError):
    """backward() was called on a graph that was already released."""


def _contiguous_f64(data) -> np.ndarray:
    # np.ascontiguousarray would promote 0-d arrays to shape (1,)
    arr = np.asarray(data, dtype=np.float64)
    if not arr.flags["C_CONTIGUOUS"]:
        arr = np.ascontiguousarray(arr)
    return arr


def _is_finite(arr: np.ndarray) -> bool:
    # One reduction pass; a NaN or lone Inf poisons the sum, Inf-Inf gives NaN.
    return math.isfinite(float(np.sum(arr)))


class Tensor:
    """Numeric array with optional gradient accumulation.

    `data` is always a C-contiguous float64 ndarray. `grad` is a same-shape
    float64 buffer, present iff `requires_grad`.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_released", "_retain")

    def __init__(self, data, requires_grad: bool = False, *, allow_nonfinite: bool = False):
        arr = _contiguous_f64(data)
        if not allow_nonfinite and not _is_finite(arr):
            raise NonFiniteError("tensor constructed with non-finite values")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros(arr.shape) if requires_grad else None
        self._parents: list[tuple["Tensor", object]] = []
        self._released = False
        self._retain = bool(requires_grad)

    def retain_grad(self) -> "Tensor":
        """Keep this op output's gradient after backward (leaves always do)."""
        self._retain = True
        if self.grad is None and self.requires_grad:
            self.grad = np.zeros(self.data.shape)
        return self

    # -- construction helpers --

    @staticmethod
    def zeros(shape, requires_grad: bool = False) -> "Tensor":
        return Tensor(np.zeros(shape, dtype=np.float64), requires_grad)

    @staticmethod
    def ones(shape, requires_grad: bool = False) -> "Tensor":
        return Tensor(np.ones(shape, dtype=np.float64), requires_grad)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad[...] = 0.0

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # -- operators (exact-shape elementwise; scalars allowed) --

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_wrap_scalar(other, self), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, axes=None) -> "Tensor":
        return transpose(self, axes)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tmean(self, axis, keepdims)


def _wrap_scalar(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.full(like.shape, float(x)))


def _from_op(data: np.ndarray, parents, opname: str) -> Tensor:
    """Build an op output, checking finiteness and recording the tape."""
    needs = [(p, vjp) for p, vjp in parents if p.requires_grad]
    out = Tensor.__new__(Tensor)
    arr = _contiguous_f64(data)
    if not _is_finite(arr):
        raise NonFiniteError(f"non-finite values produced by {opname}")
    out.data = arr
    out.requires_grad = bool(needs)
    out.grad = None
    out._parents = needs
    out._released = False
    out._retain = False
    return out


def _same_shape(a: Tensor, b: Tensor, opname: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{opname}: shapes {a.shape} and {b.shape} must match exactly")


# -- elementwise arithmetic --

def add(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        c = float(b)
        return _from_op(a.data + c, [(a, lambda g: g)], "add")
    _same_shape(a, b, "add")
    return _from_op(a.data + b.data, [(a, lambda g: g), (b, lambda g: g)], "add")


def sub(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        c = float(b)
        return _from_op(a.data - c, [(a, lambda g: g)], "sub")
    _same_shape(a, b, "sub")
    return _from_op(a.data - b.data, [(a, lambda g: g), (b, lambda g: -g)], "sub")


def mul(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        c = float(b)
        return _from_op(a.data * c, [(a, lambda g: g * c)], "mul")
    _same_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return _from_op(ad * bd, [(a, lambda g: g * bd), (b, lambda g: g * ad)], "mul")


def div(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        c = float(b)
        return _from_op(a.data / c, [(a, lambda g: g / c)], "div")
    _same_shape(a, b, "div")
    ad, bd = a.data, b.data
    with np.errstate(divide="ignore", invalid="ignore"):
        out = ad / bd
    return _from_op(out, [(a, lambda g: g / bd), (b, lambda g: -g * ad / (bd * bd))], "div")


def neg(a: Tensor) -> Tensor:
    return _from_op(-a.data, [(a, lambda g: -g)], "neg")


def power(a: Tensor, p) -> Tensor:
    p = float(p)
    ad = a.data
    out = ad**p
    return _from_op(out, [(a, lambda g: g * p * ad ** (p - 1.0))], "power")


def square(a: Tensor) -> Tensor:
    ad = a.data
    return _from_op(ad * ad, [(a, lambda g: g * (2.0 * ad))], "square")


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return _from_op(out, [(a, lambda g: g * (0.5 / out))], "sqrt")


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return _from_op(out, [(a, lambda g: g * out)], "exp")


def log(a: Tensor) -> Tensor:
    ad = a.data
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(ad)
    return _from_op(out, [(a, lambda g: g / ad)], "log")


def sin(a: Tensor) -> Tensor:
    ad = a.data
    return _from_op(np.sin(ad), [(a, lambda g: g * np.cos(ad))], "sin")


def cos(a: Tensor) -> Tensor:
    ad = a.data
    return _from_op(np.cos(ad), [(a, lambda g: -g * np.sin(ad))], "cos")


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _from_op(out, [(a, lambda g: g * (1.0 - out * out))], "tanh")


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a: Tensor) -> Tensor:
    """tanh-approximation GELU (smooth, so finite differences behave)."""
    x = a.data
    x2 = x * x
    th = np.tanh(_GELU_C * (x + 0.044715 * (x2 * x)))
    out = 0.5 * x * (1.0 + th)

    def vjp(g):
        dinner = _GELU_C * (1.0 + 0.134145 * x2)
        return g * (0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * dinner)

    return _from_op(out, [(a, vjp)], "gelu")


# -- shape manipulation --

def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    old = a.shape
    return _from_op(a.data.reshape(shape), [(a, lambda g: g.reshape(old))], "reshape")


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.data.ndim)))
    axes = tuple(axes)
    inv = np.argsort(axes)
    return _from_op(np.transpose(a.data, axes), [(a, lambda g: np.transpose(g, inv))], "transpose")


def expand(a: Tensor, shape) -> Tensor:
    """Explicitly broadcast to `shape` (numpy broadcast rules).

    The gradient sums over every broadcast axis back to the source shape.
    """
    shape = tuple(int(s) for s in shape)
    try:
        out = np.broadcast_to(a.data, shape)
    except ValueError as e:
        raise ShapeError(f"expand: cannot broadcast {a.shape} to {shape}") from e
    src = a.shape
    pad = len(shape) - len(src)
    reduce_axes = tuple(
        i for i in range(len(shape)) if i < pad or src[i - pad] == 1 and shape[i] != 1
    )

    def vjp(g):
        red = g.sum(axis=reduce_axes, keepdims=False) if reduce_axes else g
        return red.reshape(src)

    return _from_op(out.copy(), [(a, vjp)], "expand")


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = list(tensors)
    axis = int(axis)
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)
    parents = []
    for i, t in enumerate(tensors):
        lo, hi = int(offsets[i]), int(offsets[i + 1])

        def vjp(g, lo=lo, hi=hi):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(lo, hi)
            return np.ascontiguousarray(g[tuple(idx)])

        parents.append((t, vjp))
    return _from_op(out, parents, "concat")


def narrow(a: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice [start, start+length) along one axis."""
    axis = int(axis)
    if not (0 <= start and start + length <= a.shape[axis]):
        raise ShapeError(f"narrow: [{start},{start + length}) out of range for axis {axis} of {a.shape}")
    idx = [slice(None)] * a.data.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)
    full = a.shape

    def vjp(g):
        out = np.zeros(full, dtype=np.float64)
        out[idx] = g
        return out

    return _from_op(a.data[idx].copy(), [(a, vjp)], "narrow")


def gather_rows(table: Tensor, indices) -> Tensor:
    """Row lookup table[i] for each i in `indices` (embedding fetch)."""
    idx = np.asarray(indices, dtype=np.int64)
    shape = table.shape

    def vjp(g):
        out = np.zeros(shape, dtype=np.float64)
        np.add.at(out, idx, g)
        return out

    return _from_op(table.data[idx], [(table, vjp)], "gather_rows")


# -- reductions --

def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.data.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)
    src = a.shape

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return np.broadcast_to(g, src).copy()

    return _from_op(out, [(a, vjp)], "sum")


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.data.ndim)
    count = 1
    for ax in axes:
        count *= a.shape[ax]
    out = a.data.mean(axis=axes, keepdims=keepdims)
    src = a.shape

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return np.broadcast_to(g / count, src).copy()

    return _from_op(out, [(a, vjp)], "mean")


# -- contraction --

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product; leading batch dims broadcast."""
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeError(f"matmul: operands must be >=2-d, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner extents differ: {a.shape} x {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError as e:
        raise ShapeError(f"matmul: incompatible batch extents: {a.shape} x {b.shape}") from e
    a_shape, b_shape = a.shape, b.shape

    def _unbroadcast(g, target_shape):
        # reduce gradient over broadcast leading batch dims
        extra = g.ndim - len(target_shape)
        if extra > 0:
            g = g.sum(axis=tuple(range(extra)))
        axes = tuple(i for i in range(g.ndim - 2) if target_shape[i] == 1 and g.shape[i] != 1)
        if axes:
            g = g.sum(axis=axes, keepdims=True)
        return g

    def vjp_a(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        return _unbroadcast(ga, a_shape)

    def vjp_b(g):
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(gb, b_shape)

    return _from_op(out, [(a, vjp_a), (b, vjp_b)], "matmul")


# -- fused normalization / attention building blocks --

def softmax(a: Tensor, axis: int = -1) -> Tensor:
    x = a.data
    y = x - x.max(axis=axis, keepdims=True)
    np.exp(y, out=y)
    y /= y.sum(axis=axis, keepdims=True)

    def vjp(g):
        gy = g * y
        out = gy.sum(axis=axis, keepdims=True)
        out = y * out
        np.subtract(gy, out, out=out)
        return out

    return _from_op(y, [(a, vjp)], "softmax")


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    if eps <= 0:
        raise ValueError("layer_norm: eps must be > 0")
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layer_norm: gamma/beta must be shape ({d},)")
    mu = tmean(x, axis=-1, keepdims=True)
    xc = sub(x, expand(mu, x.shape))
    var = tmean(square(xc), axis=-1, keepdims=True)
    inv = power(add(var, eps), -0.5)
    normed = mul(xc, expand(inv, x.shape))
    return add(mul(normed, expand(gamma, x.shape)), expand(beta, x.shape))


@dataclass
class AttentionWeights:
    """q/k/v/output projections of shape (D, D), bias-free."""

    wq: "Tensor"
    wk: "Tensor"
    wv: "Tensor"
    wo: "Tensor"


def multi_head_attention(q_in: Tensor, kv_in: Tensor, weights: AttentionWeights, heads: int) -> Tensor:
    """softmax(QK^T / sqrt(D/heads)) V per head, concatenated, output-projected.

    Inputs are (..., L, D); any leading batch dims are carried through.
    Cross-attention falls out of passing different q_in / kv_in.
    """
    d = q_in.shape[-1]
    if d % heads != 0:
        raise ShapeError(f"attention: width {d} not divisible by {heads} heads")
    if kv_in.shape[-1] != d:
        raise ShapeError(f"attention: query width {d} != key/value width {kv_in.shape[-1]}")
    dh = d // heads

    q = matmul(q_in, weights.wq)
    k = matmul(kv_in, weights.wk)
    v = matmul(kv_in, weights.wv)

    def split_heads(t: Tensor) -> Tensor:
        # (..., L, D) -> (..., heads, L, dh)
        lead = t.shape[:-2]
        L = t.shape[-2]
        t = reshape(t, lead + (L, heads, dh))
        perm = tuple(range(len(lead))) + (len(lead) + 1, len(lead), len(lead) + 2)
        return transpose(t, perm)

    qh, kh, vh = split_heads(mul(q, 1.0 / math.sqrt(dh))), split_heads(k), split_heads(v)
    logits = matmul(qh, transpose(kh, tuple(range(kh.data.ndim - 2)) + (kh.data.ndim - 1, kh.data.ndim - 2)))
    if not _is_finite(logits.data):  # pragma: no cover - _from_op already guards
        raise NonFiniteError("attention: non-finite logits")
    attn = softmax(logits, axis=-1)
    ctx = matmul(attn, vh)  # (..., heads, L_q, dh)
    lead = ctx.shape[:-3]
    L_q = ctx.shape[-2]
    perm = tuple(range(len(lead))) + (len(lead) + 1, len(lead), len(lead) + 2)
    ctx = transpose(ctx, perm)  # (..., L_q, heads, dh)
    ctx = reshape(ctx, lead + (L_q, d))
    return matmul(ctx, weights.wo)


# -- backward pass --

def backward(loss: Tensor, retain_graph: bool = False) -> None:
    """Populate `.grad` of every reachable requires_grad leaf tensor.

    Leaves (tensors constructed with requires_grad=True, i.e. parameters
    and inputs) always accumulate gradients; op outputs are transient and
    only keep theirs when `retain_grad()` was called, since materializing
    every intermediate gradient roughly doubles the backward cost.
    Gradients accumulate additively across calls; unless `retain_graph`
    is set the tape is released and a second call raises.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    if loss._released:
        raise GraphConsumedError("backward: graph already consumed; use retain_graph=True to reuse")
    if not loss.requires_grad:
        return

    # iterative topological order over the tape
    topo: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent, _ in node._parents:
            if id(parent) not in visited:
                stack.append((parent, False))

    flowing: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(topo):
        g = flowing.pop(id(node), None)
        if g is None:
            continue
        if node._retain:
            if node.grad is None:
                node.grad = np.zeros(node.data.shape)
            node.grad += g
        for parent, vjp in node._parents:
            contrib = vjp(g)
            acc = flowing.get(id(parent))
            if acc is None:
                flowing[id(parent)] = np.asarray(contrib, dtype=np.float64)
            else:
                # out-of-place: identity vjps alias their input, so an
                # in-place += here would corrupt other pending gradients
                flowing[id(parent)] = acc + contrib
    if not retain_graph:
        for node in topo:
            node._parents = []
            node._released = True


# -- gradient oracle --

def finite_diff_check(f, x: Tensor, eps: float = 1e-5, coords=None) -> float:
    """Max relative error between analytic gradient and central differences.

    `f` must be a deterministic scalar function of a single tensor; this is
    verified by double evaluation. `coords` optionally restricts the check
    to a subset of flat coordinates (all coordinates by default).
    """
    if not (1e-7 <= eps <= 1e-3):
        raise ValueError(f"finite_diff_check: eps {eps} outside [1e-7, 1e-3]")
    y1 = f(Tensor(x.data.copy()))
    y2 = f(Tensor(x.data.copy()))
    if y1.data.size != 1:
        raise ShapeError("finite_diff_check: f must return a scalar")
    if not np.array_equal(y1.data, y2.data):
        raise RuntimeError("finite_diff_check: f is not deterministic")

    xg = Tensor(x.data.copy(), requires_grad=True)
    loss = f(xg)
    backward(loss)
    analytic = xg.grad.ravel()

    flat = x.data.ravel()
    if coords is None:
        coords = range(flat.size)
    max_rel = 0.0
    for i in coords:
        orig = flat[i]
        probe = flat.copy()
        probe[i] = orig + eps
        fp = f(Tensor(probe.reshape(x.shape))).item()
        probe[i] = orig - eps
        fm = f(Tensor(probe.reshape(x.shape))).item()
        cd = (fp - fm) / (2.0 * eps)
        rel = abs(analytic[i] - cd) / max(1e-8, abs(cd))
        if rel > max_rel:
            max_rel = rel
    return max_rel


# -- parameters --

class Parameter:
    """A named, grouped, trainable (or frozen) tensor."""

    __slots__ = ("tensor", "name", "group")

    GROUPS = ("adapter", "backbone", "pose", "frozen")

    def __init__(self, tensor: Tensor, name: str, group: str):
        if group not in self.GROUPS:
            raise ValueError(f"unknown parameter group {group!r}")
        tensor.requires_grad = True
        tensor.retain_grad()
        self.tensor = tensor
        self.name = name
        self.group = group

    @property
    def data(self) -> np.ndarray:
        return self.tensor.data

    @property
    def grad(self) -> np.ndarray:
        return self.tensor.grad

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.tensor.shape}, group={self.group})"


class ParameterSet:
    """Ordered, name-unique collection of Parameters."""

    def __init__(self):
        self._params: dict[str, Parameter] = {}

    def add(self, name: str, data: np.ndarray, group: str) -> Parameter:
        if name in self._params:
            raise ValueError(f"duplicate parameter name {name!r}")
        p = Parameter(Tensor(np.asarray(data, dtype=np.float64)), name, group)
        self._params[name] = p
        return p

    def __getitem__(self, name: str) -> Parameter:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def __iter__(self):
        return iter(self._params.values())

    def names(self) -> list[str]:
        return list(self._params.keys())

    def by_group(self, group: str) -> list[Parameter]:
        return [p for p in self._params.values() if p.group == group]

    def set_group(self, name: str, group: str) -> None:
        p = self._params[name]
        if group not in Parameter.GROUPS:
            raise ValueError(f"unknown parameter group {group!r}")
        p.group = group

    def zero_grads(self) -> None:
        for p in self._params.values():
            p.tensor.zero_grad()

    def checksum(self, group: str | None = None) -> str:
        import hashlib

        h = hashlib.sha256()
        for p in self._params.values():
            if group is None or p.group == group:
                h.update(p.name.encode())
                h.update(p.data.tobytes())
        return h.hexdigest()

    def state(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self._params.items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        missing = set(self._params) - set(state)
        extra = set(state) - set(self._params)
        if missing or extra:
            raise ValueError(f"parameter state mismatch: missing={sorted(missing)} extra={sorted(extra)}")
        for name, arr in state.items():
            p = self._params[name]
            if p.data.shape != arr.shape:
                raise ShapeError(f"parameter {name}: shape {arr.shape} != {p.data.shape}")
            # in place: modules may hold direct views of the parameter buffer
            p.tensor.data[...] = arr
            p.tensor.grad[...] = 0.0


# -- serialization (.t64) --

def tensor_to_bytes(arr: np.ndarray) -> bytes:
    arr = _contiguous_f64(arr)
    header = json.dumps({"shape": list(arr.shape), "dtype": "f64"}, separators=(",", ":"))
    return header.encode("utf-8") + b"\n" + arr.astype("<f8").tobytes()


def tensor_from_stream(stream) -> np.ndarray:
    header_bytes = bytearray()
    while True:
        ch = stream.read(1)
        if not ch:
            raise ValueError("truncated tensor header")
        if ch == b"\n":
            break
        header_bytes.extend(ch)
    header = json.loads(header_bytes.decode("utf-8"))
    if header.get("dtype") != "f64":
        raise ValueError(f"unsupported tensor dtype {header.get('dtype')!r}")
    shape = tuple(int(s) for s in header["shape"])
    count = 1
    for s in shape:
        count *= s
    raw = stream.read(count * 8)
    if len(raw) != count * 8:
        raise ValueError("truncated tensor payload")
    return np.frombuffer(raw, dtype="<f8").reshape(shape).astype(np.float64)


def save_tensor(path, arr: np.ndarray) -> None:
    with open(path, "wb") as fh:
        fh.write(tensor_to_bytes(arr))


def load_tensor(path) -> np.ndarray:
    with open(path, "rb") as fh:
        return tensor_from_stream(fh)
