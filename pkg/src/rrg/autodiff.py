"""Dense fp64 tensors with tape-based reverse-mode automatic differentiation.

Everything downstream (encoder, adapters, decoder, training) is built on the
op set in this module. Design constraints:

* fp64 only; an op output containing NaN/Inf raises ``NumericError`` instead
  of propagating silently.
* Broadcasting is restricted to scalar-vs-tensor and exact-shape cases; the
  handful of row/column patterns the models need (bias add, per-row scaling,
  column scatter) are explicit ops with their own backward rules.
* Ops record onto the active ``Tape``; with no tape open they are plain
  numpy evaluation, which is the inference path.
* ``grad_check`` is the finite-difference oracle every backward rule is
  verified against.
"""

from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np

from .errors import ContractError, DimensionError, NumericError, StateError

__all__ = [
    "Tensor",
    "Tape",
    "OPS",
    "constant",
    "matmul",
    "linear",
    "add",
    "sub",
    "mul",
    "neg",
    "tanh",
    "exp",
    "silu",
    "softplus",
    "mul_scalar",
    "softmax",
    "log_softmax",
    "layer_norm",
    "transpose",
    "slice_rows",
    "slice_cols",
    "concat_rows",
    "concat_cols",
    "add_cols",
    "reverse_rows",
    "scale_rows",
    "embedding",
    "select_columns",
    "causal_conv1d",
    "selective_scan",
    "sum_all",
    "mean_all",
    "grad_check",
]

# Names of all differentiable ops; tests key gradient-check cases off this.
OPS: set[str] = set()

_SOFTPLUS_CUTOFF = 20.0  # above this softplus(x) = x to fp64 precision


class Tensor:
    """A dense fp64 array plus gradient metadata.

    ``grad`` is populated by ``Tape.backward`` for requires_grad leaves and
    accumulates across backward calls until ``zero_grad``.
    """

    __slots__ = ("data", "requires_grad", "grad", "_node")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if not arr.flags["C_CONTIGUOUS"]:
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._node: _Node | None = None

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool) -> "Tensor":
        # Internal fast path: arr is a fresh fp64 array produced by an op.
        t = cls.__new__(cls)
        t.data = arr
        t.requires_grad = requires_grad
        t.grad = None
        t._node = None
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        if self._node is None:
            raise StateError("backward() on a tensor that was not recorded on a tape")
        self._node.tape.backward(self)

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data, False)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def constant(data) -> Tensor:
    """A tensor that never takes gradient (masks, fixed inputs)."""
    return Tensor(data, requires_grad=False)


class _Node:
    __slots__ = ("out", "parents", "backward_fn", "tape")

    def __init__(self, out: Tensor, parents: tuple[Tensor, ...], backward_fn, tape: "Tape"):
        self.out = out
        self.parents = parents
        self.backward_fn = backward_fn
        self.tape = tape


class Tape:
    """Ordered record of ops; parents always precede consumers.

    Use as a context manager around a forward pass, then call
    ``backward(loss)`` exactly once. Tapes nest; the innermost one records.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self._consumed = False
        self._prev: Tape | None = None

    def __enter__(self) -> "Tape":
        global _ACTIVE_TAPE
        self._prev = _ACTIVE_TAPE
        _ACTIVE_TAPE = self
        return self

    def __exit__(self, *exc) -> None:
        global _ACTIVE_TAPE
        _ACTIVE_TAPE = self._prev
        self._prev = None

    def backward(self, loss: Tensor) -> None:
        if self._consumed:
            raise StateError("backward() called twice on the same tape")
        if loss.data.size != 1:
            raise ContractError(f"backward() needs a scalar loss, got shape {loss.shape}")
        self._consumed = True
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for node in reversed(self.nodes):
            g = grads.pop(id(node.out), None)
            if g is None:
                continue
            parent_grads = node.backward_fn(g)
            for parent, pg in zip(node.parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                if parent._node is None or parent._node.tape is not self:
                    # Leaf for this tape: accumulate into .grad.
                    if parent.grad is None:
                        parent.grad = pg.copy()
                    else:
                        parent.grad += pg
                else:
                    acc = grads.get(id(parent))
                    if acc is None:
                        grads[id(parent)] = pg.copy()
                    else:
                        acc += pg
        # A loss that is itself a leaf (no nodes) still seeds its own grad.
        if loss._node is None and loss.requires_grad:
            if loss.grad is None:
                loss.grad = np.ones_like(loss.data)
            else:
                loss.grad += 1.0


_ACTIVE_TAPE: Tape | None = None


def _register(name: str) -> str:
    OPS.add(name)
    return name


def _apply(name: str, out_data: np.ndarray, parents: tuple[Tensor, ...], backward_fn) -> Tensor:
    if not np.all(np.isfinite(out_data)):
        raise NumericError(f"non-finite values produced by op '{name}'")
    req = any(p.requires_grad for p in parents)
    out = Tensor._wrap(out_data, req)
    tape = _ACTIVE_TAPE
    if req and tape is not None:
        node = _Node(out, parents, backward_fn, tape)
        out._node = node
        tape.nodes.append(node)
    return out


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_binary_shapes(name: str, a: Tensor, b: Tensor) -> None:
    if a.shape == b.shape or a.size == 1 or b.size == 1:
        return
    raise DimensionError(f"{name}: shapes {a.shape} and {b.shape} are neither equal nor scalar")


def _reduce_to(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    # Undo scalar broadcasting: a size-1 parent receives the summed gradient.
    if grad.shape == shape:
        return grad
    return np.sum(grad).reshape(shape)


# ---------------------------------------------------------------------------
# Linear algebra
# ---------------------------------------------------------------------------

_register("matmul")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    out = a.data @ b.data

    def backward(g):
        ga = g @ b.data.T if a.requires_grad else None
        gb = a.data.T @ g if b.requires_grad else None
        return ga, gb

    return _apply("matmul", out, (a, b), backward)


_register("linear")


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """x[n,din] times w[dout,din] transposed, plus optional bias[dout]."""
    if x.data.ndim != 2 or w.data.ndim != 2 or x.shape[1] != w.shape[1]:
        raise DimensionError(f"linear: input {x.shape} does not match weight {w.shape}")
    out = x.data @ w.data.T
    if b is not None:
        if b.shape != (w.shape[0],):
            raise DimensionError(f"linear: bias {b.shape} does not match weight {w.shape}")
        out = out + b.data

    if b is None:

        def backward(g):
            gx = g @ w.data if x.requires_grad else None
            gw = g.T @ x.data if w.requires_grad else None
            return gx, gw

        return _apply("linear", out, (x, w), backward)

    def backward_b(g):
        gx = g @ w.data if x.requires_grad else None
        gw = g.T @ x.data if w.requires_grad else None
        gb = g.sum(axis=0) if b.requires_grad else None
        return gx, gw, gb

    return _apply("linear", out, (x, w, b), backward_b)


_register("transpose")


def transpose(x: Tensor) -> Tensor:
    if x.data.ndim != 2:
        raise DimensionError(f"transpose: expected 2-D tensor, got {x.shape}")
    out = np.ascontiguousarray(x.data.T)

    def backward(g):
        return (np.ascontiguousarray(g.T),)

    return _apply("transpose", out, (x,), backward)


# ---------------------------------------------------------------------------
# Elementwise
# ---------------------------------------------------------------------------

_register("add")


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_binary_shapes("add", a, b)
    out = a.data + b.data

    def backward(g):
        ga = _reduce_to(g, a.shape) if a.requires_grad else None
        gb = _reduce_to(g, b.shape) if b.requires_grad else None
        return ga, gb

    return _apply("add", out, (a, b), backward)


_register("sub")


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_binary_shapes("sub", a, b)
    out = a.data - b.data

    def backward(g):
        ga = _reduce_to(g, a.shape) if a.requires_grad else None
        gb = _reduce_to(-g, b.shape) if b.requires_grad else None
        return ga, gb

    return _apply("sub", out, (a, b), backward)


_register("mul")


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_binary_shapes("mul", a, b)
    out = a.data * b.data

    def backward(g):
        ga = _reduce_to(g * b.data, a.shape) if a.requires_grad else None
        gb = _reduce_to(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _apply("mul", out, (a, b), backward)


_register("neg")


def neg(a: Tensor) -> Tensor:
    a = _as_tensor(a)

    def backward(g):
        return (-g,)

    return _apply("neg", -a.data, (a,), backward)


_register("mul_scalar")


def mul_scalar(a: Tensor, s: float) -> Tensor:
    a = _as_tensor(a)
    s = float(s)

    def backward(g):
        return (g * s,)

    return _apply("mul_scalar", a.data * s, (a,), backward)


_register("tanh")


def tanh(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    out = np.tanh(a.data)

    def backward(g):
        return (g * (1.0 - out * out),)

    return _apply("tanh", out, (a,), backward)


_register("exp")


def exp(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    with np.errstate(over="ignore"):
        out = np.exp(a.data)

    def backward(g):
        return (g * out,)

    return _apply("exp", out, (a,), backward)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


_register("silu")


def silu(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    sig = _sigmoid(a.data)
    out = a.data * sig

    def backward(g):
        return (g * (sig * (1.0 + a.data * (1.0 - sig))),)

    return _apply("silu", out, (a,), backward)


_register("softplus")


def softplus(a: Tensor) -> Tensor:
    """log(1 + exp(x)), switching to the identity for x > 20 to avoid overflow."""
    a = _as_tensor(a)
    x = a.data
    out = np.where(x > _SOFTPLUS_CUTOFF, x, np.log1p(np.exp(np.minimum(x, _SOFTPLUS_CUTOFF))))

    def backward(g):
        return (g * _sigmoid(x),)

    return _apply("softplus", out, (a,), backward)


# ---------------------------------------------------------------------------
# Normalization and attention kernels
# ---------------------------------------------------------------------------

_register("softmax")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    x = _as_tensor(x)
    if not -x.data.ndim <= axis < x.data.ndim:
        raise DimensionError(f"softmax: axis {axis} invalid for shape {x.shape}")
    shifted = x.data - np.max(x.data, axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / np.sum(e, axis=axis, keepdims=True)

    def backward(g):
        dot = np.sum(g * out, axis=axis, keepdims=True)
        return ((g - dot) * out,)

    return _apply("softmax", out, (x,), backward)


_register("log_softmax")


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    x = _as_tensor(x)
    if not -x.data.ndim <= axis < x.data.ndim:
        raise DimensionError(f"log_softmax: axis {axis} invalid for shape {x.shape}")
    shifted = x.data - np.max(x.data, axis=axis, keepdims=True)
    lse = np.log(np.sum(np.exp(shifted), axis=axis, keepdims=True))
    out = shifted - lse

    def backward(g):
        return (g - np.exp(out) * np.sum(g, axis=axis, keepdims=True),)

    return _apply("log_softmax", out, (x,), backward)


_register("layer_norm")


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Standardize the last axis to zero mean / unit variance, then affine."""
    x, gain, bias = _as_tensor(x), _as_tensor(gain), _as_tensor(bias)
    d = x.shape[-1]
    if d < 1 or gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError(
            f"layer_norm: gain {gain.shape} / bias {bias.shape} do not match last axis of {x.shape}"
        )
    if eps <= 0:
        raise ContractError("layer_norm: eps must be positive")
    mu = np.mean(x.data, axis=-1, keepdims=True)
    xc = x.data - mu
    var = np.mean(xc * xc, axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def backward(g):
        lead = tuple(range(g.ndim - 1))
        ggain = np.sum(g * xhat, axis=lead) if gain.requires_grad else None
        gbias = np.sum(g, axis=lead) if bias.requires_grad else None
        gx = None
        if x.requires_grad:
            dxhat = g * gain.data
            gx = inv * (
                dxhat
                - np.mean(dxhat, axis=-1, keepdims=True)
                - xhat * np.mean(dxhat * xhat, axis=-1, keepdims=True)
            )
        return gx, ggain, gbias

    return _apply("layer_norm", out, (x, gain, bias), backward)


# ---------------------------------------------------------------------------
# Shape surgery
# ---------------------------------------------------------------------------

_register("slice_rows")


def slice_rows(x: Tensor, start: int, stop: int) -> Tensor:
    if x.data.ndim != 2 or not (0 <= start < stop <= x.shape[0]):
        raise DimensionError(f"slice_rows: [{start}:{stop}] invalid for shape {x.shape}")
    out = x.data[start:stop].copy()

    def backward(g):
        gx = np.zeros_like(x.data)
        gx[start:stop] = g
        return (gx,)

    return _apply("slice_rows", out, (x,), backward)


_register("slice_cols")


def slice_cols(x: Tensor, start: int, stop: int) -> Tensor:
    if x.data.ndim != 2 or not (0 <= start < stop <= x.shape[1]):
        raise DimensionError(f"slice_cols: [{start}:{stop}] invalid for shape {x.shape}")
    out = np.ascontiguousarray(x.data[:, start:stop])

    def backward(g):
        gx = np.zeros_like(x.data)
        gx[:, start:stop] = g
        return (gx,)

    return _apply("slice_cols", out, (x,), backward)


_register("concat_rows")


def concat_rows(parts: Sequence[Tensor]) -> Tensor:
    parts = tuple(_as_tensor(p) for p in parts)
    if not parts or any(p.data.ndim != 2 for p in parts):
        raise DimensionError("concat_rows: needs a non-empty sequence of 2-D tensors")
    widths = {p.shape[1] for p in parts}
    if len(widths) != 1:
        raise DimensionError(f"concat_rows: mixed column counts {sorted(widths)}")
    out = np.concatenate([p.data for p in parts], axis=0)
    sizes = [p.shape[0] for p in parts]

    def backward(g):
        grads, off = [], 0
        for p, n in zip(parts, sizes):
            grads.append(g[off : off + n] if p.requires_grad else None)
            off += n
        return tuple(grads)

    return _apply("concat_rows", out, parts, backward)


_register("concat_cols")


def concat_cols(parts: Sequence[Tensor]) -> Tensor:
    parts = tuple(_as_tensor(p) for p in parts)
    if not parts or any(p.data.ndim != 2 for p in parts):
        raise DimensionError("concat_cols: needs a non-empty sequence of 2-D tensors")
    heights = {p.shape[0] for p in parts}
    if len(heights) != 1:
        raise DimensionError(f"concat_cols: mixed row counts {sorted(heights)}")
    out = np.concatenate([p.data for p in parts], axis=1)
    sizes = [p.shape[1] for p in parts]

    def backward(g):
        grads, off = [], 0
        for p, n in zip(parts, sizes):
            grads.append(np.ascontiguousarray(g[:, off : off + n]) if p.requires_grad else None)
            off += n
        return tuple(grads)

    return _apply("concat_cols", out, parts, backward)


_register("add_cols")


def add_cols(y: Tensor, delta: Tensor, start: int) -> Tensor:
    """Add delta into columns [start, start+width) of y; other columns pass through."""
    y, delta = _as_tensor(y), _as_tensor(delta)
    if y.data.ndim != 2 or delta.data.ndim != 2 or y.shape[0] != delta.shape[0]:
        raise DimensionError(f"add_cols: {y.shape} vs {delta.shape}")
    stop = start + delta.shape[1]
    if not (0 <= start < stop <= y.shape[1]):
        raise DimensionError(f"add_cols: [{start}:{stop}] invalid for shape {y.shape}")
    out = y.data.copy()
    out[:, start:stop] += delta.data

    def backward(g):
        gy = g if y.requires_grad else None
        gd = np.ascontiguousarray(g[:, start:stop]) if delta.requires_grad else None
        return gy, gd

    return _apply("add_cols", out, (y, delta), backward)


_register("reverse_rows")


def reverse_rows(x: Tensor) -> Tensor:
    if x.data.ndim != 2:
        raise DimensionError(f"reverse_rows: expected 2-D tensor, got {x.shape}")
    out = np.ascontiguousarray(x.data[::-1])

    def backward(g):
        return (np.ascontiguousarray(g[::-1]),)

    return _apply("reverse_rows", out, (x,), backward)


_register("scale_rows")


def scale_rows(x: Tensor, s: Tensor) -> Tensor:
    """Multiply each row of x[n,d] by the per-row scalar s[n,1]."""
    x, s = _as_tensor(x), _as_tensor(s)
    if x.data.ndim != 2 or s.shape != (x.shape[0], 1):
        raise DimensionError(f"scale_rows: x {x.shape} needs s of shape ({x.shape[0]}, 1), got {s.shape}")
    out = x.data * s.data

    def backward(g):
        gx = g * s.data if x.requires_grad else None
        gs = np.sum(g * x.data, axis=1, keepdims=True) if s.requires_grad else None
        return gx, gs

    return _apply("scale_rows", out, (x, s), backward)


# ---------------------------------------------------------------------------
# Lookup / gather
# ---------------------------------------------------------------------------

_register("embedding")


def embedding(weight: Tensor, ids: np.ndarray) -> Tensor:
    """Gather rows of weight[v,d] by integer ids; backward scatter-adds."""
    ids = np.asarray(ids, dtype=np.int64)
    if weight.data.ndim != 2 or ids.ndim != 1:
        raise DimensionError(f"embedding: weight {weight.shape}, ids {ids.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= weight.shape[0]):
        raise ContractError(f"embedding: id out of range for vocabulary of {weight.shape[0]}")
    out = weight.data[ids].copy()

    def backward(g):
        gw = np.zeros_like(weight.data)
        np.add.at(gw, ids, g)
        return (gw,)

    return _apply("embedding", out, (weight,), backward)


_register("select_columns")


def select_columns(x: Tensor, ids: np.ndarray) -> Tensor:
    """out[i] = x[i, ids[i]]; used to pick target-token log-probabilities."""
    ids = np.asarray(ids, dtype=np.int64)
    if x.data.ndim != 2 or ids.shape != (x.shape[0],):
        raise DimensionError(f"select_columns: x {x.shape}, ids {ids.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= x.shape[1]):
        raise ContractError(f"select_columns: id out of range for {x.shape[1]} columns")
    rows = np.arange(x.shape[0])
    out = x.data[rows, ids].copy()

    def backward(g):
        gx = np.zeros_like(x.data)
        gx[rows, ids] = g
        return (gx,)

    return _apply("select_columns", out, (x,), backward)


# ---------------------------------------------------------------------------
# Sequence kernels
# ---------------------------------------------------------------------------

_register("causal_conv1d")


def causal_conv1d(x: Tensor, w: Tensor) -> Tensor:
    """Depthwise causal 1-D convolution over rows.

    x[L,C] with kernel w[C,k]; the input is left-padded with k-1 zeros so
    position t sees only positions <= t.
    """
    x, w = _as_tensor(x), _as_tensor(w)
    if x.data.ndim != 2 or w.data.ndim != 2 or x.shape[1] != w.shape[0]:
        raise DimensionError(f"causal_conv1d: x {x.shape} vs kernel {w.shape}")
    length, channels = x.shape
    k = w.shape[1]
    xp = np.zeros((length + k - 1, channels))
    xp[k - 1 :] = x.data
    out = np.zeros_like(x.data)
    for j in range(k):
        out += xp[j : j + length] * w.data[:, j]

    def backward(g):
        gx = None
        if x.requires_grad:
            gxp = np.zeros_like(xp)
            for j in range(k):
                gxp[j : j + length] += g * w.data[:, j]
            gx = gxp[k - 1 :].copy()
        gw = None
        if w.requires_grad:
            gw = np.empty_like(w.data)
            for j in range(k):
                gw[:, j] = np.sum(xp[j : j + length] * g, axis=0)
        return gx, gw

    return _apply("causal_conv1d", out, (x, w), backward)


_register("selective_scan")


def selective_scan(
    x: Tensor, dt: Tensor, a: Tensor, b: Tensor, c: Tensor, d_skip: Tensor
) -> Tensor:
    """Input-dependent state-space recurrence, evaluated left to right.

    Shapes: x, dt are [L, C]; a is [C, S]; b, c are [L, S]; d_skip is [C].
    For each channel/state pair, with h_0 = 0:

        h_t = exp(dt_tc * a_cs) * h_{t-1} + dt_tc * b_ts * x_tc
        y_tc = sum_s c_ts * h_tcs + d_c * x_tc

    The backward rule is the hand-derived adjoint recurrence (verified by
    grad_check); the naive per-timestep oracle lives in the test suite.
    """
    x, dt, a, b, c, d_skip = (_as_tensor(t) for t in (x, dt, a, b, c, d_skip))
    if x.data.ndim != 2 or x.shape != dt.shape:
        raise DimensionError(f"selective_scan: x {x.shape} vs dt {dt.shape}")
    length, channels = x.shape
    states = a.shape[1] if a.data.ndim == 2 else -1
    if a.shape != (channels, states) or b.shape != (length, states) or c.shape != (length, states):
        raise DimensionError(
            f"selective_scan: inconsistent shapes a {a.shape}, b {b.shape}, c {c.shape} "
            f"for x {x.shape}"
        )
    if d_skip.shape != (channels,):
        raise DimensionError(f"selective_scan: d_skip {d_skip.shape} != ({channels},)")
    if np.any(dt.data <= 0):
        raise ContractError("selective_scan: dt must be strictly positive")

    xs, dts, av, bv, cv, dv = x.data, dt.data, a.data, b.data, c.data, d_skip.data
    hs = np.zeros((length + 1, channels, states))
    out = np.empty_like(xs)
    for t in range(length):
        decay = np.exp(dts[t][:, None] * av)
        hs[t + 1] = decay * hs[t] + (dts[t] * xs[t])[:, None] * bv[t]
        out[t] = hs[t + 1] @ cv[t] + dv * xs[t]

    def backward(g):
        gx = np.zeros_like(xs)
        gdt = np.zeros_like(dts)
        ga = np.zeros_like(av)
        gb = np.zeros_like(bv)
        gc = np.zeros_like(cv)
        gd = np.zeros_like(dv)
        gh = np.zeros((channels, states))
        for t in range(length - 1, -1, -1):
            gh += g[t][:, None] * cv[t]
            gc[t] = g[t] @ hs[t + 1]
            gd += g[t] * xs[t]
            gx[t] += dv * g[t]
            decay = np.exp(dts[t][:, None] * av)
            ga_t = gh * hs[t]
            gdt[t] += np.sum(ga_t * av * decay, axis=1)
            ga += ga_t * dts[t][:, None] * decay
            ghb = gh @ bv[t]  # sum_s gh[c,s] * b[t,s]
            gdt[t] += ghb * xs[t]
            gx[t] += ghb * dts[t]
            gb[t] = (dts[t] * xs[t]) @ gh
            gh *= decay
        return (
            gx if x.requires_grad else None,
            gdt if dt.requires_grad else None,
            ga if a.requires_grad else None,
            gb if b.requires_grad else None,
            gc if c.requires_grad else None,
            gd if d_skip.requires_grad else None,
        )

    return _apply("selective_scan", out, (x, dt, a, b, c, d_skip), backward)


# ---------------------------------------------------------------------------
# Reductions
# ---------------------------------------------------------------------------

_register("sum_all")


def sum_all(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    out = np.array(np.sum(x.data))

    def backward(g):
        return (np.broadcast_to(g, x.shape).copy(),)

    return _apply("sum_all", out, (x,), backward)


_register("mean_all")


def mean_all(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    n = x.data.size
    out = np.array(np.mean(x.data))

    def backward(g):
        return (np.broadcast_to(g / n, x.shape).copy(),)

    return _apply("mean_all", out, (x,), backward)


# ---------------------------------------------------------------------------
# Finite-difference oracle
# ---------------------------------------------------------------------------


def grad_check(
    f: Callable[[], Tensor],
    params: Sequence[Tensor],
    eps: float = 1e-5,
    sample: int | None = None,
    seed: int = 0,
) -> float:
    """Compare analytic gradients of the scalar ``f()`` against central differences.

    Returns the maximum over checked coordinates of
    ``|analytic - numeric| / max(1, |analytic|)``. By default every
    coordinate of every param is checked; ``sample`` caps the number of
    coordinates per parameter (chosen by a seeded rng) for larger models.
    """
    params = list(params)
    for p in params:
        if not isinstance(p, Tensor) or not p.requires_grad:
            raise ContractError("grad_check: params must be requires_grad tensors")
        p.zero_grad()

    with Tape() as tape:
        out = f()
    if not isinstance(out, Tensor) or out.data.size != 1:
        raise ContractError("grad_check: f must return a scalar tensor")
    tape.backward(out)
    analytic = [p.grad.copy() if p.grad is not None else np.zeros_like(p.data) for p in params]
    for p in params:
        p.zero_grad()

    rng = np.random.default_rng(seed)
    worst = 0.0
    for p, an in zip(params, analytic):
        flat = p.data.reshape(-1)
        an_flat = an.reshape(-1)
        if sample is not None and flat.size > sample:
            coords = np.sort(rng.choice(flat.size, size=sample, replace=False))
        else:
            coords = range(flat.size)
        for i in coords:
            orig = flat[i]
            flat[i] = orig + eps
            f_plus = f().item()
            flat[i] = orig - eps
            f_minus = f().item()
            flat[i] = orig
            numeric = (f_plus - f_minus) / (2.0 * eps)
            rel = abs(an_flat[i] - numeric) / max(1.0, abs(an_flat[i]))
            if rel > worst:
                worst = rel
    return worst
