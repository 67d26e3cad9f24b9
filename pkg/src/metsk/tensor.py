"""Dense float64 tensors with reverse-mode automatic differentiation.

The kernel set is exactly what the graph model needs: matrix multiply,
elementwise add/subtract/multiply (with broadcasting), ReLU, 1-D
convolution along the time axis, sum/mean reductions, softmax, exp, log,
L2 norm, cosine similarity, concatenation, slicing, and reshape as a
layout helper.  Anything outside that set raises
UnsupportedOperationError so a loss closure cannot silently step off the
differentiable path.

Gradients are computed by recording every primitive onto a GradTape and
replaying the tape in reverse.  Recording is eager: evaluating a loss
under an active tape is all it takes.  Tensors are immutable once built
(the backing numpy buffer is marked read-only), so sharing them across
threads is safe; a tape belongs to the thread that created it.
"""

from __future__ import annotations

import threading
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np


class UnsupportedOperationError(ValueError):
    """A primitive outside the supported kernel set was requested."""


class NonFiniteError(FloatingPointError):
    """An operation produced or received NaN/Inf values."""


_TAPES = threading.local()


def _tape_stack() -> list:
    stack = getattr(_TAPES, "stack", None)
    if stack is None:
        stack = []
        _TAPES.stack = stack
    return stack


def _active_tape():
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    """Immutable dense array of float64 values, optionally differentiable."""

    __slots__ = ("data", "requires_grad")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64, order="C")
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError("tensor construction: non-finite values")
        arr.setflags(write=False)
        self.data = arr
        self.requires_grad = bool(requires_grad)

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def detached(self) -> "Tensor":
        """Same values, no gradient tracking (shares the buffer)."""
        t = Tensor.__new__(Tensor)
        t.data = self.data
        t.requires_grad = False
        return t

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # arithmetic -----------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __truediv__(self, other):
        raise UnsupportedOperationError("divide: not in the supported kernel set")

    def __rtruediv__(self, other):
        raise UnsupportedOperationError("divide: not in the supported kernel set")

    def __pow__(self, other):
        raise UnsupportedOperationError("power: not in the supported kernel set")

    def __getitem__(self, index):
        return take(self, index)

    # kernel methods -------------------------------------------------------
    def relu(self):
        return relu(self)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def sum(self, axis=None):
        return reduce_sum(self, axis)

    def mean(self, axis=None):
        return reduce_mean(self, axis)

    def softmax(self, axis=-1):
        return softmax(self, axis)

    def norm(self):
        return norm(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


class GradTape:
    """Ordered record of primitive operations for one reverse sweep.

    Each record stores the output tensor, its inputs, and a closure that
    maps the output adjoint to per-input adjoints.  Replaying in reverse
    yields exactly one gradient per requested leaf, zero-filled for
    leaves the loss never touched.
    """

    def __init__(self):
        self._records: list = []
        self._owner = threading.get_ident()

    def __enter__(self) -> "GradTape":
        if threading.get_ident() != self._owner:
            raise RuntimeError("GradTape used from a different thread")
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        _tape_stack().pop()
        return False

    def _record(self, out: Tensor, inputs: Sequence[Tensor], backward: Callable):
        if threading.get_ident() != self._owner:
            raise RuntimeError("GradTape used from a different thread")
        self._records.append((out, tuple(inputs), backward))

    def gradients(self, loss: Tensor, leaves: Sequence[Tensor]) -> list:
        """Adjoints of `loss` with respect to `leaves`, as ndarrays."""
        if loss.shape != ():
            raise ValueError(f"loss must be scalar, got shape {loss.shape}")
        adjoint: dict = {id(loss): np.ones((), dtype=np.float64)}
        for out, inputs, backward in reversed(self._records):
            g_out = adjoint.get(id(out))
            if g_out is None:
                continue
            for tensor, g_in in zip(inputs, backward(g_out)):
                if g_in is None or not tensor.requires_grad:
                    continue
                prev = adjoint.get(id(tensor))
                adjoint[id(tensor)] = g_in if prev is None else prev + g_in
        return [
            adjoint.get(id(leaf), np.zeros(leaf.shape, dtype=np.float64))
            for leaf in leaves
        ]


# ---------------------------------------------------------------------------
# primitive machinery


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if isinstance(x, (int, float, np.floating, np.integer)):
        return Tensor(np.float64(x))
    raise TypeError(f"expected Tensor or scalar, got {type(x).__name__}")


def _contiguous(arr) -> np.ndarray:
    # np.ascontiguousarray promotes 0-d to 1-d, so use np.array with order="C"
    arr = np.asarray(arr, dtype=np.float64)
    if not arr.flags.c_contiguous:
        arr = np.array(arr, order="C")
    return arr


def _emit(op: str, arr: np.ndarray, inputs: Sequence[Tensor], backward: Callable) -> Tensor:
    arr = _contiguous(arr)
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"{op}: non-finite result")
    out = Tensor.__new__(Tensor)
    arr.setflags(write=False)
    out.data = arr
    out.requires_grad = any(t.requires_grad for t in inputs)
    tape = _active_tape()
    if tape is not None and out.requires_grad:
        tape._record(out, inputs, backward)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a broadcast gradient back to the operand's shape."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise kernels


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data + b.data

    def backward(g):
        return (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape))

    return _emit("add", out, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data - b.data

    def backward(g):
        return (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape))

    return _emit("sub", out, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data * b.data

    def backward(g):
        return (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape))

    return _emit("mul", out, (a, b), backward)


def relu(x) -> Tensor:
    x = _as_tensor(x)
    mask = x.data > 0.0  # derivative at exactly 0 is defined as 0

    def backward(g):
        return (g * mask,)

    return _emit("relu", np.where(mask, x.data, 0.0), (x,), backward)


def exp(x) -> Tensor:
    x = _as_tensor(x)
    out = np.exp(x.data)

    def backward(g):
        return (g * out,)

    return _emit("exp", out, (x,), backward)


def log(x) -> Tensor:
    x = _as_tensor(x)
    if np.any(x.data <= 0.0):
        raise NonFiniteError("log: non-positive input")
    out = np.log(x.data)

    def backward(g):
        return (g / x.data,)

    return _emit("log", out, (x,), backward)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError(f"matmul expects 2-D operands, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def backward(g):
        return (g @ b.data.T, a.data.T @ g)

    return _emit("matmul", out, (a, b), backward)


def conv1d_time(x, kernel) -> Tensor:
    """1-D convolution along the middle (time) axis with same-length zero padding.

    x: (P, L, C_in) node-major features; kernel: (C_in, C_out, K), K odd.
    """
    x, kernel = _as_tensor(x), _as_tensor(kernel)
    if x.ndim != 3 or kernel.ndim != 3:
        raise ValueError(f"conv1d_time expects 3-D x and kernel, got {x.shape}, {kernel.shape}")
    P, L, C = x.shape
    Ck, D, K = kernel.shape
    if Ck != C:
        raise ValueError(f"conv1d_time channel mismatch: x has {C}, kernel expects {Ck}")
    if K % 2 != 1:
        raise ValueError(f"conv1d_time kernel width must be odd, got {K}")
    pad = K // 2
    xp = np.zeros((P, L + K - 1, C), dtype=np.float64)
    xp[:, pad : pad + L, :] = x.data
    # cols[p, l, c, k] = xp[p, l + k, c]
    cols = np.stack([xp[:, k : k + L, :] for k in range(K)], axis=3)
    out = np.einsum("plck,cdk->pld", cols, kernel.data)

    def backward(g):
        g_kernel = np.einsum("plck,pld->cdk", cols, g)
        g_xp = np.zeros_like(xp)
        for k in range(K):
            g_xp[:, k : k + L, :] += g @ kernel.data[:, :, k].T
        return (g_xp[:, pad : pad + L, :], g_kernel)

    return _emit("conv1d_time", out, (x, kernel), backward)


# ---------------------------------------------------------------------------
# reductions and shape


def _norm_axis(axis, ndim):
    if axis is None:
        return None
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def reduce_sum(x, axis=None) -> Tensor:
    x = _as_tensor(x)
    axis = _norm_axis(axis, x.ndim)
    out = x.data.sum(axis=axis)

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g, x.shape).copy(),)
        shaped = g
        for a in sorted(axis):
            shaped = np.expand_dims(shaped, a)
        return (np.broadcast_to(shaped, x.shape).copy(),)

    return _emit("sum", out, (x,), backward)


def reduce_mean(x, axis=None) -> Tensor:
    x = _as_tensor(x)
    axis = _norm_axis(axis, x.ndim)
    if axis is None:
        count = x.data.size
    else:
        count = int(np.prod([x.shape[a] for a in axis]))
    out = x.data.mean(axis=axis)

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g / count, x.shape).copy(),)
        shaped = g
        for a in sorted(axis):
            shaped = np.expand_dims(shaped, a)
        return (np.broadcast_to(shaped / count, x.shape).copy(),)

    return _emit("mean", out, (x,), backward)


def softmax(x, axis=-1) -> Tensor:
    x = _as_tensor(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        inner = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - inner),)

    return _emit("softmax", out, (x,), backward)


def norm(x) -> Tensor:
    """L2 norm over all elements; rejects the zero tensor (kink)."""
    x = _as_tensor(x)
    value = float(np.sqrt((x.data * x.data).sum()))
    if value == 0.0:
        raise ValueError("norm: zero tensor has no defined gradient")

    def backward(g):
        return (g * (x.data / value),)

    return _emit("norm", np.float64(value), (x,), backward)


def cosine_sim(u, v) -> Tensor:
    """Cosine similarity of two 1-D vectors."""
    u, v = _as_tensor(u), _as_tensor(v)
    if u.ndim != 1 or v.ndim != 1 or u.shape != v.shape:
        raise ValueError(f"cosine_sim expects matching 1-D vectors, got {u.shape}, {v.shape}")
    nu = float(np.sqrt(u.data @ u.data))
    nv = float(np.sqrt(v.data @ v.data))
    if nu == 0.0 or nv == 0.0:
        raise ValueError("cosine_sim: zero-norm input")
    s = float(u.data @ v.data) / (nu * nv)

    def backward(g):
        gu = g * (v.data / (nu * nv) - s * u.data / (nu * nu))
        gv = g * (u.data / (nu * nv) - s * v.data / (nv * nv))
        return (gu, gv)

    return _emit("cosine_sim", np.float64(s), (u, v), backward)


def concat(tensors: Iterable, axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    if not tensors:
        raise ValueError("concat: empty input")
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis % t.ndim] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        ax = axis % g.ndim
        slicer = [slice(None)] * g.ndim
        parts = []
        for i in range(len(tensors)):
            slicer[ax] = slice(int(offsets[i]), int(offsets[i + 1]))
            parts.append(g[tuple(slicer)])
        return tuple(parts)

    return _emit("concat", out, tuple(tensors), backward)


def take(x, index) -> Tensor:
    """Basic slicing/indexing; fancy or boolean indexing is unsupported."""
    x = _as_tensor(x)
    parts = index if isinstance(index, tuple) else (index,)
    for p in parts:
        if not isinstance(p, (int, np.integer, slice)):
            raise UnsupportedOperationError("fancy indexing: not in the supported kernel set")
    out = x.data[index]

    def backward(g):
        gx = np.zeros(x.shape, dtype=np.float64)
        gx[index] = g
        return (gx,)

    return _emit("slice", np.array(out, dtype=np.float64), (x,), backward)


def reshape(x, shape) -> Tensor:
    x = _as_tensor(x)
    shape = tuple(int(s) for s in shape)
    out = x.data.reshape(shape)

    def backward(g):
        return (g.reshape(x.shape),)

    return _emit("reshape", out, (x,), backward)


# ---------------------------------------------------------------------------
# gradient entry points


def value_and_grad(loss_fn: Callable, params: Mapping[str, Tensor]):
    """Evaluate loss_fn(params) under a fresh tape; return (loss value, grads)."""
    for name, p in params.items():
        if not isinstance(p, Tensor):
            raise TypeError(f"parameter '{name}' is not a Tensor")
        if not p.requires_grad:
            raise ValueError(f"parameter '{name}' must have requires_grad=True")
    with GradTape() as tape:
        loss = loss_fn(params)
    if not isinstance(loss, Tensor):
        raise TypeError("loss_fn must return a Tensor")
    if loss.shape != ():
        raise ValueError(f"loss must be scalar, got shape {loss.shape}")
    names = list(params)
    raw = tape.gradients(loss, [params[n] for n in names])
    grads = {}
    for name, g in zip(names, raw):
        t = Tensor.__new__(Tensor)
        arr = _contiguous(g)
        arr.setflags(write=False)
        t.data = arr
        t.requires_grad = False
        grads[name] = t
    return loss.item(), grads


def grad(loss_fn: Callable, params: Mapping[str, Tensor]) -> dict:
    """Reverse-mode gradients of a scalar loss, one per parameter.

    Parameters are never modified; the returned tensors are shape-matched
    to their parameters, zero for parameters the loss does not touch.
    """
    _, grads = value_and_grad(loss_fn, params)
    return grads


def finite_diff_check(
    loss_fn: Callable,
    params: Mapping[str, Tensor],
    eps: float = 1e-5,
    kink_tol: float = 1e-2,
    return_report: bool = False,
):
    """Max relative error between analytic and central-difference gradients.

    Error per element is |analytic - central| / max(1, |analytic|).
    Elements where the one-sided slopes disagree by more than kink_tol
    (relative) sit on a non-differentiable point (e.g. ReLU probed at 0)
    and are skipped; they are listed in the optional report.
    """
    if not (1e-7 <= eps <= 1e-3):
        raise ValueError(f"eps must lie in [1e-7, 1e-3], got {eps}")
    loss0, analytic = value_and_grad(loss_fn, params)

    def eval_at(name, flat_index, value) -> float:
        probe = dict(params)
        base = params[name].data.copy()
        base.reshape(-1)[flat_index] = value
        probe[name] = Tensor(base, requires_grad=True)
        with GradTape():
            out = loss_fn(probe)
        val = out.item()
        if not np.isfinite(val):
            raise NonFiniteError(f"finite_diff_check: non-finite loss at perturbed '{name}'")
        return val

    max_err = 0.0
    checked = 0
    skipped = []
    for name, p in params.items():
        flat_analytic = analytic[name].data.reshape(-1)
        flat_base = p.data.reshape(-1)
        for i in range(flat_base.size):
            lp = eval_at(name, i, flat_base[i] + eps)
            lm = eval_at(name, i, flat_base[i] - eps)
            fd_plus = (lp - loss0) / eps
            fd_minus = (loss0 - lm) / eps
            if abs(fd_plus - fd_minus) > kink_tol * max(1.0, abs(fd_plus), abs(fd_minus)):
                skipped.append((name, i))
                continue
            fd = (lp - lm) / (2.0 * eps)
            a = flat_analytic[i]
            err = abs(a - fd) / max(1.0, abs(a))
            if err > max_err:
                max_err = err
            checked += 1
    if return_report:
        return max_err, checked, skipped
    return max_err
