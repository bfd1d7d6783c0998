"""Dense float64 tensors with a tape-based reverse-mode gradient engine.

Operations executed inside an active :class:`GradientTape` are recorded when at
least one input is tracked (a non-frozen leaf with ``requires_grad`` or the
output of a recorded op). Outside a tape every op is a plain numpy forward pass.

    w = Tensor(np.ones((3, 2)), requires_grad=True)
    with GradientTape() as tape:
        loss = relu(x @ w).sum()
    grads = tape.backward(loss)      # {w: ndarray of shape (3, 2)}
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DegenerateInputError, ShapeError, UsageError

DTYPE = np.float64
L2_EPS = 1e-12

_local = threading.local()

# names under which ops are recorded on the tape
OPS = ("add", "sub", "mul", "div", "neg", "power", "exp", "log", "relu", "sum", "mean", "reshape",
       "transpose", "take", "concat", "matmul", "conv2d", "l2_normalize", "log_softmax", "softmax")

# op name -> multiplier applied to every gradient the op emits; empty in normal use
_GRAD_SCALE: dict[str, float] = {}


@contextlib.contextmanager
def perturbed_gradient(op: str, factor: float = 1.01):
    """Deliberately corrupt one op's gradient rule (mutation testing hook)."""
    if op not in OPS:
        raise UsageError(f"unknown op {op!r}; expected one of {', '.join(OPS)}")
    _GRAD_SCALE[op] = factor
    try:
        yield
    finally:
        _GRAD_SCALE.pop(op, None)


def _tape_stack() -> list:
    stack = getattr(_local, "tapes", None)
    if stack is None:
        stack = _local.tapes = []
    return stack


class Tensor:
    __slots__ = ("data", "requires_grad", "frozen", "name", "_op_output", "_tracked")
    __array_ufunc__ = None  # make numpy defer to the reflected operators below

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.ascontiguousarray(data, dtype=DTYPE)
        self.requires_grad = bool(requires_grad)
        self.frozen = False
        self.name = name
        self._op_output = False
        self._tracked = False

    @classmethod
    def _result(cls, data: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        t.data = data if data.dtype == DTYPE else data.astype(DTYPE)
        t.requires_grad = False
        t.frozen = False
        t.name = None
        t._op_output = True
        t._tracked = False
        return t

    @property
    def tracked(self) -> bool:
        if self._op_output:
            return self._tracked
        return self.requires_grad and not self.frozen

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def __len__(self) -> int:
        return len(self.data)

    def __repr__(self) -> str:
        flags = []
        if self.requires_grad:
            flags.append("requires_grad=True")
        if self.frozen:
            flags.append("frozen=True")
        extra = (", " + ", ".join(flags)) if flags else ""
        return f"Tensor(shape={self.shape}{extra})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise UsageError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def freeze(self) -> "Tensor":
        self.frozen = True
        return self

    def unfreeze(self) -> "Tensor":
        self.frozen = False
        return self

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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, index):
        return take(self, index)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    @property
    def T(self):
        return transpose(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class _Node:
    __slots__ = ("op", "out", "parents", "backward")

    def __init__(self, op, out, parents, backward):
        self.op = op
        self.out = out
        self.parents = parents
        self.backward = backward


class GradientTape:
    """Ordered record of executed operations.

    ``backward`` returns a dict mapping every ``requires_grad`` leaf that fed a
    recorded op to its gradient. Frozen leaves map to exact zeros.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self._leaves: dict[int, Tensor] = {}

    def __enter__(self) -> "GradientTape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()
        else:  # pragma: no cover - misuse
            stack.remove(self)

    def backward(self, loss: Tensor) -> dict[Tensor, np.ndarray]:
        if not isinstance(loss, Tensor) or loss.data.size != 1:
            shape = getattr(loss, "shape", None)
            raise UsageError(f"backward needs a scalar loss, got shape {shape}")
        acc: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for node in reversed(self.nodes):
            g = acc.pop(id(node.out), None)
            if g is None:
                continue
            needs = tuple(p.tracked for p in node.parents)
            parent_grads = node.backward(g, needs)
            scale = _GRAD_SCALE.get(node.op)
            for p, pg, need in zip(node.parents, parent_grads, needs):
                if not need or pg is None:
                    continue
                if scale is not None:
                    pg = pg * scale
                key = id(p)
                prev = acc.get(key)
                acc[key] = pg if prev is None else prev + pg
        out: dict[Tensor, np.ndarray] = {}
        for key, leaf in self._leaves.items():
            g = acc.get(key)
            if leaf.frozen or g is None:
                out[leaf] = np.zeros_like(leaf.data)
            else:
                out[leaf] = np.asarray(g, dtype=DTYPE).reshape(leaf.shape)
        return out


def backward(loss: Tensor, tape: GradientTape) -> dict[Tensor, np.ndarray]:
    return tape.backward(loss)


def _record(op: str, data: np.ndarray, parents: tuple[Tensor, ...], grad_fn) -> Tensor:
    out = Tensor._result(data)
    stack = _tape_stack()
    if not stack:
        return out
    tape = stack[-1]
    tracked = False
    for p in parents:
        if not p._op_output and p.requires_grad:
            tape._leaves[id(p)] = p
        if p.tracked:
            tracked = True
    if tracked:
        out._tracked = True
        out.requires_grad = True
        tape.nodes.append(_Node(op, out, parents, grad_fn))
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def grad_fn(g, needs):
        return (
            _unbroadcast(g, a.shape) if needs[0] else None,
            _unbroadcast(g, b.shape) if needs[1] else None,
        )

    return _record("add", a.data + b.data, (a, b), grad_fn)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def grad_fn(g, needs):
        return (
            _unbroadcast(g, a.shape) if needs[0] else None,
            _unbroadcast(-g, b.shape) if needs[1] else None,
        )

    return _record("sub", a.data - b.data, (a, b), grad_fn)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def grad_fn(g, needs):
        return (
            _unbroadcast(g * b.data, a.shape) if needs[0] else None,
            _unbroadcast(g * a.data, b.shape) if needs[1] else None,
        )

    return _record("mul", a.data * b.data, (a, b), grad_fn)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data

    def grad_fn(g, needs):
        return (
            _unbroadcast(g / b.data, a.shape) if needs[0] else None,
            _unbroadcast(-g * out / b.data, b.shape) if needs[1] else None,
        )

    return _record("div", out, (a, b), grad_fn)


def neg(x) -> Tensor:
    x = as_tensor(x)
    return _record("neg", -x.data, (x,), lambda g, needs: (-g,))


def power(x, exponent: float) -> Tensor:
    """``x ** exponent`` for a constant real exponent.

    Where the derivative is undefined (``x == 0`` with ``exponent < 1``) the
    gradient is taken as 0.
    """
    x = as_tensor(x)
    p = float(exponent)
    out = np.power(x.data, p)

    def grad_fn(g, needs):
        with np.errstate(divide="ignore", invalid="ignore"):
            d = p * np.power(x.data, p - 1.0)
        d = np.where(np.isfinite(d), d, 0.0)
        return (g * d,)

    return _record("power", out, (x,), grad_fn)


def exp(x) -> Tensor:
    x = as_tensor(x)
    out = np.exp(x.data)
    return _record("exp", out, (x,), lambda g, needs: (g * out,))


def log(x) -> Tensor:
    x = as_tensor(x)
    return _record("log", np.log(x.data), (x,), lambda g, needs: (g / x.data,))


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    return _record("relu", np.where(mask, x.data, 0.0), (x,), lambda g, needs: (g * mask,))


# ----------------------------------------------------------------- reductions


def _normalize_axis(axis, ndim: int):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def tsum(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    axes = _normalize_axis(axis, x.ndim)
    out = x.data.sum(axis=axes, keepdims=keepdims)

    def grad_fn(g, needs):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, x.shape),)

    return _record("sum", np.asarray(out), (x,), grad_fn)


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    axes = _normalize_axis(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    out = x.data.sum(axis=axes, keepdims=keepdims) / count

    def grad_fn(g, needs):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, x.shape),)

    return _record("mean", np.asarray(out), (x,), grad_fn)


# ------------------------------------------------------------------ structure


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    out = x.data.reshape(shape)
    return _record("reshape", out, (x,), lambda g, needs: (g.reshape(x.shape),))


def transpose(x, axes: Sequence[int] | None = None) -> Tensor:
    x = as_tensor(x)
    out = np.transpose(x.data, axes)
    inverse = None if axes is None else np.argsort(axes)
    return _record("transpose", out, (x,), lambda g, needs: (np.transpose(g, inverse),))


def take(x, index) -> Tensor:
    """Numpy-style indexing; repeated indices accumulate in the gradient."""
    x = as_tensor(x)
    out = np.array(x.data[index], dtype=DTYPE)

    def grad_fn(g, needs):
        z = np.zeros_like(x.data)
        np.add.at(z, index, g)
        return (z,)

    return _record("take", out, (x,), grad_fn)


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    """Concatenate along ``axis``; all inputs must share rank."""
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise ShapeError("concat needs at least one tensor")
    ranks = {t.ndim for t in ts}
    if len(ranks) != 1:
        raise ShapeError(f"concat rank mismatch: shapes {[t.shape for t in ts]}")
    ndim = ts[0].ndim
    if ndim == 0:
        raise ShapeError("concat needs rank >= 1 tensors")
    ax = axis % ndim
    try:
        out = np.concatenate([t.data for t in ts], axis=ax)
    except ValueError as exc:
        raise ShapeError(f"concat shape mismatch: shapes {[t.shape for t in ts]}") from exc
    cuts = np.cumsum([t.shape[ax] for t in ts])[:-1]

    def grad_fn(g, needs):
        return tuple(np.split(g, cuts, axis=ax))

    return _record("concat", out, tuple(ts), grad_fn)


# ------------------------------------------------------------- linear algebra


def matmul(a, b) -> Tensor:
    """Matrix product for rank-1/rank-2 operands."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim not in (1, 2) or b.ndim not in (1, 2):
        raise ShapeError(f"matmul supports rank 1-2 operands, got {a.shape} and {b.shape}")
    a2 = a.data.reshape(1, -1) if a.ndim == 1 else a.data
    b2 = b.data.reshape(-1, 1) if b.ndim == 1 else b.data
    if a2.shape[1] != b2.shape[0]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} and {b.shape}")
    out2 = a2 @ b2
    out_shape = out2.shape
    if a.ndim == 1:
        out_shape = out_shape[1:]
    if b.ndim == 1:
        out_shape = out_shape[:-1]

    def grad_fn(g, needs):
        g2 = g.reshape(out2.shape)
        ga = (g2 @ b2.T).reshape(a.shape) if needs[0] else None
        gb = (a2.T @ g2).reshape(b.shape) if needs[1] else None
        return ga, gb

    return _record("matmul", out2.reshape(out_shape), (a, b), grad_fn)


def linear(x, weight, bias=None) -> Tensor:
    """Dense layer ``x @ weight + bias`` with weight of shape (in, out)."""
    y = matmul(x, weight)
    return y if bias is None else add(y, bias)


def conv2d(x, kernels, bias=None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation with zero padding.

    ``x`` is (C, H, W) or batched (N, C, H, W); ``kernels`` is (C_out, C_in, kh, kw).
    """
    x, w = as_tensor(x), as_tensor(kernels)
    b = None if bias is None else as_tensor(bias)
    if int(stride) != stride or stride < 1:
        raise UsageError(f"stride must be a positive int, got {stride}")
    if int(padding) != padding or padding < 0:
        raise UsageError(f"padding must be a non-negative int, got {padding}")
    stride, padding = int(stride), int(padding)
    single = x.ndim == 3
    if x.ndim not in (3, 4) or w.ndim != 4:
        raise ShapeError(f"conv2d expects input (C,H,W)/(N,C,H,W) and kernels (O,C,kh,kw), got {x.shape} and {w.shape}")
    xd = x.data[None] if single else x.data
    n, c, h, wd = xd.shape
    o, ci, kh, kw = w.shape
    if ci != c:
        raise ShapeError(f"conv2d channel mismatch: input {x.shape}, kernels {w.shape}")
    hp, wp = h + 2 * padding, wd + 2 * padding
    if kh > hp or kw > wp:
        raise ShapeError(f"kernel {w.shape} larger than padded input {(c, hp, wp)}")
    if b is not None and b.shape != (o,):
        raise ShapeError(f"conv2d bias must have shape ({o},), got {b.shape}")
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else xd
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)
    wm = w.data.reshape(o, -1)
    out = (cols @ wm.T).reshape(n, ho, wo, o).transpose(0, 3, 1, 2)
    if b is not None:
        out = out + b.data[None, :, None, None]
    out = np.ascontiguousarray(out)
    if single:
        out = out[0]

    def grad_fn(g, needs):
        g4 = g[None] if single else g
        gm = g4.transpose(0, 2, 3, 1).reshape(n * ho * wo, o)
        gx = gw = gb = None
        if needs[0]:
            dcols = (gm @ wm).reshape(n, ho, wo, c, kh, kw)
            dxp = np.zeros((n, c, hp, wp))
            hs, ws = stride * (ho - 1) + 1, stride * (wo - 1) + 1
            for i in range(kh):
                for j in range(kw):
                    dxp[:, :, i:i + hs:stride, j:j + ws:stride] += dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            gx = dxp[:, :, padding:padding + h, padding:padding + wd]
            if single:
                gx = gx[0]
        if needs[1]:
            gw = (gm.T @ cols).reshape(w.shape)
        if b is not None and needs[2]:
            gb = g4.sum(axis=(0, 2, 3))
        return (gx, gw, gb) if b is not None else (gx, gw)

    parents = (x, w, b) if b is not None else (x, w)
    return _record("conv2d", out, parents, grad_fn)


# ------------------------------------------------------------- normalization


def l2_normalize(x, axis: int = -1, eps: float = L2_EPS) -> Tensor:
    """Scale ``x`` to unit Euclidean norm along ``axis``.

    Raises DegenerateInputError when any norm is below ``eps``; there is no clamping.
    """
    x = as_tensor(x)
    if x.ndim == 0:
        raise ShapeError("l2_normalize needs rank >= 1")
    norm = np.sqrt(np.sum(x.data * x.data, axis=axis, keepdims=True))
    if np.any(norm < eps):
        raise DegenerateInputError(f"cannot normalize vector with norm {float(norm.min()):.3e} < {eps:g}")
    y = x.data / norm

    def grad_fn(g, needs):
        return ((g - y * np.sum(g * y, axis=axis, keepdims=True)) / norm,)

    return _record("l2_normalize", y, (x,), grad_fn)


def log_softmax(x, axis: int = -1, mask: np.ndarray | None = None) -> Tensor:
    """Numerically stable ``x - logsumexp(x)`` along ``axis``.

    ``mask`` (boolean, broadcastable to ``x``) selects the entries that take part
    in the normalization. Excluded entries output 0 and receive zero gradient.
    """
    x = as_tensor(x)
    if x.ndim == 0 or x.shape[axis] < 1:
        raise ShapeError(f"log_softmax needs a non-empty axis, got shape {x.shape}")
    if mask is None:
        m = np.max(x.data, axis=axis, keepdims=True)
        shifted = x.data - m
        lse = np.log(np.sum(np.exp(shifted), axis=axis, keepdims=True))
        out = shifted - lse

        def grad_fn(g, needs):
            return (g - np.exp(out) * np.sum(g, axis=axis, keepdims=True),)

        return _record("log_softmax", out, (x,), grad_fn)

    mask = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
    if not np.all(np.any(mask, axis=axis)):
        raise DegenerateInputError("log_softmax mask leaves an empty slice")
    m = np.max(np.where(mask, x.data, -np.inf), axis=axis, keepdims=True)
    shifted = np.where(mask, x.data - m, 0.0)
    e = np.where(mask, np.exp(shifted), 0.0)
    lse = np.log(np.sum(e, axis=axis, keepdims=True))
    out = np.where(mask, shifted - lse, 0.0)
    p = np.where(mask, np.exp(out), 0.0)

    def grad_fn_masked(g, needs):
        gm = np.where(mask, g, 0.0)
        return (np.where(mask, gm - p * np.sum(gm, axis=axis, keepdims=True), 0.0),)

    return _record("log_softmax", out, (x,), grad_fn_masked)


def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    m = np.max(x.data, axis=axis, keepdims=True)
    e = np.exp(x.data - m)
    p = e / np.sum(e, axis=axis, keepdims=True)

    def grad_fn(g, needs):
        return (p * (g - np.sum(g * p, axis=axis, keepdims=True)),)

    return _record("softmax", p, (x,), grad_fn)


# ---------------------------------------------------------------- gradcheck


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> float:
    """``||a - n|| / max(||a||, ||n||, floor)``."""
    a = np.asarray(analytic, dtype=DTYPE).ravel()
    n = np.asarray(numeric, dtype=DTYPE).ravel()
    diff = float(np.linalg.norm(a - n))
    denom = max(float(np.linalg.norm(a)), float(np.linalg.norm(n)), floor)
    return diff / denom


def numeric_gradient(fn: Callable[[], Tensor], t: Tensor, indices: Iterable[int], h: float = 1e-6) -> np.ndarray:
    """Central differences of scalar ``fn()`` w.r.t. selected flat entries of ``t``."""
    flat = t.data.reshape(-1)
    if not np.shares_memory(flat, t.data):  # pragma: no cover - data is contiguous
        raise UsageError("tensor data must be contiguous for finite differences")
    out = []
    for k in indices:
        orig = flat[k]
        flat[k] = orig + h
        fp = fn().item()
        flat[k] = orig - h
        fm = fn().item()
        flat[k] = orig
        out.append((fp - fm) / (2.0 * h))
    return np.array(out, dtype=DTYPE)


def gradcheck(
    fn: Callable[[], Tensor],
    inputs: Sequence[Tensor],
    *,
    h: float = 1e-6,
    max_coords: int | None = None,
    seed: int = 0,
) -> list[float]:
    """Compare tape gradients with central differences.

    Returns the relative error for each tensor in ``inputs``. With
    ``max_coords`` only a random subset of entries per tensor is perturbed.
    """
    with GradientTape() as tape:
        loss = fn()
    grads = tape.backward(loss)
    rng = np.random.default_rng(seed)
    errors = []
    for t in inputs:
        analytic = grads.get(t)
        if analytic is None:
            analytic = np.zeros_like(t.data)
        if max_coords is None or t.size <= max_coords:
            idx = np.arange(t.size)
        else:
            idx = np.sort(rng.choice(t.size, size=max_coords, replace=False))
        numeric = numeric_gradient(fn, t, idx, h=h)
        errors.append(relative_error(analytic.reshape(-1)[idx], numeric))
    return errors
