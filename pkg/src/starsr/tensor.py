"""Dense tensors with taped reverse-mode differentiation.

Two dtypes only: float32 for training, float64 for verification; every op
runs identically on both. There is no broadcasting beyond scalar-with-tensor.
The few row/channel-wise alignment patterns the models need are dedicated
ops (add_rowvec, mul_chan, ...) so that shape agreement is always explicit.

Gradients are recorded on a Tape. Ops only record when a tape is active and
an input is tracked, so inference runs without graph overhead.
"""

from __future__ import annotations

import threading
from typing import Callable, Iterable, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ShapeError(ValueError):
    """Operand shapes violate an op contract."""


class DivisionByZeroError(ValueError):
    """Division with a zero element in the divisor."""


F32 = np.float32
F64 = np.float64
_ALLOWED = (np.dtype(F32), np.dtype(F64))


class Tensor:
    """n-d numeric array with an optional gradient slot.

    `data` is always C-contiguous float32 or float64. `grad`, when present
    after a backward pass, has the same shape and dtype as `data`.
    """

    __slots__ = ("data", "requires_grad", "grad", "_src_tape", "_retain")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in _ALLOWED:
            arr = arr.astype(F32 if dtype is None else dtype)
        self.data = np.ascontiguousarray(arr)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self._src_tape: Optional["Tape"] = None
        self._retain = False

    # -- introspection ----------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy(), requires_grad=False)

    def retain_grad(self) -> "Tensor":
        """Keep this intermediate's gradient in `.grad` during backward."""
        self._retain = True
        return self

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name}{flag})"

    # -- operator sugar ---------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_const(other, self), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])

    def transpose(self, *axes):
        return transpose(self, axes if len(axes) > 1 else axes[0])


def parameter(data, dtype=F32) -> Tensor:
    return Tensor(data, requires_grad=True, dtype=dtype)


def zeros(shape, dtype=F32) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype))


def ones(shape, dtype=F32) -> Tensor:
    return Tensor(np.ones(shape, dtype=dtype))


# -- tape ------------------------------------------------------------------

class _Record:
    __slots__ = ("out", "parents", "bwd")

    def __init__(self, out, parents, bwd):
        self.out = out
        self.parents = parents
        self.bwd = bwd


_tls = threading.local()


def _tape_stack() -> list:
    stack = getattr(_tls, "stack", None)
    if stack is None:
        stack = []
        _tls.stack = stack
    return stack


def active_tape() -> Optional["Tape"]:
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tape:
    """Ordered record of executed ops; backward walks it exactly once in reverse."""

    def __init__(self):
        self._records: list[_Record] = []
        self._consumed = False

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc):
        _tape_stack().pop()
        return False

    def __len__(self) -> int:
        return len(self._records)

    def backward(self, root: Tensor) -> None:
        """Accumulate d(root)/d(leaf) into every tracked leaf's `.grad`.

        `root` must be scalar. The tape is consumed: records are released as
        the reverse sweep passes them.
        """
        if self._consumed:
            raise RuntimeError("tape already consumed by a previous backward()")
        if root.data.size != 1:
            raise ShapeError(f"backward root must be scalar, got shape {root.shape}")
        self._consumed = True
        grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
        for rec in reversed(self._records):
            g = grads.pop(id(rec.out), None)
            if g is None:
                rec.out = rec.parents = rec.bwd = None
                continue
            if rec.out._retain:
                rec.out.grad = g.copy()
            for parent, pg in zip(rec.parents, rec.bwd(g)):
                if pg is None:
                    continue
                if parent._src_tape is self:
                    acc = grads.get(id(parent))
                    if acc is None:
                        grads[id(parent)] = np.ascontiguousarray(pg)
                    else:
                        acc += pg
                elif parent.requires_grad:
                    if parent.grad is None:
                        parent.grad = np.zeros_like(parent.data)
                    parent.grad += pg
            rec.out = rec.parents = rec.bwd = None
        self._records.clear()


def _tracked(t: Tensor) -> bool:
    tape = active_tape()
    return t.requires_grad or (tape is not None and t._src_tape is tape)


def wrap_op(out_data: np.ndarray, parents: Sequence[Tensor],
            bwd: Callable[[np.ndarray], Iterable[Optional[np.ndarray]]]) -> Tensor:
    """Wrap a computed result as an op output, recording `bwd` on the tape.

    `bwd(g)` receives the output gradient and returns one gradient (or None)
    per parent, each matching that parent's shape. This is the extension
    point other modules use to define their own primitives.
    """
    out = Tensor(out_data)
    tape = active_tape()
    if tape is not None and any(_tracked(p) for p in parents):
        out._src_tape = tape
        tape._records.append(_Record(out, tuple(parents), bwd))
    return out


# -- helpers ----------------------------------------------------------------

def _as_const(x, like: Tensor) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=like.dtype))


def _binary_shapes(a: Tensor, b, opname: str):
    """Resolve tensor/scalar operand pair; only equal shapes or scalar allowed."""
    if not isinstance(b, Tensor):
        return a, float(b), True
    if b.data.size == 1 and a.data.size != 1:
        return a, float(b.data.reshape(())), True
    if a.data.size == 1 and b.data.size != 1:
        raise ShapeError(f"{opname}: scalar-first form not supported; "
                         f"shapes {a.shape} vs {b.shape}")
    if a.shape != b.shape:
        raise ShapeError(f"{opname}: shape mismatch {a.shape} vs {b.shape}")
    if a.dtype != b.dtype:
        raise ShapeError(f"{opname}: dtype mismatch {a.dtype} vs {b.dtype}")
    return a, b, False


# -- elementwise -------------------------------------------------------------

def add(a: Tensor, b) -> Tensor:
    a, b, scalar = _binary_shapes(a, b, "add")
    if scalar:
        return wrap_op(a.data + a.dtype.type(b), [a], lambda g: (g,))
    return wrap_op(a.data + b.data, [a, b], lambda g: (g, g))


def sub(a: Tensor, b) -> Tensor:
    a, b, scalar = _binary_shapes(a, b, "sub")
    if scalar:
        return wrap_op(a.data - a.dtype.type(b), [a], lambda g: (g,))
    return wrap_op(a.data - b.data, [a, b], lambda g: (g, -g))


def mul(a: Tensor, b) -> Tensor:
    a, b, scalar = _binary_shapes(a, b, "mul")
    if scalar:
        s = a.dtype.type(b)
        return wrap_op(a.data * s, [a], lambda g: (g * s,))
    ad, bd = a.data, b.data
    return wrap_op(ad * bd, [a, b], lambda g: (g * bd, g * ad))


def div(a: Tensor, b) -> Tensor:
    a, b, scalar = _binary_shapes(a, b, "div")
    if scalar:
        if b == 0.0:
            raise DivisionByZeroError("div: scalar divisor is zero")
        inv = a.dtype.type(1.0 / b)
        return wrap_op(a.data * inv, [a], lambda g: (g * inv,))
    if not np.all(b.data):
        raise DivisionByZeroError("div: divisor contains zero elements")
    ad, bd = a.data, b.data
    out = ad / bd
    return wrap_op(out, [a, b], lambda g: (g / bd, -g * ad / (bd * bd)))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return wrap_op(out, [a], lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0):
        raise ValueError("log: inputs must be strictly positive")
    ad = a.data
    return wrap_op(np.log(ad), [a], lambda g: (g / ad,))


def sqrt(a: Tensor) -> Tensor:
    if np.any(a.data < 0):
        raise ValueError("sqrt: inputs must be non-negative")
    out = np.sqrt(a.data)
    return wrap_op(out, [a], lambda g: (g * 0.5 / np.maximum(out, np.finfo(a.dtype).tiny),))


def absolute(a: Tensor) -> Tensor:
    ad = a.data
    return wrap_op(np.abs(ad), [a], lambda g: (g * np.sign(ad),))


def clamp_min(a: Tensor, floor: float) -> Tensor:
    ad = a.data
    f = a.dtype.type(floor)
    return wrap_op(np.maximum(ad, f), [a], lambda g: (g * (ad > f),))


def relu(a: Tensor) -> Tensor:
    return clamp_min(a, 0.0)


def leaky_relu(a: Tensor, slope: float = 0.1) -> Tensor:
    ad = a.data
    s = a.dtype.type(slope)
    pos = ad > 0
    out = np.where(pos, ad, ad * s)
    return wrap_op(out, [a], lambda g: (g * np.where(pos, a.dtype.type(1), s),))


def sigmoid(a: Tensor) -> Tensor:
    out = 1.0 / (1.0 + np.exp(-a.data))
    out = out.astype(a.dtype, copy=False)
    return wrap_op(out, [a], lambda g: (g * out * (1.0 - out),))


# -- reductions ---------------------------------------------------------------

def _norm_axes(axes, ndim: int, opname: str) -> tuple:
    if axes is None:
        return tuple(range(ndim))
    if isinstance(axes, int):
        axes = (axes,)
    axes = tuple(ax % ndim for ax in axes)
    if len(set(axes)) != len(axes) or any(ax >= ndim for ax in axes):
        raise ShapeError(f"{opname}: invalid axes {axes} for ndim {ndim}")
    return axes


def _check_nonempty(a: Tensor, axes, opname: str) -> None:
    for ax in axes:
        if a.shape[ax] == 0:
            raise ShapeError(f"{opname}: reduction over empty axis {ax}")


def reduce_sum(a: Tensor, axes=None) -> Tensor:
    axes = _norm_axes(axes, a.data.ndim, "sum")
    _check_nonempty(a, axes, "sum")
    shape = a.shape

    def bwd(g):
        keep = [1 if i in axes else shape[i] for i in range(len(shape))]
        return (np.broadcast_to(g.reshape(keep), shape),)

    return wrap_op(a.data.sum(axis=axes), [a], bwd)


def reduce_mean(a: Tensor, axes=None) -> Tensor:
    axes = _norm_axes(axes, a.data.ndim, "mean")
    _check_nonempty(a, axes, "mean")
    shape = a.shape
    n = 1
    for ax in axes:
        n *= shape[ax]
    inv = a.dtype.type(1.0 / n)

    def bwd(g):
        keep = [1 if i in axes else shape[i] for i in range(len(shape))]
        return (np.broadcast_to(g.reshape(keep) * inv, shape),)

    return wrap_op(a.data.mean(axis=axes, dtype=a.dtype), [a], bwd)


def reduce_max(a: Tensor, axes=None) -> Tensor:
    """Max over `axes`; backward routes to the first argmax on ties."""
    axes = _norm_axes(axes, a.data.ndim, "max")
    _check_nonempty(a, axes, "max")
    ndim = a.data.ndim
    kept = tuple(i for i in range(ndim) if i not in axes)
    perm = kept + axes
    moved = a.data.transpose(perm)
    kept_shape = moved.shape[:len(kept)]
    flat = moved.reshape(kept_shape + (-1,))
    am = np.argmax(flat, axis=-1)
    out = np.take_along_axis(flat, am[..., None], axis=-1)[..., 0]

    def bwd(g):
        gm = np.zeros_like(flat)
        np.put_along_axis(gm, am[..., None], g[..., None], axis=-1)
        gm = gm.reshape(moved.shape)
        inv = np.argsort(perm)
        return (gm.transpose(inv),)

    return wrap_op(out, [a], bwd)


# -- shape movement -----------------------------------------------------------

def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape) if isinstance(shape, (tuple, list)) else (shape,)
    try:
        out = a.data.reshape(shape)
    except ValueError as e:
        raise ShapeError(f"reshape: {a.shape} -> {shape}: {e}") from None
    old = a.shape
    return wrap_op(np.ascontiguousarray(out), [a],
                   lambda g: (g.reshape(old),))


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    if sorted(axes) != list(range(a.data.ndim)):
        raise ShapeError(f"transpose: axes {axes} invalid for ndim {a.data.ndim}")
    inv = tuple(np.argsort(axes))
    return wrap_op(np.ascontiguousarray(a.data.transpose(axes)), [a],
                   lambda g: (np.ascontiguousarray(g.transpose(inv)),))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not tensors:
        raise ShapeError("concat: no tensors")
    axis = axis % tensors[0].data.ndim
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, splits, axis=axis))

    return wrap_op(np.concatenate([t.data for t in tensors], axis=axis),
                   list(tensors), bwd)


# -- structured (no silent broadcasting) --------------------------------------

def add_rowvec(x: Tensor, v: Tensor) -> Tensor:
    """(N, D) + (D,): add the same vector to every row."""
    if x.data.ndim != 2 or v.data.ndim != 1 or x.shape[1] != v.shape[0]:
        raise ShapeError(f"add_rowvec: {x.shape} with {v.shape}")
    return wrap_op(x.data + v.data[None, :], [x, v],
                   lambda g: (g, g.sum(axis=0)))


def scale_rows(x: Tensor, s: Tensor) -> Tensor:
    """(N, D) * (N,): scale row i by s[i]."""
    if x.data.ndim != 2 or s.data.ndim != 1 or x.shape[0] != s.shape[0]:
        raise ShapeError(f"scale_rows: {x.shape} with {s.shape}")
    xd, sd = x.data, s.data
    return wrap_op(xd * sd[:, None], [x, s],
                   lambda g: (g * sd[:, None], (g * xd).sum(axis=1)))


def add_chan_bias(x: Tensor, b: Tensor) -> Tensor:
    """(B, C, H, W) + (C,): per-channel bias."""
    if x.data.ndim != 4 or b.data.ndim != 1 or x.shape[1] != b.shape[0]:
        raise ShapeError(f"add_chan_bias: {x.shape} with {b.shape}")
    return wrap_op(x.data + b.data[None, :, None, None], [x, b],
                   lambda g: (g, g.sum(axis=(0, 2, 3))))


def mul_chan(x: Tensor, s: Tensor) -> Tensor:
    """(B, C, H, W) * (B, C): per-sample per-channel gate."""
    if (x.data.ndim != 4 or s.data.ndim != 2
            or x.shape[0] != s.shape[0] or x.shape[1] != s.shape[1]):
        raise ShapeError(f"mul_chan: {x.shape} with {s.shape}")
    xd, sd = x.data, s.data
    return wrap_op(xd * sd[:, :, None, None], [x, s],
                   lambda g: (g * sd[:, :, None, None], (g * xd).sum(axis=(2, 3))))


# -- linear algebra -----------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(f"matmul needs 2-d operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner extents differ, {a.shape} x {b.shape}")
    if a.dtype != b.dtype:
        raise ShapeError(f"matmul: dtype mismatch {a.dtype} vs {b.dtype}")
    ad, bd = a.data, b.data
    return wrap_op(ad @ bd, [a, b],
                   lambda g: (g @ bd.T, ad.T @ g))


def bmm(a: Tensor, b: Tensor) -> Tensor:
    """Stacked matmul: (S, M, K) @ (S, K, P) -> (S, M, P)."""
    if a.data.ndim != 3 or b.data.ndim != 3:
        raise ShapeError(f"bmm needs 3-d operands, got {a.shape} and {b.shape}")
    if a.shape[0] != b.shape[0] or a.shape[2] != b.shape[1]:
        raise ShapeError(f"bmm: incompatible {a.shape} x {b.shape}")
    ad, bd = a.data, b.data
    return wrap_op(ad @ bd, [a, b],
                   lambda g: (g @ bd.transpose(0, 2, 1), ad.transpose(0, 2, 1) @ g))


# -- convolution ----------------------------------------------------------------

def _conv_out_len(n: int, k: int, stride: int, pad: int) -> int:
    return (n + 2 * pad - k) // stride + 1


def _dilate(g: np.ndarray, stride: int) -> np.ndarray:
    if stride == 1:
        return g
    B, O, Ho, Wo = g.shape
    out = np.zeros((B, O, (Ho - 1) * stride + 1, (Wo - 1) * stride + 1), dtype=g.dtype)
    out[:, :, ::stride, ::stride] = g
    return out


def _fit_hw(dx: np.ndarray, H: int, W: int) -> np.ndarray:
    """Crop or zero-pad the trailing spatial dims to exactly (H, W)."""
    dx = dx[:, :, :H, :W]
    ph, pw = H - dx.shape[2], W - dx.shape[3]
    if ph or pw:
        dx = np.pad(dx, ((0, 0), (0, 0), (0, ph), (0, pw)))
    return dx


def _dense_conv_fwd(x, w, stride, pad):
    kh, kw = w.shape[2], w.shape[3]
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    out = np.tensordot(win, w, axes=([1, 4, 5], [1, 2, 3]))
    return np.ascontiguousarray(out.transpose(0, 3, 1, 2).astype(x.dtype, copy=False))


def _bwd_pads(n: int, k: int, stride: int, pad: int, n_out: int) -> tuple[int, int]:
    """Left/right padding of the dilated output grad so the full-correlation
    with the flipped kernel lands on exactly n input positions."""
    left = k - 1 - pad
    right = n + pad - 1 - (n_out - 1) * stride
    return left, max(right, 0)


def _dense_conv_bwd(g, x, w, stride, pad):
    B, C, H, W = x.shape
    kh, kw = w.shape[2], w.shape[3]
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    dw = np.tensordot(g, win, axes=([0, 2, 3], [0, 2, 3]))  # (O, C, kh, kw)
    gd = _dilate(g, stride)
    ph = _bwd_pads(H, kh, stride, pad, g.shape[2])
    pw = _bwd_pads(W, kw, stride, pad, g.shape[3])
    gp = np.pad(gd, ((0, 0), (0, 0), ph, pw))
    wing = sliding_window_view(gp, (kh, kw), axis=(2, 3))
    wf = w[:, :, ::-1, ::-1]
    dx = np.tensordot(wing, wf, axes=([1, 4, 5], [0, 2, 3]))  # (B, H', W', C)
    dx = np.ascontiguousarray(dx.transpose(0, 3, 1, 2).astype(x.dtype, copy=False))
    return _fit_hw(dx, H, W), dw.astype(w.dtype, copy=False)


def _depthwise_conv_fwd(x, w, stride, pad):
    kh, kw = w.shape[2], w.shape[3]
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    out = np.einsum("bcijuv,cuv->bcij", win, w[:, 0], optimize=True)
    return np.ascontiguousarray(out.astype(x.dtype, copy=False))


def _depthwise_conv_bwd(g, x, w, stride, pad):
    B, C, H, W = x.shape
    kh, kw = w.shape[2], w.shape[3]
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    dw = np.einsum("bcij,bcijuv->cuv", g, win, optimize=True)[:, None]
    gd = _dilate(g, stride)
    gp = np.pad(gd, ((0, 0), (0, 0),
                     _bwd_pads(H, kh, stride, pad, g.shape[2]),
                     _bwd_pads(W, kw, stride, pad, g.shape[3])))
    wing = sliding_window_view(gp, (kh, kw), axis=(2, 3))
    wf = w[:, 0, ::-1, ::-1]
    dx = np.einsum("bcijuv,cuv->bcij", wing, wf, optimize=True)
    dx = np.ascontiguousarray(dx.astype(x.dtype, copy=False))
    return _fit_hw(dx, H, W), dw.astype(w.dtype, copy=False)


def conv2d(x: Tensor, w: Tensor, stride: int = 1, padding=None,
           groups: int = 1) -> Tensor:
    """Cross-correlation of (B, C, H, W) with (O, C/groups, k, k) filters.

    Default padding is k//2 ("same" at stride 1). groups == C is the
    depthwise case; other group counts fall back to a per-group loop.
    """
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ShapeError(f"conv2d: need 4-d input and weight, got {x.shape}, {w.shape}")
    B, C, H, W = x.shape
    O, Cg, kh, kw = w.shape
    if kh != kw:
        raise ShapeError(f"conv2d: only square kernels, got {kh}x{kw}")
    if C % groups or O % groups:
        raise ShapeError(f"conv2d: channels {C}->{O} not divisible by groups {groups}")
    if Cg != C // groups:
        raise ShapeError(f"conv2d: weight expects {Cg} channels/group, input has {C // groups}")
    if x.dtype != w.dtype:
        raise ShapeError(f"conv2d: dtype mismatch {x.dtype} vs {w.dtype}")
    pad = kh // 2 if padding is None else int(padding)
    xd, wd = x.data, w.data

    if groups == 1:
        out = _dense_conv_fwd(xd, wd, stride, pad)
        bwd_fn = _dense_conv_bwd
    elif groups == C and Cg == 1:
        out = _depthwise_conv_fwd(xd, wd, stride, pad)
        bwd_fn = _depthwise_conv_bwd
    else:
        cs, os_ = C // groups, O // groups
        parts = [_dense_conv_fwd(xd[:, gi * cs:(gi + 1) * cs],
                                 wd[gi * os_:(gi + 1) * os_], stride, pad)
                 for gi in range(groups)]
        out = np.concatenate(parts, axis=1)

        def bwd(g):
            dx = np.empty_like(xd)
            dw = np.empty_like(wd)
            for gi in range(groups):
                dxi, dwi = _dense_conv_bwd(
                    g[:, gi * os_:(gi + 1) * os_],
                    xd[:, gi * cs:(gi + 1) * cs],
                    wd[gi * os_:(gi + 1) * os_], stride, pad)
                dx[:, gi * cs:(gi + 1) * cs] = dxi
                dw[gi * os_:(gi + 1) * os_] = dwi
            return dx, dw

        return wrap_op(out, [x, w], bwd)

    def bwd(g):
        return bwd_fn(g, xd, wd, stride, pad)

    return wrap_op(out, [x, w], bwd)


# -- layer norm -----------------------------------------------------------------

def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize each row of (N, D) to zero mean / unit variance, then affine."""
    if x.data.ndim != 2:
        raise ShapeError(f"layer_norm: need 2-d input, got {x.shape}")
    D = x.shape[1]
    if gamma.shape != (D,) or beta.shape != (D,):
        raise ShapeError(f"layer_norm: params {gamma.shape}/{beta.shape} vs D={D}")
    xd = x.data
    mu = xd.mean(axis=1, keepdims=True, dtype=x.dtype)
    xc = xd - mu
    var = (xc * xc).mean(axis=1, keepdims=True, dtype=x.dtype)
    inv = 1.0 / np.sqrt(var + x.dtype.type(eps))
    xhat = xc * inv
    out = xhat * gamma.data[None, :] + beta.data[None, :]

    def bwd(g):
        dgamma = (g * xhat).sum(axis=0)
        dbeta = g.sum(axis=0)
        dxhat = g * gamma.data[None, :]
        m1 = dxhat.mean(axis=1, keepdims=True, dtype=x.dtype)
        m2 = (dxhat * xhat).mean(axis=1, keepdims=True, dtype=x.dtype)
        dx = inv * (dxhat - m1 - xhat * m2)
        return dx.astype(x.dtype, copy=False), dgamma, dbeta

    return wrap_op(out.astype(x.dtype, copy=False), [x, gamma, beta], bwd)
