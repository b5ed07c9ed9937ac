"""Dense tensors with reverse-mode automatic differentiation on numpy arrays.

Every operation records a backward closure on the output tensor; backward()
replays them in reverse topological order. Only float32/float64 data is
supported; tests run at float64, training may run at float32.
"""
from __future__ import annotations

import ctypes
import sys

import numpy as np

LOG_EPS = 1e-12  # log(x) is evaluated as log(x + LOG_EPS)

# Large short-lived arrays otherwise go through mmap/munmap and pay a page
# fault per touch; raising the malloc thresholds lets glibc reuse the heap.
if sys.platform.startswith("linux"):
    try:
        _libc = ctypes.CDLL("libc.so.6")
        _libc.mallopt(-3, 1 << 30)  # M_MMAP_THRESHOLD
        _libc.mallopt(-1, 1 << 30)  # M_TRIM_THRESHOLD
    except OSError:  # pragma: no cover - non-glibc platforms
        pass


class ShapeError(ValueError):
    """Operand shapes incompatible with the requested operation."""


class NumericError(ArithmeticError):
    """An operation produced NaN."""


class UsageError(RuntimeError):
    """Autodiff API misuse, e.g. backward() on a non-scalar."""


_grad_mode = [True]


class no_grad:
    """Context manager that suspends recording of backward closures."""

    def __enter__(self):
        self._saved = _grad_mode[0]
        _grad_mode[0] = False
        return self

    def __exit__(self, *exc):
        _grad_mode[0] = self._saved
        return False


def _as_array(data, dtype=None):
    arr = np.asarray(data, dtype=dtype)
    if arr.dtype not in (np.float32, np.float64):
        arr = arr.astype(np.float64)
    return arr


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_backward", "_prev", "_op")

    def __init__(self, data, requires_grad=False, dtype=None):
        self.data = _as_array(data, dtype)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._backward = None
        self._prev = ()
        self._op = "leaf"

    # ------------------------------------------------------------------ infra

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, op={self._op}, grad={self.requires_grad})"

    def item(self):
        return float(self.data.reshape(-1)[0])

    def numpy(self):
        return self.data

    def detach(self):
        return Tensor(self.data)

    def accumulate_grad(self, g, own=False):
        """Add g into .grad; own=True transfers the array without copying and
        is only legal for freshly computed arrays no one else references."""
        if self.grad is None:
            if own and g.dtype == self.data.dtype:
                self.grad = g
            else:
                self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    def backward(self):
        """Propagate gradients from a scalar tensor to every reachable leaf.

        Repeated calls accumulate into .grad; callers reset grads explicitly.
        """
        if self.data.size != 1:
            raise UsageError(f"backward() requires a scalar loss, got shape {self.data.shape}")
        topo = []
        visited = set()
        stack = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._prev:
                if id(p) not in visited:
                    stack.append((p, False))
        self.accumulate_grad(np.ones_like(self.data))
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
                # non-leaf grads are transient: free them so repeated backward
                # calls accumulate only at leaves
                node.grad = None

    # -------------------------------------------------------------- operators

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_wrap(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_wrap(other, self.dtype), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def abs(self):
        return abs_(self)

    def square(self):
        return square(self)

    def pow_k(self, k):
        return pow_k(self, k)

    def sqrt(self):
        return sqrt(self)

    def log(self):
        return log(self)

    def exp(self):
        return exp(self)

    def sigmoid(self):
        return sigmoid(self)

    def tanh(self):
        return tanh(self)

    def clamp_min(self, lo):
        return clamp_min(self, lo)

    def clip(self, lo, hi):
        return clip(self, lo, hi)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def l2_norm(self, axis=None, keepdims=False):
        return l2_norm(self, axis, keepdims)

    def softmax(self, axis):
        return softmax(self, axis)

    def reshape(self, *shape):
        return reshape(self, *shape)

    def transpose(self, *axes):
        return transpose(self, *axes)

    def narrow(self, axis, start, length):
        return narrow(self, axis, start, length)


def _wrap(x, dtype=None):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype if dtype is not None else np.float64))


def _record(out, inputs, op, backward):
    """Attach a backward closure if grad mode is on and any input needs it."""
    out._op = op
    if _grad_mode[0] and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._prev = tuple(inputs)
        out._backward = backward
    return out


def _unbroadcast(g, shape):
    """Sum g down to `shape`, undoing trailing-dimension broadcasting."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _check_broadcast(a, b, op):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError as e:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from e


def _check_nan(arr, op):
    if np.isnan(arr).any():
        raise NumericError(f"{op} produced NaN")


# ------------------------------------------------------------ creation helpers


def tensor(data, requires_grad=False, dtype=None):
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def zeros(shape, dtype=np.float64, requires_grad=False):
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=requires_grad)


def ones(shape, dtype=np.float64, requires_grad=False):
    return Tensor(np.ones(shape, dtype=dtype), requires_grad=requires_grad)


def zeros_like(t):
    return Tensor(np.zeros_like(t.data))


# ------------------------------------------------------------- elementwise ops


def add(a, b):
    a, b = _wrap(a), _wrap(b, a.dtype)
    _check_broadcast(a, b, "add")
    out = Tensor(a.data + b.data)

    def backward(g):
        if a.requires_grad:
            ga = _unbroadcast(g, a.shape)
            a.accumulate_grad(ga, own=ga is not g)
        if b.requires_grad:
            gb = _unbroadcast(g, b.shape)
            b.accumulate_grad(gb, own=gb is not g)

    return _record(out, (a, b), "add", backward)


def sub(a, b):
    a, b = _wrap(a), _wrap(b, a.dtype)
    _check_broadcast(a, b, "sub")
    out = Tensor(a.data - b.data)

    def backward(g):
        if a.requires_grad:
            ga = _unbroadcast(g, a.shape)
            a.accumulate_grad(ga, own=ga is not g)
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(-g, b.shape), own=True)

    return _record(out, (a, b), "sub", backward)


def mul(a, b):
    a, b = _wrap(a), _wrap(b, a.dtype)
    _check_broadcast(a, b, "mul")
    out = Tensor(a.data * b.data)

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(g * b.data, a.shape), own=True)
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(g * a.data, b.shape), own=True)

    return _record(out, (a, b), "mul", backward)


def div(a, b):
    a, b = _wrap(a), _wrap(b, a.dtype)
    _check_broadcast(a, b, "div")
    with np.errstate(invalid="ignore", divide="ignore"):
        out_data = a.data / b.data
    _check_nan(out_data, "div")
    out = Tensor(out_data)

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(g / b.data, a.shape), own=True)
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(-g * a.data / (b.data * b.data), b.shape), own=True)

    return _record(out, (a, b), "div", backward)


def neg(a):
    out = Tensor(-a.data)

    def backward(g):
        a.accumulate_grad(-g, own=True)

    return _record(out, (a,), "neg", backward)


def abs_(a):
    out = Tensor(np.abs(a.data))

    def backward(g):
        a.accumulate_grad(g * np.sign(a.data), own=True)

    return _record(out, (a,), "abs", backward)


def square(a):
    out = Tensor(a.data * a.data)

    def backward(g):
        a.accumulate_grad(g * (2.0 * a.data), own=True)

    return _record(out, (a,), "square", backward)


def pow_k(a, k):
    """Elementwise a**k for a fixed real exponent k."""
    k = float(k)
    with np.errstate(invalid="ignore"):
        out_data = a.data**k
    _check_nan(out_data, f"pow_{k:g}")
    out = Tensor(out_data)

    def backward(g):
        a.accumulate_grad(g * (k * a.data ** (k - 1.0)), own=True)

    return _record(out, (a,), f"pow_{k:g}", backward)


def sqrt(a):
    with np.errstate(invalid="ignore"):
        out_data = np.sqrt(a.data)
    _check_nan(out_data, "sqrt")
    out = Tensor(out_data)

    def backward(g):
        a.accumulate_grad(g * (0.5 / out.data), own=True)

    return _record(out, (a,), "sqrt", backward)


def log(a):
    """Natural log with the engine-wide epsilon guard: log(x + 1e-12)."""
    shifted = a.data + LOG_EPS
    out_data = np.log(shifted)
    _check_nan(out_data, "log")
    out = Tensor(out_data)

    def backward(g):
        a.accumulate_grad(g / shifted, own=True)

    return _record(out, (a,), "log", backward)


def exp(a):
    out = Tensor(np.exp(a.data))

    def backward(g):
        a.accumulate_grad(g * out.data, own=True)

    return _record(out, (a,), "exp", backward)


def sigmoid(a):
    out = Tensor(_sigmoid_raw(a.data))

    def backward(g):
        a.accumulate_grad(g * (out.data * (1.0 - out.data)), own=True)

    return _record(out, (a,), "sigmoid", backward)


def _sigmoid_raw(x):
    # evaluate from the stable side of 0 to avoid overflow in exp
    pos = x >= 0
    z = np.empty_like(x)
    z[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    z[~pos] = ex / (1.0 + ex)
    return z


def tanh(a):
    out = Tensor(np.tanh(a.data))

    def backward(g):
        a.accumulate_grad(g * (1.0 - out.data * out.data), own=True)

    return _record(out, (a,), "tanh", backward)


def prelu(a, slope):
    """PReLU with a learnable slope tensor broadcast against `a`."""
    slope = _wrap(slope, a.dtype)
    _check_broadcast(a, slope, "prelu")
    neg_mask = a.data < 0
    out = Tensor(np.where(neg_mask, slope.data * a.data, a.data))

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(np.where(neg_mask, slope.data * g, g), own=True)
        if slope.requires_grad:
            slope.accumulate_grad(_unbroadcast(np.where(neg_mask, a.data * g, 0.0), slope.shape), own=True)

    return _record(out, (a, slope), "prelu", backward)


def clamp_min(a, lo):
    lo = float(lo)
    out = Tensor(np.maximum(a.data, lo))

    def backward(g):
        a.accumulate_grad(np.where(a.data > lo, g, 0.0), own=True)

    return _record(out, (a,), "clamp_min", backward)


def clip(a, lo, hi):
    lo, hi = float(lo), float(hi)
    out = Tensor(np.clip(a.data, lo, hi))

    def backward(g):
        inside = (a.data > lo) & (a.data < hi)
        a.accumulate_grad(np.where(inside, g, 0.0), own=True)

    return _record(out, (a,), "clip", backward)


# ---------------------------------------------------------------- reductions


def _norm_axis(axis, ndim, op):
    if axis is None:
        return None
    axes = (axis,) if np.isscalar(axis) else tuple(axis)
    for ax in axes:
        if not -ndim <= ax < ndim:
            raise ShapeError(f"{op}: axis {ax} out of range for rank {ndim}")
    return tuple(ax % ndim for ax in axes)


def sum_(a, axis=None, keepdims=False):
    axis = _norm_axis(axis, a.ndim, "sum")
    out = Tensor(a.data.sum(axis=axis, keepdims=keepdims))

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        a.accumulate_grad(np.broadcast_to(g, a.shape))

    return _record(out, (a,), "sum", backward)


def mean(a, axis=None, keepdims=False):
    axis = _norm_axis(axis, a.ndim, "mean")
    out = Tensor(a.data.mean(axis=axis, keepdims=keepdims))
    count = a.data.size if axis is None else int(np.prod([a.shape[ax] for ax in axis]))

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        a.accumulate_grad(np.broadcast_to(g, a.shape) / count, own=True)

    return _record(out, (a,), "mean", backward)


def l2_norm(a, axis=None, keepdims=False):
    """sqrt(sum(x^2)) over `axis` (all axes when None)."""
    return sqrt(sum_(square(a), axis=axis, keepdims=keepdims))


def softmax(a, axis):
    (axis,) = _norm_axis(axis, a.ndim, "softmax")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(y)

    def backward(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        a.accumulate_grad(y * (g - dot), own=True)

    return _record(out, (a,), "softmax", backward)


# ------------------------------------------------------------- linear algebra


def matmul(a, b):
    a, b = _wrap(a), _wrap(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    out = Tensor(a.data @ b.data)

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(g @ b.data.T, own=True)
        if b.requires_grad:
            b.accumulate_grad(a.data.T @ g, own=True)

    return _record(out, (a, b), "matmul", backward)


# ------------------------------------------------------------------ conv2d


def _im2col(x, kh, kw, sh, sw):
    """x: (B, C, H, W) already padded -> (B, C*kh*kw, Ho*Wo)."""
    B, C, H, W = x.shape
    Ho = (H - kh) // sh + 1
    Wo = (W - kw) // sw + 1
    cols = np.empty((B, C, kh, kw, Ho, Wo), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = x[:, :, i : i + sh * Ho : sh, j : j + sw * Wo : sw]
    return cols.reshape(B, C * kh * kw, Ho * Wo), Ho, Wo


def _col2im(cols, B, C, H, W, kh, kw, sh, sw, Ho, Wo):
    x = np.zeros((B, C, H, W), dtype=cols.dtype)
    c6 = cols.reshape(B, C, kh, kw, Ho, Wo)
    for i in range(kh):
        for j in range(kw):
            x[:, :, i : i + sh * Ho : sh, j : j + sw * Wo : sw] += c6[:, :, i, j]
    return x


def _pad_pair(p):
    """Accept an int (symmetric) or a (before, after) pair per axis."""
    if np.isscalar(p):
        return int(p), int(p)
    lo, hi = p
    return int(lo), int(hi)


def conv2d(x, w, stride=(1, 1), pad=(0, 0)):
    """2D cross-correlation. x: (Cin,H,W) or (B,Cin,H,W); w: (Cout,Cin,kh,kw).

    pad gives zero padding per spatial axis, either symmetric ints or
    (before, after) pairs.
    """
    squeeze = x.ndim == 3
    xd = x.data[None] if squeeze else x.data
    if xd.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d: expected 3/4-d input and 4-d weight, got {x.shape}, {w.shape}")
    B, Cin, H, W = xd.shape
    Cout, Cin_w, kh, kw = w.shape
    sh, sw = stride
    (pht, phb), (pwl, pwr) = _pad_pair(pad[0]), _pad_pair(pad[1])
    Hp, Wp = H + pht + phb, W + pwl + pwr
    if Cin != Cin_w:
        raise ShapeError(f"conv2d: input channels {Cin} != weight channels {Cin_w}")
    if Hp < kh or Wp < kw:
        raise ShapeError(f"conv2d: kernel ({kh},{kw}) larger than padded input ({Hp},{Wp})")
    xp = xd if Hp == H and Wp == W else np.pad(xd, ((0, 0), (0, 0), (pht, phb), (pwl, pwr)))
    cols, Ho, Wo = _im2col(xp, kh, kw, sh, sw)
    w2 = w.data.reshape(Cout, -1)
    y = np.matmul(w2, cols).reshape(B, Cout, Ho, Wo)
    out = Tensor(y[0] if squeeze else y)

    def backward(g):
        g4 = g[None] if squeeze else g
        gflat = g4.reshape(B, Cout, Ho * Wo)
        if w.requires_grad:
            gw = np.matmul(gflat, cols.transpose(0, 2, 1)).sum(axis=0)
            w.accumulate_grad(gw.reshape(w.shape), own=True)
        if x.requires_grad:
            gcols = np.matmul(w2.T, gflat)
            gx = _col2im(gcols, B, Cin, Hp, Wp, kh, kw, sh, sw, Ho, Wo)
            if Hp != H or Wp != W:
                gx = gx[:, :, pht : pht + H, pwl : pwl + W]
            x.accumulate_grad(gx[0] if squeeze else gx, own=True)

    return _record(out, (x, w), "conv2d", backward)


def conv_transpose2d(x, w, stride=(1, 1), pad=(0, 0), output_padding=(0, 0)):
    """Adjoint of conv2d with the same weight layout.

    x: (Cout,Ho,Wo) or (B,Cout,Ho,Wo); w: (Cout,Cin,kh,kw) -> (B,Cin,H,W) with
    H = (Ho-1)*sh - 2*ph + kh + oph.
    """
    squeeze = x.ndim == 3
    xd = x.data[None] if squeeze else x.data
    if xd.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv_transpose2d: expected 3/4-d input and 4-d weight, got {x.shape}, {w.shape}")
    B, Cout, Ho, Wo = xd.shape
    Cout_w, Cin, kh, kw = w.shape
    sh, sw = stride
    ph, pw = pad
    oph, opw = output_padding
    if Cout != Cout_w:
        raise ShapeError(f"conv_transpose2d: input channels {Cout} != weight channels {Cout_w}")
    if oph >= sh or opw >= sw:
        raise ShapeError("conv_transpose2d: output_padding must be < stride")
    Hp = (Ho - 1) * sh + kh + oph
    Wp = (Wo - 1) * sw + kw + opw
    H, W = Hp - 2 * ph, Wp - 2 * pw
    if H < 1 or W < 1:
        raise ShapeError(f"conv_transpose2d: output extent ({H},{W}) collapsed below 1")
    w2 = w.data.reshape(Cout, -1)
    xflat = xd.reshape(B, Cout, Ho * Wo)
    cols = np.matmul(w2.T, xflat)
    # scatter onto an extent that covers stride*(Ho-1)+kernel plus output padding
    yp = _col2im(cols, B, Cin, Hp, Wp, kh, kw, sh, sw, Ho, Wo)
    y = yp[:, :, ph : ph + H, pw : pw + W]
    out = Tensor(y[0] if squeeze else y)

    def backward(g):
        g4 = g[None] if squeeze else g
        gp = np.pad(g4, ((0, 0), (0, 0), (ph, Hp - ph - H), (pw, Wp - pw - W)))
        gcols, _, _ = _im2col(gp, kh, kw, sh, sw)
        if x.requires_grad:
            gx = np.matmul(w2, gcols).reshape(B, Cout, Ho, Wo)
            x.accumulate_grad(gx[0] if squeeze else gx, own=True)
        if w.requires_grad:
            gw = np.matmul(gcols, xflat.transpose(0, 2, 1)).sum(axis=0)
            w.accumulate_grad(np.ascontiguousarray(gw.reshape(Cin * kh * kw, Cout).T).reshape(w.shape), own=True)

    return _record(out, (x, w), "conv_transpose2d", backward)


# ----------------------------------------------------------------- structural


def concat(tensors, axis=0):
    tensors = [_wrap(t) for t in tensors]
    ndim = tensors[0].ndim
    (axis,) = _norm_axis(axis, ndim, "concat")
    for t in tensors[1:]:
        if t.ndim != ndim:
            raise ShapeError("concat: rank mismatch")
        for ax in range(ndim):
            if ax != axis and t.shape[ax] != tensors[0].shape[ax]:
                raise ShapeError(f"concat: shapes {tensors[0].shape} and {t.shape} differ off-axis")
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis))
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:], strict=False):
            if t.requires_grad:
                idx = [slice(None)] * ndim
                idx[axis] = slice(lo, hi)
                t.accumulate_grad(g[tuple(idx)])

    return _record(out, tuple(tensors), "concat", backward)


def narrow(a, axis, start, length):
    """Slice `length` entries from `start` along `axis`."""
    (axis,) = _norm_axis(axis, a.ndim, "narrow")
    if start < 0 or length < 1 or start + length > a.shape[axis]:
        raise ShapeError(f"narrow: range [{start},{start + length}) out of bounds for extent {a.shape[axis]}")
    idx = [slice(None)] * a.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)
    out = Tensor(a.data[idx].copy())

    def backward(g):
        gx = np.zeros_like(a.data)
        gx[idx] = g
        a.accumulate_grad(gx, own=True)

    return _record(out, (a,), "narrow", backward)


def reshape(a, *shape):
    if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
        shape = tuple(shape[0])
    new = np.reshape(a.data, shape)
    out = Tensor(new)

    def backward(g):
        a.accumulate_grad(g.reshape(a.shape))

    return _record(out, (a,), "reshape", backward)


def transpose(a, *axes):
    if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
        axes = tuple(axes[0])
    if not axes:
        axes = tuple(reversed(range(a.ndim)))
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeError(f"transpose: invalid permutation {axes} for rank {a.ndim}")
    inv = np.argsort(axes)
    out = Tensor(np.ascontiguousarray(a.data.transpose(axes)))

    def backward(g):
        a.accumulate_grad(g.transpose(inv))

    return _record(out, (a,), "transpose", backward)


# --------------------------------------------------------------- grad checking


class GradCheckReport:
    """Per-input maximum relative error between analytic and numeric gradients."""

    def __init__(self, per_input):
        self.per_input = per_input
        finite = [e for e in per_input if np.isfinite(e)]
        self.max_rel_err = max(per_input) if per_input else 0.0
        if len(finite) != len(per_input):
            self.max_rel_err = np.inf

    def ok(self, tol):
        return np.isfinite(self.max_rel_err) and self.max_rel_err < tol

    def __repr__(self):
        return f"GradCheckReport(max_rel_err={self.max_rel_err:.3e}, per_input={self.per_input})"


def grad_check(f, inputs, eps=1e-5):
    """Compare analytic gradients of scalar-valued f against central differences.

    Relative error per element is |a-n| / max(|a|, |n|, 1e-8); non-finite
    entries make the report fail.
    """
    inputs = list(inputs)
    for t in inputs:
        t.requires_grad = True
        t.grad = None
    out = f(*inputs)
    out.backward()
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in inputs]

    per_input = []
    with no_grad():
        for t, ag in zip(inputs, analytic, strict=False):
            flat = t.data.reshape(-1)
            worst = 0.0
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + eps
                fp = float(f(*inputs).data.reshape(-1)[0])
                flat[i] = orig - eps
                fm = float(f(*inputs).data.reshape(-1)[0])
                flat[i] = orig
                num = (fp - fm) / (2.0 * eps)
                an = ag.reshape(-1)[i]
                err = abs(an - num) / max(abs(an), abs(num), 1e-8)
                if not np.isfinite(err):
                    worst = np.inf
                    break
                worst = max(worst, err)
            per_input.append(worst)
    return GradCheckReport(per_input)
