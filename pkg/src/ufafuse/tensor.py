"""Rank-4 tensors with reverse-mode automatic differentiation.

Only the handful of operations the fusion network and its losses need are
provided. Every tensor is shaped (batch, channels, height, width); scalars
are (1, 1, 1, 1). Convolution is cross-correlation (no kernel flip).
"""

from __future__ import annotations

from contextlib import contextmanager

import numpy as np

# Test hook: a non-zero value is added to every conv kernel gradient so the
# self-check suite can prove it detects a broken backward pass.
CONV_BACKWARD_PERTURBATION = 0.0

LEAKY_SLOPE = 0.01


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class BranchTape:
    """Records and replays the branch choices of the piecewise ops.

    ``leaky_relu``, ``abs_`` and the max ``channel_pool`` pick a linear piece
    per element. While recording, each call appends its choice; while
    replaying, calls reuse the recorded choices in the same order. Replaying
    turns a forward pass into the smooth function that agrees with the
    original on the recorded piece, which is what finite-difference gradient
    checks need near kinks.
    """

    def __init__(self):
        self.choices = []
        self.mode = None
        self._pos = 0

    @contextmanager
    def recording(self):
        self.choices, self.mode = [], "record"
        with _active(self):
            yield self

    @contextmanager
    def replaying(self):
        self.mode = "replay"
        self._pos = 0
        with _active(self):
            yield self
        if self._pos != len(self.choices):
            raise RuntimeError(f"replay used {self._pos} of {len(self.choices)} recorded branch choices")

    def branch(self, op, choice):
        if self.mode == "record":
            self.choices.append((op, choice))
            return choice
        if self._pos >= len(self.choices):
            raise RuntimeError("replay ran past the recorded branch choices")
        rec_op, rec = self.choices[self._pos]
        self._pos += 1
        if rec_op != op or rec.shape != choice.shape:
            raise RuntimeError(f"replay diverged: recorded {rec_op}{rec.shape}, got {op}{choice.shape}")
        return rec


_TAPE = None


@contextmanager
def _active(tape):
    global _TAPE
    prev, _TAPE = _TAPE, tape
    try:
        yield
    finally:
        _TAPE = prev


def _branch(op, choice):
    return choice if _TAPE is None else _TAPE.branch(op, choice)


class Tensor:
    """Dense (N, C, H, W) array that records how it was produced.

    ``grad`` stays ``None`` until a backward pass reaches a tensor with
    ``requires_grad`` set. Gradients accumulate across backward calls;
    callers reset them with :meth:`zero_grad`.
    """

    __array_priority__ = 100

    def __init__(self, data, requires_grad=False, dtype=None, _parents=(), _op=""):
        if dtype is None:
            is_f64 = isinstance(data, np.ndarray) and data.dtype == np.float64
            dtype = np.float64 if is_f64 else np.float32
        arr = np.asarray(data, dtype=dtype)
        if arr.ndim == 0:
            arr = arr.reshape(1, 1, 1, 1)
        if arr.ndim != 4:
            raise ShapeError(f"tensors are rank 4 (N, C, H, W), got shape {arr.shape}")
        if min(arr.shape) < 1:
            raise ShapeError(f"every dimension must be >= 1, got {arr.shape}")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = _parents
        self._backward = None
        self._op = _op

    # -- basic protocol -------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self):
        return self.data

    def item(self):
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self):
        self.grad = None

    def detach(self):
        return Tensor(self.data, dtype=self.data.dtype)

    def astype(self, dtype):
        return Tensor(self.data.astype(dtype), requires_grad=self.requires_grad, dtype=dtype)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    # -- operator sugar -------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_lift(other, self), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def backward(self, grad=None):
        backward(self, grad)


def _lift(value, like):
    if isinstance(value, Tensor):
        return value
    return Tensor(np.full((1, 1, 1, 1), value, dtype=like.dtype), dtype=like.dtype)


def _result(data, parents, op):
    parents = tuple(parents)
    out = Tensor(data, requires_grad=any(p.requires_grad for p in parents),
                 dtype=data.dtype, _parents=parents, _op=op)
    return out


def _accumulate(t, g):
    if not t.requires_grad:
        return
    g = np.asarray(g, dtype=t.data.dtype)
    if g.shape != t.data.shape:
        raise ShapeError(f"gradient shape {g.shape} does not match tensor {t.shape}")
    if t.grad is None:
        t.grad = g.copy()
    else:
        t.grad += g


# ----------------------------------------------------------------------
# backward pass
# ----------------------------------------------------------------------
def backward(loss, grad=None):
    """Populate ``.grad`` on every tensor that ``loss`` depends on.

    ``loss`` must hold a single value unless an explicit upstream ``grad``
    of matching shape is supplied.
    """
    if grad is None:
        if loss.data.size != 1:
            raise ShapeError(f"backward() needs a scalar loss, got shape {loss.shape}")
        grad = np.ones_like(loss.data)
    order = []
    seen = set()
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))

    # intermediate gradients live here; only leaves keep .grad afterwards
    grads = {id(loss): np.asarray(grad, dtype=loss.data.dtype)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None or not node.requires_grad:
            continue
        if node._backward is None:
            _accumulate(node, g)
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


# ----------------------------------------------------------------------
# elementwise arithmetic with (N,C,1,1) / (N,1,H,W) broadcasting
# ----------------------------------------------------------------------
def _broadcast_shape(a, b):
    sa, sb = a.shape, b.shape
    out = []
    for da, db in zip(sa, sb):
        if da == db or db == 1:
            out.append(da)
        elif da == 1:
            out.append(db)
        else:
            raise ShapeError(f"cannot broadcast {sa} against {sb}")
    return tuple(out)


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    return g.sum(axis=axes, keepdims=True)


def elementwise(a, b, op):
    """Apply ``op`` in {"add", "sub", "mul", "div"} with broadcasting."""
    a = _lift(a, b) if not isinstance(a, Tensor) else a
    b = _lift(b, a)
    shape = _broadcast_shape(a, b)
    if op == "add":
        out = a.data + b.data

        def bw(g):
            return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)
    elif op == "sub":
        out = a.data - b.data

        def bw(g):
            return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)
    elif op == "mul":
        out = a.data * b.data

        def bw(g):
            return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)
    elif op == "div":
        out = a.data / b.data

        def bw(g):
            ga = g / b.data
            return _unbroadcast(ga, a.shape), _unbroadcast(-ga * out, b.shape)
    else:
        raise ValueError(f"unknown elementwise op {op!r}")
    assert out.shape == shape
    res = _result(out, (a, b), op)
    res._backward = bw
    return res


def add(a, b):
    return elementwise(a, b, "add")


def sub(a, b):
    return elementwise(a, b, "sub")


def mul(a, b):
    return elementwise(a, b, "mul")


def div(a, b):
    return elementwise(a, b, "div")


def square(x):
    out = _result(x.data * x.data, (x,), "square")
    out._backward = lambda g: (2.0 * g * x.data,)
    return out


def abs_(x):
    sign = _branch("abs", np.sign(x.data))
    out = _result(sign * x.data, (x,), "abs")
    out._backward = lambda g: (g * sign,)
    return out


# ----------------------------------------------------------------------
# activations
# ----------------------------------------------------------------------
def leaky_relu(x, slope=LEAKY_SLOPE):
    if not 0.0 < slope < 1.0:
        raise ValueError(f"leaky slope must lie in (0, 1), got {slope}")
    pos = _branch("leaky_relu", x.data >= 0)
    out = _result(np.where(pos, x.data, slope * x.data), (x,), "leaky_relu")
    out._backward = lambda g: (np.where(pos, g, slope * g),)
    return out


def sigmoid(x):
    z = x.data
    # two-branch form never exponentiates a positive number
    e = np.exp(-np.abs(z))
    s = np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(z.dtype)
    # saturated values would round onto 0 or 1; keep the range open
    info = np.finfo(z.dtype)
    s = np.clip(s, info.tiny, np.nextafter(z.dtype.type(1), z.dtype.type(0)))
    out = _result(s, (x,), "sigmoid")
    out._backward = lambda g: (g * s * (1.0 - s),)
    return out


# ----------------------------------------------------------------------
# reductions and pooling
# ----------------------------------------------------------------------
def sum_(x):
    out = _result(x.data.sum(dtype=x.dtype).reshape(1, 1, 1, 1), (x,), "sum")
    out._backward = lambda g: (np.broadcast_to(g.reshape(()), x.shape).copy(),)
    return out


def mean(x):
    n = x.data.size
    out = _result((x.data.sum(dtype=np.float64) / n).astype(x.dtype).reshape(1, 1, 1, 1),
                  (x,), "mean")
    out._backward = lambda g: (np.full(x.shape, g.reshape(()) / n, dtype=x.dtype),)
    return out


def global_avg_pool(x):
    """Mean over the spatial axes: (N, C, H, W) -> (N, C, 1, 1)."""
    hw = x.shape[2] * x.shape[3]
    out = _result(x.data.mean(axis=(2, 3), keepdims=True), (x,), "global_avg_pool")
    out._backward = lambda g: (np.broadcast_to(g / hw, x.shape).copy(),)
    return out


def channel_pool(x, mode):
    """Mean or max across channels: (N, C, H, W) -> (N, 1, H, W).

    The max gradient goes to the lowest-index channel among ties.
    """
    if mode == "avg":
        c = x.shape[1]
        out = _result(x.data.mean(axis=1, keepdims=True), (x,), "channel_avg")
        out._backward = lambda g: (np.broadcast_to(g / c, x.shape).copy(),)
        return out
    if mode == "max":
        idx = _branch("channel_max", np.argmax(x.data, axis=1)[:, None])  # argmax returns the first maximum
        out = _result(np.take_along_axis(x.data, idx, axis=1), (x,), "channel_max")

        def bw(g):
            gx = np.zeros_like(x.data)
            np.put_along_axis(gx, idx, g, axis=1)
            return (gx,)

        out._backward = bw
        return out
    raise ValueError(f"channel_pool mode must be 'avg' or 'max', got {mode!r}")


# ----------------------------------------------------------------------
# structural ops
# ----------------------------------------------------------------------
def _concat(xs, axis, op):
    if not xs:
        raise ShapeError("nothing to concatenate")
    ref = xs[0].shape
    for x in xs[1:]:
        for ax in range(4):
            if ax != axis and x.shape[ax] != ref[ax]:
                raise ShapeError(f"cannot concatenate {ref} and {x.shape} along axis {axis}")
    if len({x.dtype for x in xs}) != 1:
        raise TypeError("mixed-precision concatenation")
    out = _result(np.concatenate([x.data for x in xs], axis=axis), xs, op)
    bounds = np.cumsum([x.shape[axis] for x in xs])[:-1]
    out._backward = lambda g: tuple(np.split(g, bounds, axis=axis))
    return out


def concat_channels(xs):
    return _concat(list(xs), 1, "concat_channels")


def concat_batch(xs):
    return _concat(list(xs), 0, "concat_batch")


def _slice(x, axis, start, stop):
    sl = [slice(None)] * 4
    sl[axis] = slice(start, stop)
    sl = tuple(sl)
    out = _result(x.data[sl], (x,), "slice")

    def bw(g):
        gx = np.zeros_like(x.data)
        gx[sl] = g
        return (gx,)

    out._backward = bw
    return out


def split_batch(x, sizes):
    """Inverse of :func:`concat_batch` for the given per-part batch sizes."""
    if sum(sizes) != x.shape[0]:
        raise ShapeError(f"sizes {sizes} do not add up to batch {x.shape[0]}")
    parts, start = [], 0
    for s in sizes:
        parts.append(_slice(x, 0, start, start + s))
        start += s
    return parts


def split_channels(x, sizes):
    if sum(sizes) != x.shape[1]:
        raise ShapeError(f"sizes {sizes} do not add up to {x.shape[1]} channels")
    parts, start = [], 0
    for s in sizes:
        parts.append(_slice(x, 1, start, start + s))
        start += s
    return parts


def reshape(x, shape):
    out = _result(x.data.reshape(shape), (x,), "reshape")
    out._backward = lambda g: (g.reshape(x.shape),)
    return out


def softmax_over_set(xs):
    """Softmax across K same-shaped tensors, independently at every element."""
    xs = list(xs)
    if len(xs) < 2:
        raise ValueError(f"softmax over a set needs K >= 2 tensors, got {len(xs)}")
    for x in xs[1:]:
        if x.shape != xs[0].shape:
            raise ShapeError(f"set members differ in shape: {xs[0].shape} vs {x.shape}")
    stacked = np.stack([x.data for x in xs])
    e = np.exp(stacked - stacked.max(axis=0, keepdims=True))
    p = e / e.sum(axis=0, keepdims=True)
    outs = []
    for k in range(len(xs)):
        out = _result(p[k], xs, "softmax_over_set")

        def bw(g, k=k):
            # d p_k / d x_j = p_k (delta_kj - p_j)
            return tuple(g * p[k] * ((1.0 if j == k else 0.0) - p[j]) for j in range(len(xs)))

        out._backward = bw
        outs.append(out)
    return outs


# ----------------------------------------------------------------------
# convolution
# ----------------------------------------------------------------------
def _pad_channels_last(a, padding):
    # (N, C, H, W) -> zero-padded (N, H + 2p, W + 2p, C)
    n, c, h, w = a.shape
    out = np.zeros((n, h + 2 * padding, w + 2 * padding, c), dtype=a.dtype)
    out[:, padding:padding + h, padding:padding + w, :] = a.transpose(0, 2, 3, 1)
    return out


def conv2d(x, weight, bias=None, padding=0):
    """Stride-1 cross-correlation of ``x`` (N, I, H, W) with ``weight`` (O, I, kh, kw).

    The padded input is stored channels-last and flattened to rows; the tap at
    offset (dy, dx) then reads one contiguous block of rows shifted by
    ``dy * Wp + dx``, so each tap is a single GEMM without an im2col copy.
    Rows landing in the padding columns are computed and discarded.
    """
    n, c, h, w = x.shape
    o, i, kh, kw = weight.shape
    if c != i:
        raise ShapeError(f"input has {c} channels but kernel expects {i}")
    if padding < 0:
        raise ValueError("padding must be non-negative")
    h_out = h + 2 * padding - kh + 1
    w_out = w + 2 * padding - kw + 1
    if h_out < 1 or w_out < 1:
        raise ShapeError(f"kernel {kh}x{kw} does not fit input {h}x{w} with padding {padding}")
    if bias is not None and bias.data.size != o:
        raise ShapeError(f"bias has {bias.data.size} entries for {o} output channels")

    xp = _pad_channels_last(x.data, padding)
    hp, wp = xp.shape[1], xp.shape[2]
    rows = n * hp * wp
    span = rows - ((kh - 1) * wp + (kw - 1))
    flat = xp.reshape(rows, c)
    taps = [(dy, dx, dy * wp + dx) for dy in range(kh) for dx in range(kw)]
    kern = weight.data
    # per-tap (C, O) blocks, contiguous so matmul stays on the BLAS path
    fwd_taps = np.ascontiguousarray(kern.transpose(2, 3, 1, 0))

    acc = np.zeros((rows, o), dtype=x.dtype)
    head = acc[:span]
    for dy, dx, off in taps:
        head += flat[off:off + span] @ fwd_taps[dy, dx]
    if bias is not None:
        head += bias.data.reshape(1, o)
    out = np.ascontiguousarray(acc.reshape(n, hp, wp, o)[:, :h_out, :w_out].transpose(0, 3, 1, 2))

    parents = (x, weight) if bias is None else (x, weight, bias)
    res = _result(out, parents, "conv2d")

    def bw(g):
        gfull = np.zeros((n, hp, wp, o), dtype=g.dtype)
        gfull[:, :h_out, :w_out, :] = g.transpose(0, 2, 3, 1)
        gflat = gfull.reshape(rows, o)[:span]
        gx = gw = None
        if x.requires_grad:
            bwd_taps = np.ascontiguousarray(kern.transpose(2, 3, 0, 1))
            gxp = np.zeros((rows, c), dtype=g.dtype)
            for dy, dx, off in taps:
                gxp[off:off + span] += gflat @ bwd_taps[dy, dx]
            gxp = gxp.reshape(n, hp, wp, c)[:, padding:padding + h, padding:padding + w]
            gx = np.ascontiguousarray(gxp.transpose(0, 3, 1, 2))
        if weight.requires_grad:
            gw = np.empty_like(kern)
            for dy, dx, off in taps:
                gw[:, :, dy, dx] = gflat.T @ flat[off:off + span]
            if CONV_BACKWARD_PERTURBATION:
                gw = gw + CONV_BACKWARD_PERTURBATION
        grads = [gx, gw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)).reshape(bias.shape))
        return tuple(grads)

    res._backward = bw
    return res


def same_padding(kernel_size):
    if kernel_size % 2 == 0:
        raise NotImplementedError(f"'same' padding is only defined for odd kernels, got {kernel_size}")
    return (kernel_size - 1) // 2


def gaussian_window(size, sigma):
    r = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(r * r) / (2.0 * sigma * sigma))
    return g / g.sum()


def _correlate_axis(a, taps, axis):
    k = len(taps)
    win = np.lib.stride_tricks.sliding_window_view(a, k, axis=axis)
    return win @ taps


def separable_filter(x, taps):
    """Depthwise 'valid' correlation with the outer product of ``taps`` with itself.

    Every channel is filtered independently; the output loses ``len(taps) - 1``
    rows and columns.
    """
    k = len(taps)
    if x.shape[2] < k or x.shape[3] < k:
        raise ShapeError(f"window {k}x{k} is larger than image {x.shape[2]}x{x.shape[3]}")
    taps = np.asarray(taps, dtype=x.dtype)
    out = _correlate_axis(_correlate_axis(x.data, taps, 2), taps, 3)
    res = _result(out, (x,), "separable_filter")
    flipped = taps[::-1].copy()

    def bw(g):
        # adjoint of valid correlation: full correlation with the flipped taps
        gp = np.pad(g, ((0, 0), (0, 0), (k - 1, k - 1), (k - 1, k - 1)))
        return (_correlate_axis(_correlate_axis(gp, flipped, 2), flipped, 3),)

    res._backward = bw
    return res
