"""Differentiable primitives over 4-D tensors.

Each op validates shapes, computes the forward result with numpy, and
registers a VJP that is itself composed of these same primitives.  That
closure property is what makes backward(create_graph=True) produce a
differentiable gradient without any op-specific second-derivative code.

Linear ops come in mutually adjoint pairs (pad_zero/crop, dilate/undilate,
upsample_nearest/sum_pool, broadcast_to4/sum_to4, reflect_pad/reflect_fold,
slice_channels/pad_channels), so the reverse pass of a reverse pass stays
inside the primitive set.
"""

from __future__ import annotations

from typing import Callable

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .core import ParamError, ShapeError, Tensor, record

__all__ = [
    "add", "sub", "neg", "mul", "scale", "add_scalar", "absolute", "square",
    "sqrt", "reciprocal", "leaky_relu", "conv2d", "pad_zero", "crop",
    "dilate", "undilate", "swap01", "flip_hw", "concat_channels",
    "slice_channels", "pad_channels", "upsample_nearest", "sum_pool",
    "reshape4", "broadcast_to4", "sum_to4", "reflect_pad", "reflect_fold",
    "sum_all", "mean_all", "gaussian_kernel", "gaussian_filter", "OP_CASES",
]


def _check_same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: operand shapes {a.shape} and {b.shape} differ")
    if a.dtype != b.dtype:
        raise ShapeError(f"{op}: operand dtypes {a.dtype} and {b.dtype} differ")


def _c(value: float, t: Tensor):
    """Scalar cast that keeps elementwise math in the tensor's dtype."""
    return t.data.dtype.type(value)


# ---------------------------------------------------------------------------
# elementwise


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape("add", a, b)

    def vjp(g, want):
        return (g if want[0] else None, g if want[1] else None)

    return record("add", a.data + b.data, (a, b), vjp)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape("sub", a, b)

    def vjp(g, want):
        return (g if want[0] else None, neg(g) if want[1] else None)

    return record("sub", a.data - b.data, (a, b), vjp)


def neg(a: Tensor) -> Tensor:
    def vjp(g, want):
        return (neg(g),)

    return record("neg", -a.data, (a,), vjp)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape("mul", a, b)

    def vjp(g, want):
        return (mul(g, b) if want[0] else None, mul(g, a) if want[1] else None)

    return record("mul", a.data * b.data, (a, b), vjp)


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)

    def vjp(g, want):
        return (scale(g, c),)

    return record("scale", a.data * _c(c, a), (a,), vjp)


def add_scalar(a: Tensor, c: float) -> Tensor:
    c = float(c)

    def vjp(g, want):
        return (g,)

    return record("add_scalar", a.data + _c(c, a), (a,), vjp)


def absolute(a: Tensor) -> Tensor:
    def vjp(g, want):
        sign = Tensor(np.sign(a.data))
        return (mul(g, sign),)

    return record("absolute", np.abs(a.data), (a,), vjp)


def square(a: Tensor) -> Tensor:
    def vjp(g, want):
        return (scale(mul(g, a), 2.0),)

    return record("square", a.data * a.data, (a,), vjp)


def sqrt(a: Tensor) -> Tensor:
    def vjp(g, want):
        # Recompute sqrt(a) through the ops so the VJP stays differentiable
        # in a; caching the forward value would lose the second-order term.
        return (mul(g, reciprocal(scale(sqrt(a), 2.0))),)

    return record("sqrt", np.sqrt(a.data), (a,), vjp)


def reciprocal(a: Tensor) -> Tensor:
    def vjp(g, want):
        return (neg(mul(g, square(reciprocal(a)))),)

    return record("reciprocal", np.reciprocal(a.data), (a,), vjp)


def leaky_relu(a: Tensor, slope: float = 0.2) -> Tensor:
    if slope < 0:
        raise ParamError(f"leaky_relu: slope must be non-negative, got {slope}")
    out_data = np.where(a.data >= 0, a.data, a.data * _c(slope, a))

    def vjp(g, want):
        mask = Tensor(np.where(a.data >= 0, _c(1.0, a), _c(slope, a)))
        return (mul(g, mask),)

    return record("leaky_relu", out_data, (a,), vjp)


# ---------------------------------------------------------------------------
# structure: padding, cropping, resampling, layout


def _check_pads(op: str, pads) -> tuple[int, int, int, int]:
    t, b, l, r = (int(v) for v in pads)
    if min(t, b, l, r) < 0:
        raise ParamError(f"{op}: negative amount in (top={t}, bottom={b}, left={l}, right={r})")
    return t, b, l, r


def pad_zero(a: Tensor, top: int, bottom: int, left: int, right: int) -> Tensor:
    t, b, l, r = _check_pads("pad_zero", (top, bottom, left, right))
    out_data = np.pad(a.data, ((0, 0), (0, 0), (t, b), (l, r)))

    def vjp(g, want):
        return (crop(g, t, b, l, r),)

    return record("pad_zero", out_data, (a,), vjp)


def crop(a: Tensor, top: int, bottom: int, left: int, right: int) -> Tensor:
    t, b, l, r = _check_pads("crop", (top, bottom, left, right))
    N, C, H, W = a.shape
    if t + b >= H or l + r >= W:
        raise ShapeError(f"crop: amounts ({t},{b},{l},{r}) consume input of shape {a.shape}")
    out_data = a.data[:, :, t : H - b, l : W - r]

    def vjp(g, want):
        return (pad_zero(g, t, b, l, r),)

    return record("crop", out_data, (a,), vjp)


def dilate(a: Tensor, stride: int) -> Tensor:
    s = int(stride)
    if s < 1:
        raise ParamError(f"dilate: stride must be >= 1, got {stride}")
    N, C, H, W = a.shape
    out_data = np.zeros((N, C, (H - 1) * s + 1, (W - 1) * s + 1), dtype=a.dtype)
    out_data[:, :, ::s, ::s] = a.data

    def vjp(g, want):
        return (undilate(g, s),)

    return record("dilate", out_data, (a,), vjp)


def undilate(a: Tensor, stride: int) -> Tensor:
    s = int(stride)
    if s < 1:
        raise ParamError(f"undilate: stride must be >= 1, got {stride}")
    N, C, H, W = a.shape
    if (H - 1) % s or (W - 1) % s:
        raise ShapeError(f"undilate: extents of {a.shape} are not (m*{s}+1) sized")
    out_data = np.ascontiguousarray(a.data[:, :, ::s, ::s])

    def vjp(g, want):
        return (dilate(g, s),)

    return record("undilate", out_data, (a,), vjp)


def swap01(a: Tensor) -> Tensor:
    def vjp(g, want):
        return (swap01(g),)

    return record("swap01", np.swapaxes(a.data, 0, 1), (a,), vjp)


def flip_hw(a: Tensor) -> Tensor:
    def vjp(g, want):
        return (flip_hw(g),)

    return record("flip_hw", a.data[:, :, ::-1, ::-1], (a,), vjp)


def concat_channels(*parts: Tensor) -> Tensor:
    if not parts:
        raise ParamError("concat_channels: needs at least one input")
    first = parts[0]
    for p in parts[1:]:
        if (p.shape[0], p.shape[2], p.shape[3]) != (first.shape[0], first.shape[2], first.shape[3]):
            raise ShapeError(
                f"concat_channels: shapes {first.shape} and {p.shape} differ outside channels"
            )
        if p.dtype != first.dtype:
            raise ShapeError(f"concat_channels: dtypes {first.dtype} and {p.dtype} differ")
    bounds = np.cumsum([0] + [p.shape[1] for p in parts])

    def vjp(g, want):
        return tuple(
            slice_channels(g, int(bounds[i]), int(bounds[i + 1])) if want[i] else None
            for i in range(len(parts))
        )

    return record("concat_channels", np.concatenate([p.data for p in parts], axis=1), parts, vjp)


def slice_channels(a: Tensor, lo: int, hi: int) -> Tensor:
    C = a.shape[1]
    if not (0 <= lo < hi <= C):
        raise ShapeError(f"slice_channels: range [{lo}, {hi}) invalid for {C} channels")

    def vjp(g, want):
        return (pad_channels(g, lo, C - hi),)

    return record("slice_channels", np.ascontiguousarray(a.data[:, lo:hi]), (a,), vjp)


def pad_channels(a: Tensor, before: int, after: int) -> Tensor:
    if before < 0 or after < 0:
        raise ParamError(f"pad_channels: negative amount ({before}, {after})")
    C = a.shape[1]

    def vjp(g, want):
        return (slice_channels(g, before, before + C),)

    out_data = np.pad(a.data, ((0, 0), (before, after), (0, 0), (0, 0)))
    return record("pad_channels", out_data, (a,), vjp)


def upsample_nearest(a: Tensor, factor: int) -> Tensor:
    f = int(factor)
    if f < 1:
        raise ParamError(f"upsample_nearest: factor must be >= 1, got {factor}")
    out_data = np.repeat(np.repeat(a.data, f, axis=2), f, axis=3)

    def vjp(g, want):
        return (sum_pool(g, f),)

    return record("upsample_nearest", out_data, (a,), vjp)


def sum_pool(a: Tensor, factor: int) -> Tensor:
    f = int(factor)
    if f < 1:
        raise ParamError(f"sum_pool: factor must be >= 1, got {factor}")
    N, C, H, W = a.shape
    if H % f or W % f:
        raise ShapeError(f"sum_pool: spatial extents of {a.shape} not divisible by {f}")
    out_data = a.data.reshape(N, C, H // f, f, W // f, f).sum(axis=(3, 5))

    def vjp(g, want):
        return (upsample_nearest(g, f),)

    return record("sum_pool", out_data, (a,), vjp)


def reshape4(a: Tensor, shape) -> Tensor:
    shape = tuple(int(v) for v in shape)
    if len(shape) != 4:
        raise ShapeError(f"reshape4: target {shape} is not 4-D")
    if int(np.prod(shape)) != a.size:
        raise ShapeError(f"reshape4: cannot view {a.shape} as {shape}")
    src = a.shape

    def vjp(g, want):
        return (reshape4(g, src),)

    return record("reshape4", a.data.reshape(shape), (a,), vjp)


def broadcast_to4(a: Tensor, shape) -> Tensor:
    shape = tuple(int(v) for v in shape)
    if len(shape) != 4:
        raise ShapeError(f"broadcast_to4: target {shape} is not 4-D")
    for da, dt in zip(a.shape, shape):
        if da != dt and da != 1:
            raise ShapeError(f"broadcast_to4: cannot broadcast {a.shape} to {shape}")
    src = a.shape

    def vjp(g, want):
        return (sum_to4(g, src),)

    return record("broadcast_to4", np.broadcast_to(a.data, shape), (a,), vjp)


def sum_to4(a: Tensor, shape) -> Tensor:
    shape = tuple(int(v) for v in shape)
    if len(shape) != 4:
        raise ShapeError(f"sum_to4: target {shape} is not 4-D")
    axes = []
    for i, (da, dt) in enumerate(zip(a.shape, shape)):
        if dt == da:
            continue
        if dt == 1:
            axes.append(i)
        else:
            raise ShapeError(f"sum_to4: cannot reduce {a.shape} to {shape}")
    out_data = a.data.sum(axis=tuple(axes), keepdims=True) if axes else a.data.copy()
    src = a.shape

    def vjp(g, want):
        return (broadcast_to4(g, src),)

    return record("sum_to4", out_data, (a,), vjp)


def reflect_pad(a: Tensor, pad: int) -> Tensor:
    p = int(pad)
    if p < 0:
        raise ParamError(f"reflect_pad: negative pad {pad}")
    N, C, H, W = a.shape
    if p > H - 1 or p > W - 1:
        raise ShapeError(f"reflect_pad: pad {p} too large for spatial extents of {a.shape}")
    out_data = np.pad(a.data, ((0, 0), (0, 0), (p, p), (p, p)), mode="reflect")

    def vjp(g, want):
        return (reflect_fold(g, p),)

    return record("reflect_pad", out_data, (a,), vjp)


def _fold_axis(arr: np.ndarray, p: int, axis: int) -> np.ndarray:
    """Adjoint of single-axis reflect padding: fold the margins back in."""
    if p == 0:
        return arr

    def ix(s):
        return tuple(s if i == axis else slice(None) for i in range(arr.ndim))

    n = arr.shape[axis] - 2 * p
    core = arr[ix(slice(p, p + n))].copy()
    head = arr[ix(slice(0, p))]
    core[ix(slice(1, p + 1))] += np.flip(head, axis=axis)
    tail = arr[ix(slice(p + n, p + n + p))]
    core[ix(slice(n - p - 1, n - 1))] += np.flip(tail, axis=axis)
    return core


def reflect_fold(a: Tensor, pad: int) -> Tensor:
    p = int(pad)
    if p < 0:
        raise ParamError(f"reflect_fold: negative pad {pad}")
    N, C, H, W = a.shape
    if H - 2 * p < p + 1 or W - 2 * p < p + 1:
        raise ShapeError(f"reflect_fold: pad {p} inconsistent with shape {a.shape}")
    out_data = _fold_axis(_fold_axis(a.data, p, 3), p, 2)

    def vjp(g, want):
        return (reflect_pad(g, p),)

    return record("reflect_fold", out_data, (a,), vjp)


# ---------------------------------------------------------------------------
# convolution


def conv2d(
    x: Tensor,
    kernel: Tensor,
    bias: Tensor | None = None,
    stride: int = 1,
    padding: int = 0,
) -> Tensor:
    """Cross-correlation of (N, C, H, W) input with (Co, C, kh, kw) kernel.

    Symmetric zero padding, equal stride in both directions, optional bias
    of shape (1, Co, 1, 1).
    """
    s, p = int(stride), int(padding)
    if s < 1:
        raise ParamError(f"conv2d: stride must be >= 1, got {stride}")
    if p < 0:
        raise ParamError(f"conv2d: padding must be >= 0, got {padding}")
    N, C, H, W = x.shape
    Co, Ck, kh, kw = kernel.shape
    if Ck != C:
        raise ShapeError(
            f"conv2d: kernel expects {Ck} input channels, input of shape {x.shape} has {C}"
        )
    if kh > H + 2 * p or kw > W + 2 * p:
        raise ShapeError(f"conv2d: kernel {kernel.shape} larger than padded input {x.shape}")
    if x.dtype != kernel.dtype:
        raise ShapeError(f"conv2d: input dtype {x.dtype} differs from kernel dtype {kernel.dtype}")
    if bias is not None and bias.shape != (1, Co, 1, 1):
        raise ShapeError(f"conv2d: bias shape {bias.shape} is not (1, {Co}, 1, 1)")

    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p))) if p else x.data
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::s, ::s]
    out_data = np.tensordot(win, kernel.data, axes=([1, 4, 5], [1, 2, 3]))
    out_data = np.ascontiguousarray(np.moveaxis(out_data, 3, 1))
    if bias is not None:
        out_data = out_data + bias.data

    inputs = (x, kernel) if bias is None else (x, kernel, bias)

    def vjp(g, want):
        gx = _conv2d_input_grad(g, kernel, x.shape, s, p) if want[0] else None
        gk = _conv2d_kernel_grad(g, x, kernel.shape, s, p) if want[1] else None
        if bias is None:
            return (gx, gk)
        gb = sum_to4(g, bias.shape) if want[2] else None
        return (gx, gk, gb)

    return record("conv2d", out_data, inputs, vjp)


def _conv2d_input_grad(g: Tensor, kernel: Tensor, x_shape, s: int, p: int) -> Tensor:
    """Gradient w.r.t. the conv input: dilate by the stride, pad to full
    correlation extent, convolve with the channel-swapped flipped kernel."""
    kh, kw = kernel.shape[2], kernel.shape[3]
    H, W = x_shape[2], x_shape[3]
    gd = dilate(g, s) if s > 1 else g
    pt, pl = kh - 1 - p, kw - 1 - p
    pb = H + p - gd.shape[2]
    pr = W + p - gd.shape[3]
    padded = pad_zero(gd, max(pt, 0), max(pb, 0), max(pl, 0), max(pr, 0))
    if min(pt, pb, pl, pr) < 0:
        padded = crop(padded, max(-pt, 0), max(-pb, 0), max(-pl, 0), max(-pr, 0))
    return conv2d(padded, swap01(flip_hw(kernel)), stride=1, padding=0)


def _conv2d_kernel_grad(g: Tensor, x: Tensor, k_shape, s: int, p: int) -> Tensor:
    """Gradient w.r.t. the kernel: correlate the (padded) input with the
    dilated output gradient, batch and channel axes exchanged."""
    kh, kw = k_shape[2], k_shape[3]
    xp = pad_zero(x, p, p, p, p) if p else x
    gt = swap01(dilate(g, s) if s > 1 else g)
    o = conv2d(swap01(xp), gt, stride=1, padding=0)
    if o.shape[2] != kh or o.shape[3] != kw:
        o = crop(o, 0, o.shape[2] - kh, 0, o.shape[3] - kw)
    return swap01(o)


# ---------------------------------------------------------------------------
# reductions and the smoothing filter


def sum_all(a: Tensor) -> Tensor:
    return sum_to4(a, (1, 1, 1, 1))


def mean_all(a: Tensor) -> Tensor:
    return scale(sum_to4(a, (1, 1, 1, 1)), 1.0 / a.size)


def gaussian_kernel(size: int, sigma: float) -> np.ndarray:
    """Normalized 2-D Gaussian window as float64, sum exactly 1 up to 1e-12."""
    size = int(size)
    if size < 1 or size % 2 == 0:
        raise ParamError(f"gaussian_kernel: size must be odd and positive, got {size}")
    if not sigma > 0:
        raise ParamError(f"gaussian_kernel: sigma must be positive, got {sigma}")
    r = size // 2
    xs = np.arange(-r, r + 1, dtype=np.float64)
    w = np.exp(-(xs**2) / (2.0 * float(sigma) ** 2))
    k2 = np.outer(w, w)
    return k2 / k2.sum()


def gaussian_filter(x: Tensor, size: int = 11, sigma: float = 3.0) -> Tensor:
    """Depthwise Gaussian smoothing with reflect padding, differentiable."""
    k2 = gaussian_kernel(size, sigma)
    N, C, H, W = x.shape
    r = size // 2
    kern = Tensor(k2[None, None].astype(x.dtype))
    flat = reshape4(x, (N * C, 1, H, W))
    out = conv2d(reflect_pad(flat, r), kern, stride=1, padding=0)
    return reshape4(out, (N, C, H, W))


# ---------------------------------------------------------------------------
# gradient-check registry

# Each case builds fresh random inputs and returns (fn, inputs); the checker
# marks the inputs requires_grad, reduces fn(*inputs) to a scalar and compares
# reverse-mode gradients against central differences.  Keeping the registry
# next to the ops means a new differentiable op cannot be added without either
# registering a case or failing the coverage test.

def _u(rng, shape, lo, hi, dtype):
    return Tensor(rng.uniform(lo, hi, size=shape).astype(dtype))


def _signed(rng, shape, dtype, margin=0.1):
    mag = rng.uniform(margin, 1.0, size=shape)
    sgn = np.where(rng.random(shape) < 0.5, -1.0, 1.0)
    return Tensor((mag * sgn).astype(dtype))


def _case_binary(fn):
    def build(rng, dtype):
        shape = (2, 3, 4, 5)
        return fn, [_signed(rng, shape, dtype), _signed(rng, shape, dtype)]

    return build


def _case_unary(fn, lo=-1.0, hi=1.0, positive=False, margin=0.0):
    def build(rng, dtype):
        shape = (2, 2, 4, 5)
        if positive:
            t = _u(rng, shape, 0.3, 2.0, dtype)
        elif margin:
            t = _signed(rng, shape, dtype, margin)
        else:
            t = _u(rng, shape, lo, hi, dtype)
        return fn, [t]

    return build


def _case_conv(rng, dtype):
    s = int(rng.integers(1, 3))
    p = int(rng.integers(0, 3))
    kh = int(rng.integers(1, 5))
    kw = int(rng.integers(1, 5))
    C, Co = 2, 3
    H = kh + int(rng.integers(0, 4)) + max(0, -2 * p + 1)
    W = kw + int(rng.integers(0, 4)) + max(0, -2 * p + 1)
    x = _signed(rng, (2, C, H, W), dtype)
    k = _signed(rng, (Co, C, kh, kw), dtype)
    b = _signed(rng, (1, Co, 1, 1), dtype)
    return (lambda x_, k_, b_: conv2d(x_, k_, b_, stride=s, padding=p)), [x, k, b]


def _case_gaussian(rng, dtype):
    size = int(rng.choice([3, 5]))
    sigma = float(rng.uniform(0.6, 2.0))
    x = _signed(rng, (2, 2, 6, 7), dtype)
    return (lambda t: gaussian_filter(t, size=size, sigma=sigma)), [x]


OP_CASES: dict[str, Callable] = {
    "add": _case_binary(add),
    "sub": _case_binary(sub),
    "mul": _case_binary(mul),
    "neg": _case_unary(neg),
    "scale": _case_unary(lambda t: scale(t, -1.7)),
    "add_scalar": _case_unary(lambda t: add_scalar(t, 0.31)),
    "absolute": _case_unary(absolute, margin=0.15),
    "square": _case_unary(square),
    "sqrt": _case_unary(sqrt, positive=True),
    "reciprocal": _case_unary(reciprocal, positive=True),
    "leaky_relu": _case_unary(lambda t: leaky_relu(t, 0.2), margin=0.05),
    "conv2d": _case_conv,
    "pad_zero": _case_unary(lambda t: pad_zero(t, 1, 2, 0, 1)),
    "crop": _case_unary(lambda t: crop(t, 1, 1, 2, 0)),
    "dilate": _case_unary(lambda t: dilate(t, 2)),
    "undilate": lambda rng, dtype: (
        (lambda t: undilate(t, 2)),
        [_signed(rng, (2, 2, 5, 7), dtype)],
    ),
    "swap01": _case_unary(swap01),
    "flip_hw": _case_unary(flip_hw),
    "concat_channels": lambda rng, dtype: (
        concat_channels,
        [_signed(rng, (2, c, 3, 4), dtype) for c in (1, 3, 2)],
    ),
    "slice_channels": lambda rng, dtype: (
        (lambda t: slice_channels(t, 1, 3)),
        [_signed(rng, (2, 4, 3, 4), dtype)],
    ),
    "pad_channels": _case_unary(lambda t: pad_channels(t, 2, 1)),
    "upsample_nearest": _case_unary(lambda t: upsample_nearest(t, 2)),
    "sum_pool": lambda rng, dtype: (
        (lambda t: sum_pool(t, 2)),
        [_signed(rng, (2, 2, 4, 6), dtype)],
    ),
    "reshape4": _case_unary(lambda t: reshape4(t, (2, 4, 5, 2))),
    "broadcast_to4": lambda rng, dtype: (
        (lambda t: broadcast_to4(t, (2, 3, 4, 5))),
        [_signed(rng, (2, 1, 4, 1), dtype)],
    ),
    "sum_to4": lambda rng, dtype: (
        (lambda t: sum_to4(t, (2, 1, 4, 1))),
        [_signed(rng, (2, 3, 4, 5), dtype)],
    ),
    "reflect_pad": _case_unary(lambda t: reflect_pad(t, 2)),
    "reflect_fold": lambda rng, dtype: (
        (lambda t: reflect_fold(t, 1)),
        [_signed(rng, (2, 2, 7, 8), dtype)],
    ),
    "sum_all": _case_unary(sum_all),
    "mean_all": _case_unary(mean_all),
    "gaussian_filter": _case_gaussian,
}
