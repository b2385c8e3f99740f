"""Differentiable primitives and their save schedules.

Each primitive documents the arrays its backward rule retains; that schedule
is the single source of truth for activation accounting (the tape asserts the
declared count against the actual save list on every record).

Save schedule summary (elements retained per call):
    add, sub, scalar_mul, bias_add      nothing
    elementwise_mul                      both operands
    conv2d                               input and kernel
    relu                                 sign mask (one element per input element)
    fft2, ifft2                          nothing (unitary: adjoint is the inverse)
    mask_apply                           the mask
    complex_to_channels, channels_to_complex, reshape, sum_coils   nothing
    sum_real                             nothing
    sum_abs2                             the input
    l1_complex                           the residual (pred - target)

Complex gradients follow the real-pair convention of :mod:`.tape`: for a
complex-linear map ``y = T x`` the input gradient is ``T^H g``; conjugations
below come from that rule.
"""

from __future__ import annotations

import math

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..errors import ShapeError, UnsupportedSizeError
from .tape import Primitive, Tensor, register_primitive

_REAL = np.dtype(np.float64)
_COMPLEX = np.dtype(np.complex128)


def _shapes_equal(shapes):
    first = shapes[0]
    return all(s == first for s in shapes)


def _same_dtype(dtypes, op):
    if dtypes[0] != dtypes[1]:
        raise ShapeError(f"{op}: operand dtypes differ ({dtypes[0]} vs {dtypes[1]})")
    return dtypes[0]


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a broadcast gradient back to ``shape`` by summing."""
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(
        i for i, (gs, ss) in enumerate(zip(g.shape, shape)) if ss == 1 and gs != 1
    )
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------- add / sub

def _add_infer(shapes, dtypes, aux):
    if not _shapes_equal(shapes):
        raise ShapeError(f"add: shapes differ {shapes}")
    return shapes[0], _same_dtype(dtypes, "add")


register_primitive(Primitive(
    name="add",
    forward=lambda d, aux: d[0] + d[1],
    backward=lambda g, saved, aux, shp, dt: (g, g),
    infer=_add_infer,
    saves=lambda d, out, aux: [],
    saved_count=lambda shapes, aux: 0,
))

register_primitive(Primitive(
    name="sub",
    forward=lambda d, aux: d[0] - d[1],
    backward=lambda g, saved, aux, shp, dt: (g, -g),
    infer=lambda shapes, dtypes, aux: _add_infer(shapes, dtypes, aux),
    saves=lambda d, out, aux: [],
    saved_count=lambda shapes, aux: 0,
))


# ---------------------------------------------------------------- scalar_mul

def _scalar_mul_infer(shapes, dtypes, aux):
    c = complex(aux)
    if c.imag != 0.0 and dtypes[0] == _REAL:
        raise ShapeError("scalar_mul: complex scalar on a real tensor")
    return shapes[0], dtypes[0]


def _scalar_mul_backward(g, saved, aux, shapes, dtypes):
    c = complex(aux)
    if dtypes[0] == _REAL:
        return (c.real * g,)
    return (np.conj(c) * g,)


register_primitive(Primitive(
    name="scalar_mul",
    forward=lambda d, aux: (complex(aux).real if not np.iscomplexobj(d[0]) and complex(aux).imag == 0.0 else complex(aux)) * d[0],
    backward=_scalar_mul_backward,
    infer=_scalar_mul_infer,
    saves=lambda d, out, aux: [],
    saved_count=lambda shapes, aux: 0,
))


# ------------------------------------------------------------ elementwise_mul

def _mul_infer(shapes, dtypes, aux):
    dt = _same_dtype(dtypes, "elementwise_mul")
    try:
        out = np.broadcast_shapes(*shapes)
    except ValueError as exc:
        raise ShapeError(f"elementwise_mul: {exc}") from None
    return out, dt


def _mul_backward(g, saved, aux, shapes, dtypes):
    a, b = saved
    ga = _unbroadcast(g * np.conj(b), shapes[0])
    gb = _unbroadcast(g * np.conj(a), shapes[1])
    return ga, gb


register_primitive(Primitive(
    name="elementwise_mul",
    forward=lambda d, aux: d[0] * d[1],
    backward=_mul_backward,
    infer=_mul_infer,
    saves=lambda d, out, aux: [d[0], d[1]],
    saved_count=lambda shapes, aux: int(np.prod(shapes[0]) + np.prod(shapes[1])),
))


# ---------------------------------------------------------------- conv2d

def _conv2d_infer(shapes, dtypes, aux):
    xs, ks = shapes
    if dtypes[0] != _REAL or dtypes[1] != _REAL:
        raise ShapeError("conv2d operates on real (two-channel view) tensors")
    if len(xs) != 4 or len(ks) != 4:
        raise ShapeError(f"conv2d: need x(B,C,H,W), k(O,C,kh,kw); got {xs}, {ks}")
    b, c, h, w = xs
    o, ck, kh, kw = ks
    if ck != c:
        raise ShapeError(f"conv2d: channel mismatch ({c} vs kernel {ck})")
    if kh != kw or kh % 2 == 0:
        raise ShapeError("conv2d: kernels must be square with odd extent")
    return (b, o, h, w), _REAL


def _im2col(x: np.ndarray, s: int) -> np.ndarray:
    """Shifted copies of x: (B,C,H,W) -> (B, s*s*C, H*W), zero padded."""
    b, c, h, w = x.shape
    p = s // 2
    cols = np.zeros((b, s * s * c, h, w))
    i = 0
    for dp in range(-p, p + 1):
        for dq in range(-p, p + 1):
            ys, yd = (max(0, dp), max(0, -dp))
            xs, xd = (max(0, dq), max(0, -dq))
            cols[:, i * c:(i + 1) * c, yd:h - ys, xd:w - xs] = \
                x[:, :, ys:h - yd, xs:w - xd]
            i += 1
    return cols.reshape(b, s * s * c, h * w)


def conv2d_raw(x: np.ndarray, k: np.ndarray) -> np.ndarray:
    """Same-padded stride-1 2D convolution, (B,C,H,W) x (O,C,s,s) -> (B,O,H,W).

    im2col with batch-leading layout and one batched GEMM; faster than
    strided-window contractions at these shapes.
    """
    b, c, h, w = x.shape
    o, _, s, _ = k.shape
    k2 = k.transpose(0, 2, 3, 1).reshape(o, s * s * c)
    out = np.matmul(k2, _im2col(x, s))
    return out.reshape(b, o, h, w)


def conv2d_input_grad_raw(g: np.ndarray, k: np.ndarray) -> np.ndarray:
    """Adjoint of :func:`conv2d_raw` in its first argument."""
    kf = np.ascontiguousarray(k[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
    return conv2d_raw(g, kf)


def _conv2d_backward(g, saved, aux, shapes, dtypes):
    x, k = saved
    b, c, h, w = x.shape
    o, _, s, _ = k.shape
    cols = _im2col(x, s)  # (B, s*s*C, H*W)
    g2 = g.reshape(b, o, h * w)
    gk2 = np.matmul(g2, cols.transpose(0, 2, 1)).sum(axis=0)  # (O, s*s*C)
    gk = np.ascontiguousarray(
        gk2.reshape(o, s, s, c).transpose(0, 3, 1, 2)
    )
    gx = conv2d_input_grad_raw(g, k)
    return gx, gk


register_primitive(Primitive(
    name="conv2d",
    forward=lambda d, aux: conv2d_raw(d[0], d[1]),
    backward=_conv2d_backward,
    infer=_conv2d_infer,
    saves=lambda d, out, aux: [d[0], d[1]],
    saved_count=lambda shapes, aux: int(np.prod(shapes[0]) + np.prod(shapes[1])),
))


# ---------------------------------------------------------------- bias_add

def _bias_add_infer(shapes, dtypes, aux):
    xs, bs = shapes
    if dtypes[0] != _REAL or dtypes[1] != _REAL:
        raise ShapeError("bias_add operates on real tensors")
    if len(xs) != 4 or len(bs) != 1 or bs[0] != xs[1]:
        raise ShapeError(f"bias_add: x(B,C,H,W) with b(C,); got {xs}, {bs}")
    return xs, _REAL


register_primitive(Primitive(
    name="bias_add",
    forward=lambda d, aux: d[0] + d[1][None, :, None, None],
    backward=lambda g, saved, aux, shp, dt: (g, g.sum(axis=(0, 2, 3))),
    infer=_bias_add_infer,
    saves=lambda d, out, aux: [],
    saved_count=lambda shapes, aux: 0,
))


# ---------------------------------------------------------------- relu

def _relu_infer(shapes, dtypes, aux):
    if dtypes[0] != _REAL:
        raise ShapeError("relu applies to the real two-channel view only")
    return shapes[0], _REAL


register_primitive(Primitive(
    name="relu",
    forward=lambda d, aux: np.maximum(d[0], 0.0),
    backward=lambda g, saved, aux, shp, dt: (g * saved[0],),
    infer=_relu_infer,
    saves=lambda d, out, aux: [(d[0] > 0).astype(np.float64)],
    saved_count=lambda shapes, aux: int(np.prod(shapes[0])),
))


# ---------------------------------------------------------------- fft2/ifft2

def _pow2(n: int) -> bool:
    return n > 0 and (n & (n - 1)) == 0


def _fft_infer(shapes, dtypes, aux):
    xs = shapes[0]
    if dtypes[0] != _COMPLEX:
        raise ShapeError("fft2/ifft2 operate on complex tensors")
    if len(xs) < 2:
        raise ShapeError("fft2/ifft2 need at least two dimensions")
    h, w = xs[-2], xs[-1]
    if not (_pow2(h) and _pow2(w)):
        raise UnsupportedSizeError(f"fft2/ifft2 extents must be powers of two, got {h}x{w}")
    return xs, _COMPLEX


def fft2_raw(x: np.ndarray) -> np.ndarray:
    return np.fft.fft2(x, axes=(-2, -1), norm="ortho")


def ifft2_raw(x: np.ndarray) -> np.ndarray:
    return np.fft.ifft2(x, axes=(-2, -1), norm="ortho")


register_primitive(Primitive(
    name="fft2",
    forward=lambda d, aux: fft2_raw(d[0]),
    backward=lambda g, saved, aux, shp, dt: (ifft2_raw(g),),
    infer=_fft_infer,
    saves=lambda d, out, aux: [],
    saved_count=lambda shapes, aux: 0,
))

register_primitive(Primitive(
    name="ifft2",
    forward=lambda d, aux: ifft2_raw(d[0]),
    backward=lambda g, saved, aux, shp, dt: (fft2_raw(g),),
    infer=_fft_infer,
    saves=lambda d, out, aux: [],
    saved_count=lambda shapes, aux: 0,
))


# ---------------------------------------------------------------- mask_apply

def _mask_infer(shapes, dtypes, aux):
    xs = shapes[0]
    mask = np.asarray(aux)
    if dtypes[0] != _COMPLEX:
        raise ShapeError("mask_apply operates on complex k-space tensors")
    if xs[-2:] != mask.shape:
        raise ShapeError(f"mask_apply: trailing extents {xs[-2:]} != mask {mask.shape}")
    return xs, _COMPLEX


register_primitive(Primitive(
    name="mask_apply",
    forward=lambda d, aux: d[0] * np.asarray(aux),
    backward=lambda g, saved, aux, shp, dt: (g * saved[0],),
    infer=_mask_infer,
    saves=lambda d, out, aux: [np.asarray(aux)],
    saved_count=lambda shapes, aux: int(np.asarray(aux).size),
))


# ------------------------------------------------- complex <-> channel views

def _c2ch_infer(shapes, dtypes, aux):
    xs = shapes[0]
    if dtypes[0] != _COMPLEX:
        raise ShapeError("complex_to_channels expects a complex tensor")
    if len(xs) != 3:
        raise ShapeError(f"complex_to_channels expects (B,H,W), got {xs}")
    return (xs[0], 2, xs[1], xs[2]), _REAL


register_primitive(Primitive(
    name="complex_to_channels",
    forward=lambda d, aux: np.stack([d[0].real, d[0].imag], axis=1),
    backward=lambda g, saved, aux, shp, dt: (g[:, 0] + 1j * g[:, 1],),
    infer=_c2ch_infer,
    saves=lambda d, out, aux: [],
    saved_count=lambda shapes, aux: 0,
))


def _ch2c_infer(shapes, dtypes, aux):
    xs = shapes[0]
    if dtypes[0] != _REAL:
        raise ShapeError("channels_to_complex expects a real tensor")
    if len(xs) != 4 or xs[1] != 2:
        raise ShapeError(f"channels_to_complex expects (B,2,H,W), got {xs}")
    return (xs[0], xs[2], xs[3]), _COMPLEX


register_primitive(Primitive(
    name="channels_to_complex",
    forward=lambda d, aux: d[0][:, 0] + 1j * d[0][:, 1],
    backward=lambda g, saved, aux, shp, dt: (
        np.stack([g.real, g.imag], axis=1),
    ),
    infer=_ch2c_infer,
    saves=lambda d, out, aux: [],
    saved_count=lambda shapes, aux: 0,
))


# ---------------------------------------------------------------- reshape

def _reshape_infer(shapes, dtypes, aux):
    new = tuple(aux)
    if int(np.prod(shapes[0])) != int(np.prod(new)):
        raise ShapeError(f"reshape: cannot reshape {shapes[0]} to {new}")
    return new, dtypes[0]


register_primitive(Primitive(
    name="reshape",
    forward=lambda d, aux: d[0].reshape(tuple(aux)),
    backward=lambda g, saved, aux, shp, dt: (g.reshape(shp[0]),),
    infer=_reshape_infer,
    saves=lambda d, out, aux: [],
    saved_count=lambda shapes, aux: 0,
))


# ---------------------------------------------------------------- sum_coils

def _sum_coils_infer(shapes, dtypes, aux):
    xs = shapes[0]
    if len(xs) != 4:
        raise ShapeError(f"sum_coils expects (B,C,H,W), got {xs}")
    return (xs[0], xs[2], xs[3]), dtypes[0]


register_primitive(Primitive(
    name="sum_coils",
    forward=lambda d, aux: d[0].sum(axis=1),
    backward=lambda g, saved, aux, shp, dt: (
        np.broadcast_to(g[:, None], shp[0]),
    ),
    infer=_sum_coils_infer,
    saves=lambda d, out, aux: [],
    saved_count=lambda shapes, aux: 0,
))


# ------------------------------------------------------------- scalar reducers

register_primitive(Primitive(
    name="sum_real",
    forward=lambda d, aux: np.asarray(d[0].sum().real),
    backward=lambda g, saved, aux, shp, dt: (
        np.full(shp[0], complex(g)) if dt[0] == _COMPLEX else np.full(shp[0], float(g)),
    ),
    infer=lambda shapes, dtypes, aux: ((), _REAL),
    saves=lambda d, out, aux: [],
    saved_count=lambda shapes, aux: 0,
))

register_primitive(Primitive(
    name="sum_abs2",
    forward=lambda d, aux: np.asarray(
        float(np.sum(d[0].real ** 2 + d[0].imag ** 2)) if np.iscomplexobj(d[0])
        else float(np.sum(d[0] ** 2))
    ),
    backward=lambda g, saved, aux, shp, dt: (2.0 * float(g) * saved[0],),
    infer=lambda shapes, dtypes, aux: ((), _REAL),
    saves=lambda d, out, aux: [d[0]],
    saved_count=lambda shapes, aux: int(np.prod(shapes[0])),
))


# ---------------------------------------------------------------- l1_complex

def _l1_infer(shapes, dtypes, aux):
    if not _shapes_equal(shapes):
        raise ShapeError(f"l1_complex: shapes differ {shapes}")
    _same_dtype(dtypes, "l1_complex")
    return (), _REAL


def _l1_backward(g, saved, aux, shapes, dtypes):
    diff = saved[0]
    mag = np.abs(diff)
    with np.errstate(invalid="ignore", divide="ignore"):
        unit = np.where(mag > 0, diff / np.where(mag > 0, mag, 1.0), 0.0)
    gp = (float(g) / diff.size) * unit
    return gp, -gp


register_primitive(Primitive(
    name="l1_complex",
    forward=lambda d, aux: np.asarray(float(np.mean(np.abs(d[0] - d[1])))),
    backward=_l1_backward,
    infer=_l1_infer,
    saves=lambda d, out, aux: [d[0] - d[1]],
    saved_count=lambda shapes, aux: int(np.prod(shapes[0])),
))


# ------------------------------------------------------------ functional API

def _tape_of(*tensors):
    return tensors[0].tape


def add(a: Tensor, b: Tensor) -> Tensor:
    return _tape_of(a).record("add", (a, b))


def sub(a: Tensor, b: Tensor) -> Tensor:
    return _tape_of(a).record("sub", (a, b))


def scalar_mul(c, x: Tensor) -> Tensor:
    return _tape_of(x).record("scalar_mul", (x,), aux=c)


def elementwise_mul(a: Tensor, b: Tensor) -> Tensor:
    return _tape_of(a).record("elementwise_mul", (a, b))


def conv2d(x: Tensor, k: Tensor) -> Tensor:
    return _tape_of(x).record("conv2d", (x, k))


def bias_add(x: Tensor, b: Tensor) -> Tensor:
    return _tape_of(x).record("bias_add", (x, b))


def relu(x: Tensor) -> Tensor:
    return _tape_of(x).record("relu", (x,))


def fft2(x: Tensor) -> Tensor:
    return _tape_of(x).record("fft2", (x,))


def ifft2(x: Tensor) -> Tensor:
    return _tape_of(x).record("ifft2", (x,))


def mask_apply(x: Tensor, mask: np.ndarray) -> Tensor:
    return _tape_of(x).record("mask_apply", (x,), aux=mask)


def complex_to_channels(x: Tensor) -> Tensor:
    return _tape_of(x).record("complex_to_channels", (x,))


def channels_to_complex(x: Tensor) -> Tensor:
    return _tape_of(x).record("channels_to_complex", (x,))


def reshape(x: Tensor, shape) -> Tensor:
    return _tape_of(x).record("reshape", (x,), aux=tuple(shape))


def sum_coils(x: Tensor) -> Tensor:
    return _tape_of(x).record("sum_coils", (x,))


def sum_real(x: Tensor) -> Tensor:
    return _tape_of(x).record("sum_real", (x,))


def sum_abs2(x: Tensor) -> Tensor:
    return _tape_of(x).record("sum_abs2", (x,))


def l1_complex(pred: Tensor, target: Tensor) -> Tensor:
    return _tape_of(pred).record("l1_complex", (pred, target))
