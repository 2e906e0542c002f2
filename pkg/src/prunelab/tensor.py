"""Dense array kernels: matmul, 2d convolution with exact adjoints, reductions,
and shape-checked elementwise maps.

All kernels operate on row-major numpy arrays of dtype float32 or float64 and
validate operand shapes before touching data.  Binary elementwise ops do not
broadcast (scalars excepted); shape bugs should surface at the call site.

Convolution comes in two routes that must agree:

- ``conv2d_direct``: naive ascending-index loops, the correctness oracle.
- ``conv2d``: im2col + one big matmul, the fast path used by the layers.

Reductions delegate to numpy, whose pairwise summation is a fixed
deterministic reduction order: repeated calls on identical buffers are
bitwise equal.
"""

import numpy as np

from .errors import InputError, ShapeError

FLOAT_DTYPES = (np.float32, np.float64)


def _check_float(t, name="operand"):
    if t.dtype.type not in FLOAT_DTYPES:
        raise InputError(f"{name} must be float32 or float64, got {t.dtype}")


def _check_same_dtype(a, b):
    if a.dtype != b.dtype:
        raise ShapeError(f"dtype mismatch: {a.dtype} vs {b.dtype}")


def matmul(a, b):
    """Matrix product of a [m x k] and b [k x n]."""
    _check_float(a, "a")
    _check_same_dtype(a, b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-d operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner extents differ: {a.shape} x {b.shape}")
    return a @ b


def conv_output_size(extent, kernel, stride, padding):
    """Output extent of a convolution along one axis; errors if non-integral."""
    if stride < 1:
        raise InputError(f"stride must be positive, got {stride}")
    if padding < 0:
        raise InputError(f"padding must be non-negative, got {padding}")
    span = extent + 2 * padding - kernel
    if span < 0 or span % stride != 0:
        raise ShapeError(
            f"convolution output extent is not a positive integer: "
            f"extent={extent} kernel={kernel} stride={stride} padding={padding}"
        )
    return span // stride + 1


def _pad_input(x, padding):
    if padding == 0:
        return x
    n, c, h, w = x.shape
    xp = np.zeros((n, c, h + 2 * padding, w + 2 * padding), dtype=x.dtype)
    xp[:, :, padding : padding + h, padding : padding + w] = x
    return xp


def _check_conv_args(x, w):
    _check_float(x, "input")
    _check_same_dtype(x, w)
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d expects 4-d input/weight, got {x.shape} and {w.shape}")
    if x.shape[1] != w.shape[1]:
        raise ShapeError(
            f"conv2d channel mismatch: input {x.shape} has C={x.shape[1]}, "
            f"weight {w.shape} has C={w.shape[1]}"
        )


def im2col(x, kh, kw, stride, padding):
    """Unfold [N,C,H,W] into patch columns [N, C*kh*kw, Ho*Wo]."""
    n, c, h, w = x.shape
    ho = conv_output_size(h, kh, stride, padding)
    wo = conv_output_size(w, kw, stride, padding)
    xp = _pad_input(x, padding)
    cols = np.empty((n, c, kh, kw, ho, wo), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride]
    return cols.reshape(n, c * kh * kw, ho * wo)


def col2im(cols, x_shape, kh, kw, stride, padding):
    """Adjoint of im2col: fold patch columns back, accumulating overlaps."""
    n, c, h, w = x_shape
    ho = conv_output_size(h, kh, stride, padding)
    wo = conv_output_size(w, kw, stride, padding)
    xp = np.zeros((n, c, h + 2 * padding, w + 2 * padding), dtype=cols.dtype)
    cols = cols.reshape(n, c, kh, kw, ho, wo)
    for i in range(kh):
        for j in range(kw):
            xp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += cols[:, :, i, j]
    if padding == 0:
        return xp
    return xp[:, :, padding : padding + h, padding : padding + w]


def conv2d(x, w, stride=1, padding=0):
    """Cross-correlate x [N,C,H,W] with w [F,C,kh,kw] -> [N,F,Ho,Wo].

    Zero padding, no kernel flip, no bias.  Fast path: im2col + matmul.
    """
    _check_conv_args(x, w)
    n = x.shape[0]
    f, _, kh, kw = w.shape
    ho = conv_output_size(x.shape[2], kh, stride, padding)
    wo = conv_output_size(x.shape[3], kw, stride, padding)
    cols = im2col(x, kh, kw, stride, padding)
    out = w.reshape(f, -1) @ cols  # [N, F, Ho*Wo] via batched matmul
    return out.reshape(n, f, ho, wo)


def conv2d_direct(x, w, stride=1, padding=0):
    """Reference convolution with explicit ascending-index loops.

    Slow; kept as the independent oracle for the im2col route.
    """
    _check_conv_args(x, w)
    n, c, h, wd = x.shape
    f, _, kh, kw = w.shape
    ho = conv_output_size(h, kh, stride, padding)
    wo = conv_output_size(wd, kw, stride, padding)
    xp = _pad_input(x, padding)
    out = np.zeros((n, f, ho, wo), dtype=x.dtype)
    for b in range(n):
        for o in range(f):
            for i in range(ho):
                for j in range(wo):
                    acc = x.dtype.type(0)
                    for ci in range(c):
                        for u in range(kh):
                            for v in range(kw):
                                acc += xp[b, ci, i * stride + u, j * stride + v] * w[o, ci, u, v]
                    out[b, o, i, j] = acc
    return out


def conv2d_backward(x, w, grad_output, stride=1, padding=0):
    """Exact adjoints of conv2d: returns (grad_input, grad_weight)."""
    _check_conv_args(x, w)
    f, c, kh, kw = w.shape
    n = x.shape[0]
    ho = conv_output_size(x.shape[2], kh, stride, padding)
    wo = conv_output_size(x.shape[3], kw, stride, padding)
    expect = (n, f, ho, wo)
    if grad_output.shape != expect:
        raise ShapeError(f"grad_output shape {grad_output.shape} != forward output {expect}")
    _check_same_dtype(x, grad_output)

    cols = im2col(x, kh, kw, stride, padding)  # [N, C*kh*kw, Ho*Wo]
    go = grad_output.reshape(n, f, ho * wo)
    # dW[f, :] = sum_n go[n, f] . cols[n].T
    grad_weight = np.einsum("nfp,ncp->fc", go, cols, optimize=True).reshape(f, c, kh, kw)
    # dcols[n] = W.T . go[n], then fold back
    grad_cols = np.einsum("fc,nfp->ncp", w.reshape(f, -1), go, optimize=True)
    grad_input = col2im(grad_cols, x.shape, kh, kw, stride, padding)
    return grad_input, grad_weight


_REDUCE_KINDS = ("sum", "mean", "max")


def reduce(t, axes=None, kind="sum"):
    """Reduce over the given axes (all axes when None) with a fixed order."""
    _check_float(t, "operand")
    if kind not in _REDUCE_KINDS:
        raise InputError(f"unknown reduction kind {kind!r}, expected one of {_REDUCE_KINDS}")
    if axes is None:
        axis = None
    else:
        axes = (axes,) if np.isscalar(axes) else tuple(axes)
        for a in axes:
            if not -t.ndim <= a < t.ndim:
                raise ShapeError(f"axis {a} out of range for shape {t.shape}")
        axis = axes
    if kind == "sum":
        return np.sum(t, axis=axis)
    if kind == "mean":
        return np.mean(t, axis=axis)
    return np.max(t, axis=axis)


def _check_binary(a, b, op):
    _check_float(a, "a")
    if np.isscalar(b):
        return
    _check_same_dtype(a, b)
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def add(a, b):
    """Elementwise a + b; b may be a scalar, otherwise shapes must match."""
    _check_binary(a, b, "add")
    return a + b


def mul(a, b):
    """Elementwise a * b; b may be a scalar, otherwise shapes must match."""
    _check_binary(a, b, "mul")
    return a * b


def absolute(t):
    _check_float(t)
    return np.abs(t)


def square(t):
    _check_float(t)
    return t * t


def scale(t, s):
    _check_float(t)
    return t * t.dtype.type(s)


def relu_mask(t):
    """1 where t > 0, else 0, in t's dtype (the ReLU derivative)."""
    _check_float(t)
    return (t > 0).astype(t.dtype)
