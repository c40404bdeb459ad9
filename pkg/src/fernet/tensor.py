"""Dense tensor storage and the primitive numeric kernels.

Tensors are contiguous row-major ``numpy.ndarray`` values.  Activations
use the (batch, channels, height, width) axis order throughout the
package.  The default element type is ``float32``; every kernel also
accepts ``float64`` inputs and preserves their type, which is what the
gradient-checking mode relies on.

All operations here are pure: inputs are never mutated, and repeated
calls on identical inputs are bitwise reproducible at BLAS parallelism 1.
"""

from __future__ import annotations

import numpy as np

from .errors import ShapeError

DEFAULT_DTYPE = np.float32


def zeros(shape, dtype=DEFAULT_DTYPE) -> np.ndarray:
    """Allocate an all-zero tensor of the given shape.

    Every extent must be a positive integer; an empty shape list or any
    extent <= 0 raises :class:`ShapeError`.
    """
    shape = tuple(int(s) for s in shape)
    if len(shape) == 0:
        raise ShapeError("tensor shape must have at least one extent")
    for s in shape:
        if s <= 0:
            raise ShapeError(f"tensor extents must be positive, got {shape}")
    return np.zeros(shape, dtype=dtype)


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product of two rank-2 tensors [m,k] x [k,n] -> [m,n]."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(
            f"matmul expects rank-2 operands, got ranks {a.ndim} and {b.ndim}"
        )
    if a.shape[1] != b.shape[0]:
        raise ShapeError(
            f"matmul inner dimensions disagree: {a.shape} x {b.shape}"
        )
    return a @ b


def conv_out_size(extent: int, kernel: int, stride: int, pad: int) -> int:
    """Floor-convention output extent for convolution."""
    return (extent + 2 * pad - kernel) // stride + 1


def pool_out_size(extent: int, kernel: int, stride: int, pad: int) -> int:
    """Ceiling-convention output extent for pooling."""
    return -((extent + 2 * pad - kernel) // -stride) + 1


def _check_geometry(h, w, kh, kw, stride, pad):
    if kh < 1 or kw < 1:
        raise ShapeError(f"kernel extents must be positive, got {(kh, kw)}")
    if stride < 1:
        raise ShapeError(f"stride must be positive, got {stride}")
    if pad < 0:
        raise ShapeError(f"pad must be non-negative, got {pad}")
    oh = conv_out_size(h, kh, stride, pad)
    ow = conv_out_size(w, kw, stride, pad)
    if oh < 1 or ow < 1:
        raise ShapeError(
            f"kernel {(kh, kw)} larger than padded input {(h + 2 * pad, w + 2 * pad)}"
        )
    return oh, ow


def im2col(x: np.ndarray, kernel, stride: int, pad: int) -> np.ndarray:
    """Unfold receptive-field patches into columns.

    Input [n,c,h,w] becomes a rank-2 tensor of shape
    [c*kh*kw, n*oh*ow] under the floor output convention.  Column j holds
    the patch feeding output position j (n-major, then rows, then
    columns); rows are ordered channel-major, then kernel row, then
    kernel column.  Padded positions contribute zeros.
    """
    x = np.asarray(x)
    if x.ndim != 4:
        raise ShapeError(f"im2col expects [n,c,h,w] input, got shape {x.shape}")
    n, c, h, w = x.shape
    kh, kw = kernel
    oh, ow = _check_geometry(h, w, kh, kw, stride, pad)

    if pad > 0:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    patches = np.empty((n, c, kh, kw, oh, ow), dtype=x.dtype)
    for dy in range(kh):
        y_end = dy + stride * oh
        for dx in range(kw):
            x_end = dx + stride * ow
            patches[:, :, dy, dx] = x[:, :, dy:y_end:stride, dx:x_end:stride]
    return (
        patches.transpose(1, 2, 3, 0, 4, 5)
        .reshape(c * kh * kw, n * oh * ow)
        .copy()
    )


def col2im(cols: np.ndarray, input_shape, kernel, stride: int, pad: int) -> np.ndarray:
    """Adjoint of :func:`im2col`: scatter-add columns back into an image.

    Overlapping patch contributions are summed, so for every x and y
    ``<im2col(x), y> == <x, col2im(y)>`` holds for the same geometry.
    """
    cols = np.asarray(cols)
    n, c, h, w = input_shape
    kh, kw = kernel
    oh, ow = _check_geometry(h, w, kh, kw, stride, pad)
    if cols.shape != (c * kh * kw, n * oh * ow):
        raise ShapeError(
            f"col2im geometry mismatch: cols {cols.shape} vs expected "
            f"{(c * kh * kw, n * oh * ow)}"
        )

    patches = cols.reshape(c, kh, kw, n, oh, ow).transpose(3, 0, 1, 2, 4, 5)
    out = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=cols.dtype)
    for dy in range(kh):
        y_end = dy + stride * oh
        for dx in range(kw):
            x_end = dx + stride * ow
            out[:, :, dy:y_end:stride, dx:x_end:stride] += patches[:, :, dy, dx]
    if pad > 0:
        out = out[:, :, pad : pad + h, pad : pad + w]
    return np.ascontiguousarray(out)
