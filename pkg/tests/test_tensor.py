"""Primitive kernels checked against slow, obviously-correct oracles."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fernet import tensor
from fernet.errors import ShapeError


def matmul_oracle(a, b):
    """Triple-loop matrix product, accumulated in float64."""
    m, k = a.shape
    k2, n = b.shape
    assert k == k2
    out = np.zeros((m, n), dtype=np.float64)
    for i in range(m):
        for j in range(n):
            acc = 0.0
            for t in range(k):
                acc += float(a[i, t]) * float(b[t, j])
            out[i, j] = acc
    return out


def test_zeros_shape_and_dtype():
    z = tensor.zeros((2, 3))
    assert z.shape == (2, 3)
    assert z.dtype == np.float32
    assert not z.any()
    z64 = tensor.zeros((4,), dtype=np.float64)
    assert z64.dtype == np.float64


def test_zeros_rejects_bad_shapes():
    with pytest.raises(ShapeError):
        tensor.zeros(())
    with pytest.raises(ShapeError):
        tensor.zeros((3, 0))
    with pytest.raises(ShapeError):
        tensor.zeros((-1, 2))


def test_matmul_against_triple_loop():
    rng = np.random.default_rng(0)
    a = rng.standard_normal((5, 7))
    b = rng.standard_normal((7, 4))
    expected = matmul_oracle(a, b)
    assert np.allclose(tensor.matmul(a, b), expected, atol=1e-12)


def test_matmul_frozen_example():
    a = np.array([[1.0, 2.0], [3.0, 4.0]])
    b = np.array([[5.0, 6.0], [7.0, 8.0]])
    # worked by hand: [[1*5+2*7, 1*6+2*8], [3*5+4*7, 3*6+4*8]]
    assert np.array_equal(tensor.matmul(a, b), [[19.0, 22.0], [43.0, 50.0]])


def test_matmul_rank_and_inner_dim_errors():
    with pytest.raises(ShapeError):
        tensor.matmul(np.zeros(3), np.zeros((3, 2)))
    with pytest.raises(ShapeError):
        tensor.matmul(np.zeros((2, 3)), np.zeros((4, 2)))


def test_output_size_conventions():
    # convolution floors, pooling ceils; the 48-pixel chain tells them apart
    assert tensor.conv_out_size(48, 7, 2, 3) == 24
    assert tensor.pool_out_size(24, 3, 2, 0) == 12
    assert tensor.conv_out_size(12, 3, 1, 1) == 12
    assert tensor.pool_out_size(12, 3, 2, 0) == 6
    assert tensor.pool_out_size(6, 3, 2, 0) == 3
    # a case where the two conventions disagree
    assert tensor.conv_out_size(5, 2, 2, 0) == 2
    assert tensor.pool_out_size(5, 2, 2, 0) == 3


def test_im2col_layout_hand_example():
    # 1 image, 1 channel, 3x3 input, 2x2 kernel, stride 1, no padding
    x = np.arange(9, dtype=np.float64).reshape(1, 1, 3, 3)
    cols = tensor.im2col(x, (2, 2), 1, 0)
    assert cols.shape == (4, 4)
    # column 0 is the top-left patch in row-major kernel order
    assert np.array_equal(cols[:, 0], [0, 1, 3, 4])
    # column order scans output rows then columns
    assert np.array_equal(cols[:, 1], [1, 2, 4, 5])
    assert np.array_equal(cols[:, 2], [3, 4, 6, 7])
    assert np.array_equal(cols[:, 3], [4, 5, 7, 8])


def test_im2col_padding_contributes_zeros():
    x = np.ones((1, 1, 2, 2), dtype=np.float64)
    cols = tensor.im2col(x, (3, 3), 1, 1)
    assert cols.shape == (9, 4)
    # the corner output's patch has 5 padded cells
    assert cols[:, 0].sum() == 4.0


def test_im2col_channel_major_rows():
    x = np.zeros((1, 2, 2, 2), dtype=np.float64)
    x[0, 0] = 1.0
    x[0, 1] = 2.0
    cols = tensor.im2col(x, (2, 2), 1, 0)
    assert cols.shape == (8, 1)
    assert np.array_equal(cols[:, 0], [1, 1, 1, 1, 2, 2, 2, 2])


def test_im2col_rejects_bad_geometry():
    x = np.zeros((1, 1, 4, 4))
    with pytest.raises(ShapeError):
        tensor.im2col(x, (5, 5), 1, 0)
    with pytest.raises(ShapeError):
        tensor.im2col(x, (2, 2), 0, 0)
    with pytest.raises(ShapeError):
        tensor.im2col(x, (2, 2), 1, -1)
    with pytest.raises(ShapeError):
        tensor.im2col(np.zeros((4, 4)), (2, 2), 1, 0)


def test_col2im_scatter_adds_overlaps():
    # stride 1, 2x2 kernel on 3x3: center pixel belongs to all four patches
    cols = np.ones((4, 4), dtype=np.float64)
    out = tensor.col2im(cols, (1, 1, 3, 3), (2, 2), 1, 0)
    assert np.array_equal(out[0, 0], [[1, 2, 1], [2, 4, 2], [1, 2, 1]])


def test_col2im_geometry_mismatch():
    with pytest.raises(ShapeError):
        tensor.col2im(np.ones((4, 5)), (1, 1, 3, 3), (2, 2), 1, 0)


@settings(max_examples=25, deadline=None)
@given(
    n=st.integers(1, 2),
    c=st.integers(1, 3),
    h=st.integers(3, 8),
    w=st.integers(3, 8),
    kh=st.integers(1, 3),
    kw=st.integers(1, 3),
    stride=st.integers(1, 3),
    pad=st.integers(0, 2),
    seed=st.integers(0, 2**32 - 1),
)
def test_col2im_is_adjoint_of_im2col(n, c, h, w, kh, kw, stride, pad, seed):
    """<im2col(x), y> == <x, col2im(y)> for every valid geometry."""
    if h + 2 * pad < kh or w + 2 * pad < kw:
        return
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((n, c, h, w))
    cols = tensor.im2col(x, (kh, kw), stride, pad)
    y = rng.standard_normal(cols.shape)
    lhs = float(np.sum(cols * y))
    back = tensor.col2im(y, x.shape, (kh, kw), stride, pad)
    rhs = float(np.sum(x * back))
    assert lhs == pytest.approx(rhs, rel=1e-10, abs=1e-10)


def test_im2col_col2im_round_trip_counts_patch_membership():
    # col2im(im2col(ones)) counts how many patches each pixel belongs to
    x = np.ones((1, 1, 4, 4), dtype=np.float64)
    cols = tensor.im2col(x, (2, 2), 2, 0)
    out = tensor.col2im(cols, x.shape, (2, 2), 2, 0)
    # non-overlapping stride-2 tiling: every pixel in exactly one patch
    assert np.array_equal(out, np.ones_like(x))


def test_kernels_preserve_float64():
    x = np.zeros((1, 1, 4, 4), dtype=np.float64)
    assert tensor.im2col(x, (2, 2), 1, 0).dtype == np.float64
    x32 = x.astype(np.float32)
    assert tensor.im2col(x32, (2, 2), 1, 0).dtype == np.float32
