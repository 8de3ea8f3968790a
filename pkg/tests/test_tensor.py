import numpy as np
import pytest

from n2n import tensor as T
from n2n.tensor import ConvGeometry, DimensionError


def naive_matmul(a, b):
    m, n = a.shape
    p = b.shape[1]
    out = np.zeros((m, p), dtype=a.dtype)
    for i in range(m):
        for j in range(p):
            acc = a.dtype.type(0)
            for k in range(n):
                acc += a[i, k] * b[k, j]
            out[i, j] = acc
    return out


def naive_conv(x, w, g):
    """Six nested loops over (n, k, oh, ow) outputs and (c, i, j) taps."""
    N, C, H, W = x.shape
    K = w.shape[0]
    OH, OW = g.output_hw(H, W)
    out = np.zeros((N, K, OH, OW), dtype=x.dtype)
    for n in range(N):
        for k in range(K):
            for oh in range(OH):
                for ow in range(OW):
                    acc = x.dtype.type(0)
                    for c in range(C):
                        for i in range(g.kernel_h):
                            for j in range(g.kernel_w):
                                ih = oh * g.stride_h - g.pad_h + i
                                iw = ow * g.stride_w - g.pad_w + j
                                if 0 <= ih < H and 0 <= iw < W:
                                    acc += x[n, c, ih, iw] * w[k, c, i, j]
                    out[n, k, oh, ow] = acc
    return out


def random_geometry(rng):
    kh, kw = rng.integers(1, 4, size=2)
    sh, sw = rng.integers(1, 3, size=2)
    ph, pw = rng.integers(0, 2, size=2)
    c, k = rng.integers(1, 4, size=2)
    h = int(rng.integers(max(1, kh - 2 * ph), 7))
    w = int(rng.integers(max(1, kw - 2 * pw), 7))
    return ConvGeometry(int(c), int(k), int(kh), int(kw), int(sh), int(sw), int(ph), int(pw)), h, w


def test_matmul_identity_examples():
    a = np.array([[1, 2], [3, 4]], dtype=np.float32)
    assert np.array_equal(T.matmul(a, np.eye(2, dtype=np.float32)), a)
    b = np.array([[5], [7]], dtype=np.float32)
    assert np.array_equal(T.matmul(np.eye(2, dtype=np.float32), b), b)


def test_matmul_matches_triple_loop():
    rng = np.random.default_rng(0)
    a, b = rng.standard_normal((4, 3)), rng.standard_normal((3, 2))
    np.testing.assert_allclose(T.matmul(a, b), naive_matmul(a, b), rtol=1e-14)


@pytest.mark.parametrize("dtype", [np.float32, np.float64])
def test_matmul_identity_bit_exact(dtype):
    rng = np.random.default_rng(1)
    a = rng.standard_normal((7, 5)).astype(dtype)
    assert np.array_equal(T.matmul(a, np.eye(5, dtype=dtype)), a)
    assert np.array_equal(T.matmul(np.eye(7, dtype=dtype), a), a)


def test_matmul_errors_name_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
        T.matmul(np.zeros((2, 3)), np.zeros((2, 3)))
    with pytest.raises(TypeError):
        T.matmul(np.zeros((2, 2), np.float32), np.zeros((2, 2), np.float64))


def test_conv_unit_kernel_is_identity():
    x = np.arange(9, dtype=np.float32).reshape(1, 1, 3, 3)
    out = T.conv2d(x, np.ones((1, 1, 1, 1), np.float32), ConvGeometry(1, 1, 1, 1))
    assert np.array_equal(out, x)


@pytest.mark.parametrize("kh,kw", [(3, 3), (1, 3), (3, 1), (5, 3)])
def test_conv_identity_filter(kh, kw):
    rng = np.random.default_rng(2)
    x = rng.standard_normal((2, 3, 6, 5)).astype(np.float32)
    w = np.zeros((3, 3, kh, kw), np.float32)
    for c in range(3):
        w[c, c, kh // 2, kw // 2] = 1
    assert np.array_equal(T.conv2d(x, w, ConvGeometry.same(3, 3, kh, kw)), x)


def test_conv_example_matches_naive():
    rng = np.random.default_rng(3)
    x = rng.standard_normal((2, 3, 5, 5)).astype(np.float32)
    w = rng.standard_normal((4, 3, 3, 3)).astype(np.float32)
    g = ConvGeometry(3, 4, 3, 3)
    assert np.array_equal(T.conv2d(x, w, g), naive_conv(x, w, g))


@pytest.mark.parametrize("dtype", [np.float32, np.float64])
def test_conv_bit_exact_on_random_geometries(dtype):
    rng = np.random.default_rng(4)
    for _ in range(120):
        g, h, w_ = random_geometry(rng)
        x = rng.standard_normal((int(rng.integers(1, 3)), g.in_channels, h, w_)).astype(dtype)
        k = rng.standard_normal((g.out_channels, g.in_channels, g.kernel_h, g.kernel_w)).astype(dtype)
        assert np.array_equal(T.conv2d(x, k, g), naive_conv(x, k, g)), g


def test_conv_backward_matches_finite_differences():
    rng = np.random.default_rng(5)
    g = ConvGeometry(2, 3, 3, 2, stride_h=2, stride_w=1, pad_h=1, pad_w=1)
    x = rng.standard_normal((2, 2, 5, 4))
    k = rng.standard_normal((3, 2, 3, 2))
    dout = rng.standard_normal(T.conv2d(x, k, g).shape)
    dx, dk = T.conv2d_backward(x, k, g, dout)
    eps = 1e-6
    for arr, grad in ((x, dx), (k, dk)):
        for idx in np.ndindex(arr.shape):
            orig = arr[idx]
            arr[idx] = orig + eps
            plus = np.sum(T.conv2d(x, k, g) * dout)
            arr[idx] = orig - eps
            minus = np.sum(T.conv2d(x, k, g) * dout)
            arr[idx] = orig
            assert abs((plus - minus) / (2 * eps) - grad[idx]) < 1e-6


def test_conv_errors():
    with pytest.raises(DimensionError, match="channels"):
        T.conv2d(np.zeros((1, 2, 4, 4), np.float32), np.zeros((1, 3, 1, 1), np.float32),
                 ConvGeometry(3, 1, 1, 1))
    with pytest.raises(DimensionError, match="degenerate"):
        T.conv2d(np.zeros((1, 1, 2, 2), np.float32), np.zeros((1, 1, 3, 3), np.float32),
                 ConvGeometry(1, 1, 3, 3))


def test_geometry_validation():
    with pytest.raises(ValueError):
        ConvGeometry(0, 1, 1, 1)
    with pytest.raises(ValueError):
        ConvGeometry(1, 1, 1, 1, pad_h=-1)
    assert ConvGeometry(1, 1, 3, 3, pad_h=1, pad_w=1).output_hw(5, 5) == (5, 5)


def test_as_tensor_rejects_degenerate():
    with pytest.raises(DimensionError):
        T.as_tensor(np.float32(1.0))
    with pytest.raises(DimensionError):
        T.as_tensor(np.zeros((2, 0)))
    with pytest.raises(TypeError):
        T.as_tensor(np.zeros(3, dtype=np.complex64))
    t = T.as_tensor([[1, 2], [3, 4]])
    assert t.dtype == np.float32 and t.size == 4


def test_elementwise_examples():
    np.testing.assert_array_equal(T.relu(np.array([-1.0, 0.0, 2.0])), [0, 0, 2])
    np.testing.assert_array_equal(T.maxout(np.array([[1.0, 5.0, 3.0, 2.0]]), 2), [[5, 3]])
    np.testing.assert_array_equal(T.softmax(np.zeros((1, 2))), [[0.5, 0.5]])
    with pytest.raises(DimensionError):
        T.maxout(np.zeros((1, 3)), 2)


def test_softmax_rows_are_distributions():
    rng = np.random.default_rng(6)
    p = T.softmax((rng.standard_normal((50, 7)) * 30).astype(np.float32))
    assert np.all(p >= 0)
    np.testing.assert_allclose(p.sum(axis=1), 1, atol=1e-6)


def test_batch_moments():
    m, v = T.batch_moments(np.full((4, 2, 3, 3), 3.0))
    np.testing.assert_array_equal(m, [3, 3])
    np.testing.assert_array_equal(v, [0, 0])
    m, v = T.batch_moments(np.array([[1.0], [3.0]]))
    assert m[0] == 2 and v[0] == 1
    x = np.random.default_rng(7).standard_normal((6, 3, 4, 5))
    ref_m = x.transpose(1, 0, 2, 3).reshape(3, -1).mean(axis=1)
    ref_v = ((x.transpose(1, 0, 2, 3).reshape(3, -1) - ref_m[:, None]) ** 2).mean(axis=1)
    np.testing.assert_allclose(T.batch_moments(x)[0], ref_m, atol=1e-12)
    np.testing.assert_allclose(T.batch_moments(x)[1], ref_v, atol=1e-12)
    with pytest.raises(DimensionError):
        T.batch_moments(np.zeros((1, 3)))


def test_pooling_shapes_and_backward():
    rng = np.random.default_rng(8)
    x = rng.standard_normal((2, 3, 5, 5))
    out, arg = T.max_pool2d(x, 3, 1, 1)
    assert out.shape == (2, 3, 5, 5)
    assert np.all(out >= x)
    dx = T.max_pool2d_backward(np.ones_like(out), arg, x.shape)
    assert dx.sum() == out.size
    a = T.avg_pool2d(x, 2, 2, 0)
    np.testing.assert_allclose(a[0, 0, 0, 0], x[0, 0, :2, :2].mean())
