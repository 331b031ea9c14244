import numpy as np
import pytest

from disclabel import autodiff as ad
from disclabel.autodiff import Tensor
from disclabel.ndat import NdatError, read_ndat, write_ndat


# ---------------------------------------------------------------------------
# oracles
# ---------------------------------------------------------------------------


def maxpool_loop_oracle(x):
    """Per-window max via explicit loops."""
    n, c, h, w = x.shape
    out = np.zeros((n, c, h // 2, w // 2), dtype=x.dtype)
    for b in range(n):
        for ch in range(c):
            for i in range(h // 2):
                for j in range(w // 2):
                    out[b, ch, i, j] = x[b, ch, 2 * i : 2 * i + 2, 2 * j : 2 * j + 2].max()
    return out


def away_from_zero(rng, shape, low=0.05):
    """Random values bounded away from 0 so relu/maxpool have no kink within eps."""
    mag = rng.uniform(low, 1.0, size=shape)
    sign = np.where(rng.random(shape) < 0.5, -1.0, 1.0)
    return mag * sign


# ---------------------------------------------------------------------------
# NDAT container
# ---------------------------------------------------------------------------


def test_ndat_roundtrip(tmp_path):
    arr = np.arange(24, dtype=np.float32).reshape(2, 3, 4)
    path = tmp_path / "t.ndat"
    write_ndat(path, arr)
    back = read_ndat(path)
    assert back.shape == (2, 3, 4)
    assert np.array_equal(back, arr)


def test_ndat_scalar_and_header(tmp_path):
    path = tmp_path / "s.ndat"
    write_ndat(path, np.float32(7.5))
    assert read_ndat(path) == np.float32(7.5)
    raw = path.read_bytes()
    assert raw[:4] == b"NDAT"


def test_ndat_bad_magic(tmp_path):
    path = tmp_path / "bad.ndat"
    path.write_bytes(b"XXXX" + b"\x00" * 16)
    with pytest.raises(NdatError, match="magic"):
        read_ndat(path)


def test_ndat_truncated(tmp_path):
    path = tmp_path / "t.ndat"
    write_ndat(path, np.ones((4, 4), dtype=np.float32))
    path.write_bytes(path.read_bytes()[:-8])
    with pytest.raises(NdatError, match="truncated"):
        read_ndat(path)


# ---------------------------------------------------------------------------
# conv2d
# ---------------------------------------------------------------------------


def test_conv_ones_sums_to_nine():
    x = Tensor(np.ones((1, 1, 3, 3), dtype=np.float32))
    k = Tensor(np.ones((1, 1, 3, 3), dtype=np.float32))
    out = ad.conv2d(x, k)
    assert out.data.shape == (1, 1, 1, 1)
    assert out.data.item() == 9.0


def test_conv_identity_kernel():
    rng = np.random.default_rng(0)
    x = Tensor(rng.random((2, 1, 5, 7), dtype=np.float32))
    k = Tensor(np.ones((1, 1, 1, 1), dtype=np.float32))
    out = ad.conv2d(x, k)
    assert np.array_equal(out.data, x.data)


def test_conv_matches_naive_loop_oracle():
    rng = np.random.default_rng(1)
    x = rng.standard_normal((2, 3, 8, 8)).astype(np.float32)
    k = rng.standard_normal((4, 3, 3, 3)).astype(np.float32)
    out = ad.conv2d(Tensor(x), Tensor(k), stride=1, padding=0)
    ref = ad.conv2d_reference(x, k, stride=1, padding=0)
    assert np.abs(out.data - ref).max() < 1e-5


@pytest.mark.parametrize("stride,padding", [(1, 1), (2, 0), (2, 1)])
def test_conv_strided_padded_matches_oracle(stride, padding):
    rng = np.random.default_rng(2)
    x = rng.standard_normal((1, 2, 9, 9)).astype(np.float32)
    k = rng.standard_normal((3, 2, 3, 3)).astype(np.float32)
    out = ad.conv2d(Tensor(x), Tensor(k), stride=stride, padding=padding)
    ref = ad.conv2d_reference(x, k, stride=stride, padding=padding)
    h_exp = (9 + 2 * padding - 3) // stride + 1
    assert out.data.shape == (1, 3, h_exp, h_exp)
    assert np.abs(out.data - ref).max() < 1e-5


def test_conv_same_padding_preserves_dims():
    rng = np.random.default_rng(3)
    for k in (1, 3, 5):
        x = Tensor(rng.random((1, 2, 12, 10), dtype=np.float32))
        w = Tensor(rng.random((2, 2, k, k), dtype=np.float32))
        out = ad.conv2d(x, w, stride=1, padding=(k - 1) // 2)
        assert out.data.shape == (1, 2, 12, 10)


def test_conv_shape_errors():
    x = Tensor(np.zeros((1, 2, 4, 4), dtype=np.float32))
    with pytest.raises(ValueError, match="channel"):
        ad.conv2d(x, Tensor(np.zeros((1, 3, 3, 3), dtype=np.float32)))
    with pytest.raises(ValueError, match="odd"):
        ad.conv2d(x, Tensor(np.zeros((1, 2, 2, 2), dtype=np.float32)))
    with pytest.raises(ValueError, match="4D"):
        ad.conv2d(Tensor(np.zeros((4, 4), dtype=np.float32)), Tensor(np.zeros((1, 2, 3, 3), dtype=np.float32)))
    with pytest.raises(ValueError, match="stride"):
        ad.conv2d(x, Tensor(np.zeros((1, 2, 3, 3), dtype=np.float32)), stride=0)


# ---------------------------------------------------------------------------
# maxpool2 / upsample_nearest2
# ---------------------------------------------------------------------------


def test_maxpool_basic():
    x = Tensor(np.array([[[[1.0, 2.0], [3.0, 4.0]]]], dtype=np.float32))
    out, idx = ad.maxpool2(x)
    assert out.data.item() == 4.0
    assert tuple(idx[0, 0, 0, 0]) == (1, 1)


def test_maxpool_tie_breaks_first_row_major():
    x = Tensor(np.full((1, 1, 4, 4), 2.5, dtype=np.float32))
    out, idx = ad.maxpool2(x)
    assert np.all(out.data == 2.5)
    # every window reports its top-left corner
    for i in range(2):
        for j in range(2):
            assert tuple(idx[0, 0, i, j]) == (2 * i, 2 * j)


def test_maxpool_matches_loop_oracle():
    rng = np.random.default_rng(4)
    x = rng.standard_normal((1, 1, 8, 8)).astype(np.float32)
    out, _ = ad.maxpool2(Tensor(x))
    assert np.array_equal(out.data, maxpool_loop_oracle(x))


def test_maxpool_odd_dims_error():
    with pytest.raises(ValueError, match="even"):
        ad.maxpool2(Tensor(np.zeros((1, 1, 3, 4), dtype=np.float32)))


def test_upsample_single_pixel():
    x = Tensor(np.array([[[[1.0]]]], dtype=np.float32))
    out = ad.upsample_nearest2(x)
    assert np.array_equal(out.data, np.ones((1, 1, 2, 2), dtype=np.float32))


def test_upsample_of_pooled_constant_is_identity():
    x = Tensor(np.full((1, 1, 6, 6), 3.25, dtype=np.float32))
    pooled, _ = ad.maxpool2(x)
    up = ad.upsample_nearest2(pooled)
    assert np.array_equal(up.data, x.data)


def test_upsample_sum_gradient_is_four():
    x = Tensor(np.random.default_rng(5).random((1, 1, 3, 3)), requires_grad=True)
    loss = ad.tensor_sum(ad.upsample_nearest2(x))
    loss.backward()
    assert np.all(x.grad == 4.0)
    # finite differences agree: d(sum)/dx is constant 4
    num = ad.finite_difference_grad(
        lambda inp: float(ad.upsample_nearest2(Tensor(inp[0])).data.sum()), [x.data]
    )[0]
    assert ad.max_relative_error(x.grad, num) < 1e-6


# ---------------------------------------------------------------------------
# activations
# ---------------------------------------------------------------------------


def test_relu_negative():
    out = ad.activation(Tensor(np.array(-1.5)), "relu")
    assert out.data.item() == 0.0


def test_sigmoid_at_zero():
    out = ad.activation(Tensor(np.array(0.0)), "sigmoid")
    assert out.data.item() == 0.5


def test_sigmoid_gradient_at_zero():
    x = Tensor(np.array(0.0), requires_grad=True)
    ad.sigmoid(x).backward()
    assert abs(x.grad.item() - 0.25) < 1e-12
    num = ad.finite_difference_grad(lambda inp: ad.sigmoid(Tensor(inp[0])).data.item(), [np.array(0.0)])[0]
    assert abs(x.grad.item() - num.item()) < 1e-6


def test_sigmoid_strictly_in_open_interval():
    x = Tensor(np.array([-1e4, -50.0, 0.0, 50.0, 1e4], dtype=np.float32))
    out = ad.sigmoid(x).data
    assert np.all(out > 0.0) and np.all(out < 1.0)


def test_unknown_activation():
    with pytest.raises(ValueError, match="unknown activation"):
        ad.activation(Tensor(np.array(0.0)), "tanh")


# ---------------------------------------------------------------------------
# backward semantics
# ---------------------------------------------------------------------------


def test_backward_square():
    x = Tensor(np.array(3.0), requires_grad=True)
    ad.mul(x, x).backward()
    assert x.grad.item() == 6.0


def test_backward_conv_sum_matches_finite_differences():
    rng = np.random.default_rng(6)
    xv = rng.standard_normal((1, 1, 5, 5))
    kv = rng.standard_normal((2, 1, 3, 3))
    x = Tensor(xv, requires_grad=True)
    k = Tensor(kv, requires_grad=True)
    ad.tensor_sum(ad.conv2d(x, k)).backward()

    def f(inputs):
        return float(ad.conv2d(Tensor(inputs[0]), Tensor(inputs[1])).data.sum())

    num_x, num_k = ad.finite_difference_grad(f, [xv, kv], eps=1e-3)
    assert ad.max_relative_error(x.grad, num_x) < 1e-4
    assert ad.max_relative_error(k.grad, num_k) < 1e-4


def test_masked_loss_all_zero_mask_gives_zero_grads():
    rng = np.random.default_rng(7)
    x = Tensor(rng.random((1, 2, 4, 4)), requires_grad=True)
    mask = Tensor(np.zeros((1, 2, 1, 1)))
    loss = ad.tensor_sum(ad.mul(ad.mul(x, x), mask))
    loss.backward()
    assert loss.data.item() == 0.0
    assert np.all(x.grad == 0.0)


def test_backward_requires_scalar_seed():
    x = Tensor(np.ones((2, 2)), requires_grad=True)
    y = ad.mul(x, x)
    with pytest.raises(ValueError, match="scalar"):
        y.backward()


def test_repeated_backward_rejected():
    x = Tensor(np.array(2.0), requires_grad=True)
    y = ad.mul(x, x)
    y.backward()
    with pytest.raises(RuntimeError, match="already ran"):
        y.backward()


def test_no_grad_skips_graph():
    x = Tensor(np.array(2.0), requires_grad=True)
    with ad.no_grad():
        y = ad.mul(x, x)
    assert y._backward_fn is None and not y.requires_grad


def test_debug_finite_check():
    ad.set_debug(True)
    try:
        bad = Tensor(np.array([1.0, np.inf]))
        with pytest.raises(FloatingPointError):
            ad.add(bad, bad)
    finally:
        ad.set_debug(False)


# ---------------------------------------------------------------------------
# primitive gradient suite: 20 random instances per op, eps 1e-3, fp64
# ---------------------------------------------------------------------------


def _gradcheck(build, arrays, eps=1e-3, tol=1e-4):
    tensors = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    out = build(*tensors)
    ad.tensor_sum(ad.mul(out, out)).backward()

    def scalar(inputs):
        o = build(*[Tensor(a) for a in inputs])
        return float((o.data ** 2).sum())

    numeric = ad.finite_difference_grad(scalar, arrays, eps=eps)
    for t, num in zip(tensors, numeric):
        assert ad.max_relative_error(t.grad, num) < tol


PRIMITIVES = {
    "conv2d": lambda rng: (
        lambda x, k: ad.conv2d(x, k, stride=1, padding=1),
        [rng.standard_normal((1, 2, 5, 5)), rng.standard_normal((2, 2, 3, 3))],
    ),
    "conv2d_stride2": lambda rng: (
        lambda x, k: ad.conv2d(x, k, stride=2, padding=1),
        [rng.standard_normal((1, 2, 6, 6)), rng.standard_normal((2, 2, 3, 3))],
    ),
    # distinct multiples of 0.1: argmax margins far exceed the probe eps
    "maxpool2": lambda rng: (
        lambda x: ad.maxpool2(x)[0],
        [rng.permuted(np.arange(72, dtype=np.float64)).reshape(1, 2, 6, 6) * 0.1],
    ),
    "upsample": lambda rng: (ad.upsample_nearest2, [rng.standard_normal((1, 2, 4, 4))]),
    "relu": lambda rng: (ad.relu, [away_from_zero(rng, (2, 3, 4, 4))]),
    "sigmoid": lambda rng: (ad.sigmoid, [rng.standard_normal((2, 3, 4, 4))]),
    "instance_norm": lambda rng: (
        ad.instance_norm,
        [rng.standard_normal((2, 3, 5, 5)), rng.uniform(0.5, 1.5, 3), rng.standard_normal(3)],
    ),
    "add": lambda rng: (ad.add, [rng.standard_normal((2, 3, 4, 4)), rng.standard_normal((2, 3, 4, 4))]),
    "add_bias": lambda rng: (
        lambda x, b: ad.add(x, ad.reshape(b, (1, 3, 1, 1))),
        [rng.standard_normal((2, 3, 4, 4)), rng.standard_normal(3)],
    ),
    "sub": lambda rng: (ad.sub, [rng.standard_normal((2, 2, 3, 3)), rng.standard_normal((2, 2, 3, 3))]),
    "mul_broadcast": lambda rng: (
        ad.mul,
        [rng.standard_normal((2, 3, 4, 4)), rng.standard_normal((2, 1, 4, 4))],
    ),
    "concat": lambda rng: (
        lambda a, b: ad.concat([a, b], axis=1),
        [rng.standard_normal((1, 2, 3, 3)), rng.standard_normal((1, 3, 3, 3))],
    ),
}


@pytest.mark.parametrize("name", sorted(PRIMITIVES))
def test_primitive_gradients_20_instances(name):
    for seed in range(20):
        rng = np.random.default_rng(1000 + seed)
        build, arrays = PRIMITIVES[name](rng)
        _gradcheck(build, arrays)


def test_backward_linearity_on_random_graphs():
    # grad of (f + g) equals grad(f) + grad(g) for composite random graphs
    rng = np.random.default_rng(42)
    for _ in range(5):
        xv = rng.standard_normal((1, 2, 4, 4))
        kv = rng.standard_normal((2, 2, 3, 3))

        def f_loss(x, k):
            return ad.tensor_sum(ad.sigmoid(ad.conv2d(x, k, padding=1)))

        def g_loss(x, k):
            return ad.tensor_sum(ad.mul(x, x))

        x = Tensor(xv, requires_grad=True)
        k = Tensor(kv, requires_grad=True)
        ad.add(f_loss(x, k), g_loss(x, k)).backward()
        combined = x.grad.copy()

        xf = Tensor(xv, requires_grad=True)
        kf = Tensor(kv, requires_grad=True)
        f_loss(xf, kf).backward()
        xg = Tensor(xv, requires_grad=True)
        kg = Tensor(kv, requires_grad=True)
        g_loss(xg, kg).backward()
        assert np.allclose(combined, xf.grad + xg.grad, rtol=1e-6, atol=1e-9)


def test_forward_values_reused_tensor_accumulates():
    x = Tensor(np.array(2.0), requires_grad=True)
    # y = x*x + x*x -> dy/dx = 4x = 8
    y = ad.add(ad.mul(x, x), ad.mul(x, x))
    y.backward()
    assert x.grad.item() == 8.0
