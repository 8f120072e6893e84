"""Engine tests: forward semantics, backward rules against central
differences, determinism, and the error surfaces."""

import numpy as np
import pytest

from emobayes import autodiff as ad
from emobayes.autodiff import Tensor


def test_add_elementwise():
    out = ad.add(Tensor([1.0, 2.0]), Tensor([3.0, 4.0]))
    np.testing.assert_array_equal(out.data, [4.0, 6.0])


def test_matmul_identity():
    rng = np.random.default_rng(0)
    a = rng.standard_normal((3, 3))
    out = ad.matmul(Tensor(np.eye(3)), Tensor(a))
    np.testing.assert_array_equal(out.data, a)


def test_mean_value():
    assert ad.mean(Tensor([0.1, 0.2, 0.3])).item() == pytest.approx(0.2, abs=1e-15)


def test_backward_square():
    # d/dx x*x at x=3 is 6
    x = Tensor(3.0, requires_grad=True)
    ad.backward(ad.mul(x, x))
    assert float(x.grad) == pytest.approx(6.0, abs=1e-12)


def test_backward_softplus_at_zero():
    # d/dx softplus = sigmoid; sigmoid(0) = 0.5
    x = Tensor(0.0, requires_grad=True)
    ad.backward(ad.softplus(x))
    assert float(x.grad) == pytest.approx(0.5, abs=1e-12)


def test_backward_mean_spreads_equally():
    x = Tensor(np.arange(5.0), requires_grad=True)
    ad.backward(ad.mean(x))
    np.testing.assert_array_equal(x.grad, np.full(5, 1.0 / 5.0))
    assert x.grad.sum() == 1.0  # exact conservation


def test_softplus_values():
    assert ad.softplus(Tensor(0.0)).item() == pytest.approx(np.log(2.0), abs=1e-12)
    assert ad.softplus(Tensor(50.0)).item() == pytest.approx(50.0, abs=1e-12)
    assert ad.softplus(Tensor(-3.0)).item() == pytest.approx(np.log1p(np.exp(-3.0)), abs=1e-12)
    # numerically stable far out on both sides; exp underflow below
    # about -745 makes the collapsed posterior exactly zero
    assert ad.softplus(Tensor(700.0)).item() == 700.0
    assert ad.softplus(Tensor(-700.0)).item() == pytest.approx(0.0, abs=1e-300)
    assert ad.softplus(Tensor(-1e6)).item() == 0.0


def _random_point(op, rng):
    """A random non-degenerate evaluation point for each op."""
    if op in ("add", "sub", "mul"):
        return [rng.standard_normal((3, 4)), rng.standard_normal((3, 4))], {}
    if op == "div":
        return [rng.standard_normal((3, 4)),
                rng.uniform(0.5, 2.0, (3, 4)) * rng.choice([-1.0, 1.0], (3, 4))], {}
    if op == "matmul":
        return [rng.standard_normal((4, 4)), rng.standard_normal((4, 4))], {}
    if op == "conv1d":
        return [rng.standard_normal((2, 10, 3)), rng.standard_normal((4, 3, 5))], {}
    if op == "maxpool1d":
        # distinct values => no ties, kink-free
        x = rng.permutation(24).reshape(1, 12, 2).astype(float) + rng.uniform(0.1, 0.2)
        return [x], {"window": 3}
    if op == "relu":
        x = rng.standard_normal((3, 4))
        x[np.abs(x) < 0.1] = 0.5  # stay away from the kink
        return [x], {}
    if op in ("sigmoid", "tanh", "softplus", "exp", "square"):
        return [rng.standard_normal((3, 4))], {}
    if op in ("log", "sqrt"):
        return [rng.uniform(0.2, 3.0, (3, 4))], {}
    if op == "mean":
        return [rng.standard_normal((3, 4))], {"axis": 1}
    if op == "sum":
        return [rng.standard_normal((3, 4))], {"axis": 0}
    if op == "variance":
        return [rng.standard_normal((3, 5))], {"axis": 1, "ddof": 1}
    if op == "slice":
        return [rng.standard_normal((4, 6))], {"key": (slice(1, 3), slice(0, 5))}
    if op == "concat":
        return [rng.standard_normal((2, 3)), rng.standard_normal((2, 3))], {"axis": 1}
    if op == "dropout-mask-apply":
        mask = (rng.random((3, 4)) < 0.7).astype(float)
        return [rng.standard_normal((3, 4))], {"mask": mask, "keep_prob": 0.7}
    if op == "reshape":
        return [rng.standard_normal((3, 4))], {"shape": (2, 6)}
    if op == "transpose":
        return [rng.standard_normal((2, 3, 4))], {"axes": (2, 0, 1)}
    raise AssertionError(f"no point generator for op {op}")


@pytest.mark.parametrize("op", ad.supported_ops())
def test_gradcheck_all_primitives(op):
    """Every primitive's backward matches central differences at 100
    random non-degenerate points."""
    worst = 0.0
    for seed in range(100):
        rng = np.random.default_rng(1000 + seed)
        inputs, attrs = _random_point(op, rng)
        worst = max(worst, ad.gradcheck(op, inputs, attrs=attrs, eps=1e-5, rng=rng))
    assert worst < 1e-5, f"{op}: worst relative error {worst}"


def test_gradcheck_rejects_bad_eps_and_unknown_op():
    with pytest.raises(ValueError):
        ad.gradcheck("tanh", [np.zeros(2)], eps=0.5)
    with pytest.raises(ad.ShapeError):
        ad.gradcheck("not-an-op", [np.zeros(2)])


def test_apply_dispatch_and_unknown_tag():
    out = ad.apply("add", Tensor([1.0]), Tensor([2.0]))
    assert out.data[0] == 3.0
    with pytest.raises(ad.ShapeError):
        ad.apply("fft", Tensor([1.0]))


def test_forward_determinism_bit_identical():
    def run():
        rng = np.random.default_rng(42)
        x = Tensor(rng.standard_normal((2, 20, 3)))
        w = Tensor(rng.standard_normal((4, 3, 5)))
        y = ad.maxpool1d(ad.tanh(ad.conv1d(x, w)), 2)
        mask = (np.random.default_rng(7).random(y.data.shape) < 0.5).astype(float)
        return ad.dropout_mask_apply(y, mask, 0.5).data
    a, b = run(), run()
    assert np.array_equal(a, b)


def test_conv1d_one_hot_kernel_is_shift():
    rng = np.random.default_rng(3)
    x = rng.standard_normal((1, 16, 1))
    kernel = np.zeros((1, 1, 3))
    kernel[0, 0, 2] = 1.0  # pad_l = 1, so tap 2 reads x[t + 1]
    out = ad.conv1d(Tensor(x), Tensor(kernel)).data[0, :, 0]
    expected = np.concatenate([x[0, 1:, 0], [0.0]])
    np.testing.assert_allclose(out, expected, atol=1e-15)


def test_maxpool_constant_sequence():
    out = ad.maxpool1d(Tensor(np.full((1, 12, 2), 3.25)), 4)
    np.testing.assert_array_equal(out.data, np.full((1, 3, 2), 3.25))


def test_maxpool_tie_breaks_to_lowest_index():
    x = np.zeros((1, 4, 1))
    t = Tensor(x, requires_grad=True)
    out = ad.maxpool1d(t, 4)
    ad.backward(ad.tsum(out))
    np.testing.assert_array_equal(t.grad[0, :, 0], [1.0, 0.0, 0.0, 0.0])


def test_shape_errors():
    with pytest.raises(ad.ShapeError):
        ad.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 2))))
    with pytest.raises(ad.ShapeError):
        ad.conv1d(Tensor(np.zeros((2, 3))), Tensor(np.zeros((1, 1, 3))))
    with pytest.raises(ad.ShapeError):
        ad.maxpool1d(Tensor(np.zeros((1, 10, 1))), 3)  # 10 % 3 != 0
    with pytest.raises(ad.ShapeError):
        ad.dropout_mask_apply(Tensor(np.zeros((2, 2))), np.ones((3, 3)), 0.5)


def test_non_finite_detection_names_op():
    with pytest.raises(ad.NonFiniteError) as err:
        ad.log(Tensor([1.0, 0.0]))  # log(0) = -inf
    assert err.value.op == "log"
    assert isinstance(err.value.node_id, int)
    with pytest.raises(ad.NonFiniteError):
        ad.div(Tensor([1.0]), Tensor([0.0]))


def test_backward_requires_scalar_loss():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ad.GraphError):
        ad.backward(ad.square(x))


def test_double_backward_over_freed_graph():
    x = Tensor(2.0, requires_grad=True)
    loss = ad.square(x)
    ad.backward(loss)
    with pytest.raises(ad.GraphError):
        ad.backward(loss)


def test_gradient_accumulates_across_graphs():
    x = Tensor(2.0, requires_grad=True)
    ad.backward(ad.square(x))
    ad.backward(ad.square(x))
    assert float(x.grad) == pytest.approx(8.0)
    x.zero_grad()
    assert x.grad is None


def test_no_grad_skips_recording():
    x = Tensor(1.0, requires_grad=True)
    with ad.no_grad():
        y = ad.square(x)
    assert not y.requires_grad
    with pytest.raises(ad.GraphError):
        ad.backward(y)  # no path back, but also: y is scalar leaf-like
    # outside the context recording resumes
    z = ad.square(x)
    assert z.requires_grad


def test_broadcast_backward_sums_correctly():
    bias = Tensor(np.zeros(3), requires_grad=True)
    x = Tensor(np.ones((4, 3)))
    ad.backward(ad.tsum(ad.add(x, bias)))
    np.testing.assert_array_equal(bias.grad, np.full(3, 4.0))


def test_slice_and_concat_roundtrip_gradient():
    x = Tensor(np.arange(12.0).reshape(3, 4), requires_grad=True)
    parts = [x[i:i + 1, :] for i in range(3)]
    back = ad.concat(parts, axis=0)
    ad.backward(ad.tsum(ad.mul(back, back)))
    np.testing.assert_allclose(x.grad, 2 * x.data, atol=1e-15)
