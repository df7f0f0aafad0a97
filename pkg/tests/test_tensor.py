import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.signal import correlate2d

from memlpos import tensor as T
from memlpos.gradcheck import grad_check
from memlpos.tensor import ShapeError, Tensor


def _check(build, shapes, seed=0, tol=1e-6, positive=False):
    """Finite-difference check of ``build(**tensors) -> scalar`` at a random point."""
    rng = np.random.default_rng(seed)
    arrays = {k: rng.standard_normal(s) for k, s in shapes.items()}
    if positive:
        arrays = {k: np.abs(v) + 0.5 for k, v in arrays.items()}
    tensors = {k: Tensor(v, requires_grad=True) for k, v in arrays.items()}
    analytic = T.grad(build(**tensors), tensors)

    def f():
        with T.no_grad():
            return float(build(**{k: Tensor(v) for k, v in arrays.items()}).data)

    worst = grad_check(f, arrays, analytic)
    assert max(worst.values()) < tol, worst


def test_relu_forward():
    assert np.array_equal(T.relu(Tensor([-1.0, 0.0, 2.0])).data, [0.0, 0.0, 2.0])


def test_maxpool_forward_2x2():
    x = Tensor(np.array([[1.0, 2.0], [3.0, 4.0]])[None, None])
    assert T.maxpool2d(x, (2, 2)).data.reshape(-1).tolist() == [4.0]


def test_conv_identity_kernel():
    rng = np.random.default_rng(1)
    x = rng.standard_normal((2, 1, 5, 7))
    w = np.ones((1, 1, 1, 1))
    assert np.array_equal(T.conv2d(Tensor(x), Tensor(w)).data, x)


def test_square_gradient():
    x = Tensor(3.0, requires_grad=True)
    assert T.grad(T.square(x), {"x": x})["x"] == pytest.approx(6.0)


def test_mean_relu_gradient():
    x = Tensor([-1.0, 2.0], requires_grad=True)
    g = T.grad(T.mean(T.relu(x)), {"x": x})["x"]
    assert g.tolist() == [0.0, 0.5]


def test_backward_requires_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ShapeError):
        T.relu(x).backward()


def test_shape_error_names_op_and_shapes():
    with pytest.raises(ShapeError) as exc:
        T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))
    msg = str(exc.value)
    assert "matmul" in msg and "(2, 3)" in msg


def test_mul_rejects_broadcast():
    with pytest.raises(ShapeError):
        T.mul(Tensor(np.ones((2, 3))), Tensor(np.ones(3)))


def test_log_rejects_nonpositive():
    with pytest.raises(ValueError):
        T.log(Tensor([1.0, 0.0]))


@settings(max_examples=25, deadline=None)
@given(n=st.integers(1, 3), cin=st.integers(1, 3), cout=st.integers(1, 3),
       h=st.integers(3, 7), w=st.integers(3, 7), seed=st.integers(0, 2**31))
def test_conv2d_matches_scipy_correlate(n, cin, cout, h, w, seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((n, cin, h, w))
    k = rng.standard_normal((cout, cin, 3, 3))
    out = T.conv2d(Tensor(x), Tensor(k)).data
    ref = np.array([[sum(correlate2d(x[b, c], k[o, c], mode="valid") for c in range(cin))
                     for o in range(cout)] for b in range(n)])
    np.testing.assert_allclose(out, ref, rtol=1e-12, atol=1e-12)


@settings(max_examples=25, deadline=None)
@given(ph=st.integers(1, 3), pw=st.integers(1, 4), seed=st.integers(0, 2**31))
def test_maxpool_matches_reshape_max(ph, pw, seed):
    rng = np.random.default_rng(seed)
    h, w = ph * 3 + 1, pw * 2 + 1  # trailing row/column dropped
    x = rng.standard_normal((2, 3, h, w))
    out = T.maxpool2d(Tensor(x), (ph, pw)).data
    ho, wo = h // ph, w // pw
    ref = x[:, :, :ho * ph, :wo * pw].reshape(2, 3, ho, ph, wo, pw).max(axis=(3, 5))
    assert np.array_equal(out, ref)


def test_maxpool_tie_routes_to_first():
    x = Tensor(np.full((1, 1, 2, 2), 5.0), requires_grad=True)
    g = T.grad(T.sum_(T.maxpool2d(x, (2, 2))), {"x": x})["x"]
    assert g.reshape(-1).tolist() == [1.0, 0.0, 0.0, 0.0]
    assert T.pool_argmax(x.data, (2, 2)).reshape(-1).tolist() == [0]


def test_no_grad_records_nothing():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with T.no_grad():
        y = T.sum_(T.square(x))
    assert not y.requires_grad and y._parents == ()


def test_unreachable_param_gets_zero_gradient():
    x = Tensor([1.0], requires_grad=True)
    z = Tensor([2.0, 3.0], requires_grad=True)
    g = T.grad(T.sum_(T.square(x)), {"x": x, "z": z})
    assert np.array_equal(g["z"], [0.0, 0.0])


def test_forward_is_deterministic():
    rng = np.random.default_rng(3)
    x, w = rng.standard_normal((2, 2, 6, 9)), rng.standard_normal((4, 2, 3, 3))
    a = T.conv2d(Tensor(x), Tensor(w)).data
    b = T.conv2d(Tensor(x), Tensor(w)).data
    assert np.array_equal(a, b)


# primitive gradients against central differences


def test_grad_linear_layer():
    _check(lambda x, w, b: T.sum_(T.square(T.add_bias(T.matmul(x, w), b))),
           {"x": (4, 5), "w": (5, 3), "b": (3,)}, tol=1e-6)


def test_grad_conv_pool_relu_stack():
    def build(x, w, b):
        c = T.conv2d(x, w)
        return T.sum_(T.square(T.relu(T.add_bias(T.maxpool2d(c, (2, 2)), b, axis=1))))

    _check(build, {"x": (2, 2, 6, 7), "w": (3, 2, 3, 3), "b": (3,)}, tol=1e-4)


def test_grad_exp_log_clip():
    _check(lambda a: T.sum_(T.log(T.exp(T.clip(a, -0.5, 0.5)) + 1.0)), {"a": (7,)}, seed=4, tol=1e-6)


def test_grad_log_mul_sub():
    _check(lambda a, b: T.sum_(T.mul(T.log(a), T.sub(a, b))), {"a": (3, 4), "b": (3, 4)}, positive=True)


def test_grad_concat_slice_reshape_mean():
    def build(a, b):
        c = T.concat([a, b], axis=1)
        return T.mean(T.square(T.reshape(c[:, 1:4], (-1,))))

    _check(build, {"a": (3, 2), "b": (3, 3)})


def test_grad_scale_and_operators():
    _check(lambda a, b: T.sum_((a * 2.5 - b) * (a + 1.0)), {"a": (4,), "b": (4,)})
