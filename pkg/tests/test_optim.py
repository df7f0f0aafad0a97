import numpy as np
import pytest

from memlpos.optim import Adam, NonFiniteGradientError


def _reference_adam(p, grads, lr=1e-3, b1=0.9, b2=0.999, eps=1e-8):
    m = v = 0.0
    out = []
    for t, g in enumerate(grads, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        p = p - lr * (m / (1 - b1 ** t)) / (np.sqrt(v / (1 - b2 ** t)) + eps)
        out.append(p)
    return out


def test_all_frozen_leaves_params_unchanged():
    p = {"a": np.array([1.0, 2.0]), "b": np.array([[3.0]])}
    before = {k: v.copy() for k, v in p.items()}
    opt = Adam()
    opt.step(p, {"a": np.ones(2), "b": np.ones((1, 1))}, frozen={"a", "b"})
    for k in p:
        assert np.array_equal(p[k], before[k])
    assert opt.m == {} and opt.v == {}


@pytest.mark.parametrize("g", [3.7, -0.02, 1e-3])
def test_first_step_is_lr_times_sign(g):
    p = {"w": np.array([0.5])}
    Adam(lr=0.01).step(p, {"w": np.array([g])})
    assert p["w"][0] - 0.5 == pytest.approx(-0.01 * np.sign(g), rel=1e-5)


def test_identical_gradients_move_monotonically():
    p = {"w": np.array([0.0])}
    opt = Adam()
    xs = []
    for _ in range(2):
        opt.step(p, {"w": np.array([2.0])})
        xs.append(p["w"][0])
    assert 0 > xs[0] > xs[1]


def test_matches_reference_update_over_steps():
    rng = np.random.default_rng(0)
    grads = rng.standard_normal(10)
    p = {"w": np.array([0.3])}
    opt = Adam(lr=0.05)
    mine = []
    for g in grads:
        opt.step(p, {"w": np.array([g])})
        mine.append(p["w"][0])
    np.testing.assert_allclose(mine, _reference_adam(0.3, grads, lr=0.05), rtol=1e-14)


def test_nan_gradient_names_block():
    p = {"good": np.zeros(2), "bad": np.zeros(2)}
    with pytest.raises(NonFiniteGradientError) as exc:
        Adam().step(p, {"good": np.ones(2), "bad": np.array([1.0, np.nan])})
    assert exc.value.block == "bad" and "bad" in str(exc.value)
    assert np.array_equal(p["good"], np.zeros(2))  # nothing applied


def test_frozen_block_stays_bit_identical_over_many_steps():
    rng = np.random.default_rng(2)
    p = {"f": rng.standard_normal(5), "t": rng.standard_normal(5)}
    f0 = p["f"].copy()
    opt = Adam(lr=0.1)
    for _ in range(50):
        opt.step(p, {"f": rng.standard_normal(5), "t": rng.standard_normal(5)}, frozen={"f"})
    assert np.array_equal(p["f"], f0)
    assert not np.array_equal(p["t"], f0)


def test_shape_mismatch_rejected():
    with pytest.raises(ValueError):
        Adam().step({"w": np.zeros(3)}, {"w": np.zeros(2)})
