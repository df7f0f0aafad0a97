import math

import numpy as np
import pytest

from memlpos import model as M
from memlpos.tensor import ShapeError


@pytest.fixture(scope="module")
def H():
    return np.random.default_rng(0).standard_normal((3, 8, 103, 2))


def test_head_counts():
    assert M.count_params(M.init_model("MSE", 0), "head") == 33_282
    assert M.count_params(M.init_model("NLL", 0), "head") == 33_540


def test_total_is_phi_plus_head():
    m = M.init_model("NLL", 1)
    assert M.count_params(m) == M.count_params(m, "phi") + M.count_params(m, "head")
    assert M.count_params(m, "phi") == 25_552


def test_unknown_part_rejected():
    with pytest.raises(ValueError):
        M.count_params(M.init_model("MSE", 0), "body")


def test_init_is_deterministic_and_seeded():
    a, b, c = M.init_model("MSE", 5), M.init_model("MSE", 5), M.init_model("MSE", 6)
    for k, v in a.params().items():
        assert np.array_equal(v, b.params()[k])
    assert not np.array_equal(a.phi["conv1.w"], c.phi["conv1.w"])
    assert all(np.all(a.phi[k] == 0) for k in a.phi if k.endswith(".b"))


def test_bad_mode_rejected():
    with pytest.raises(ValueError):
        M.init_model("L1", 0)


def test_output_arity(H):
    assert M.predict(M.init_model("MSE", 0), H).sigma is None
    p = M.predict(M.init_model("NLL", 0), H)
    assert p.position.shape == (3, 2) and p.sigma.shape == (3, 2)


def test_features_independent_of_head(H):
    m = M.init_model("MSE", 2)
    other = M.swap_head(m, M.init_head("NLL", 9))
    z1, z2 = M.forward_features(m, H), M.forward_features(other, H)
    assert z1.shape == (3, 128) and np.array_equal(z1, z2)
    for k in m.phi:
        assert np.array_equal(m.phi[k], other.phi[k])
    assert other.mode == "NLL"
    assert M.predict(other, H).sigma is not None


def test_swap_head_changes_predictions(H):
    m = M.init_model("MSE", 2)
    other = M.swap_head(m, M.init_head("MSE", 3))
    assert not np.array_equal(M.predict(m, H).position, M.predict(other, H).position)


def test_swap_head_dim_mismatch():
    m = M.init_model("MSE", 0)
    bad = M.init_head("MSE", 0)
    bad["h1.w"] = bad["h1.w"][:, :64]
    with pytest.raises(ShapeError):
        M.swap_head(m, bad)


def test_zero_input_gives_bias_constant():
    m = M.init_model("MSE", 0)
    for k in m.phi:
        if k.endswith(".b"):
            m.phi[k][...] = 0.1
    z = M.forward_features(m, np.zeros((2, 8, 103, 2)))
    assert np.array_equal(z[0], z[1])
    # block 1 outputs 0.1 everywhere, block 2 a per-channel constant
    c2 = np.maximum(0.1 * m.phi["conv2.w"].sum(axis=(1, 2, 3)) + 0.1, 0.0)
    flat = np.repeat(c2, m.arch.flat_dim() // c2.size)
    np.testing.assert_allclose(z[0], np.maximum(flat @ m.phi["fc.w"] + 0.1, 0.0), rtol=1e-12)


def test_theta_perturbation_changes_features(H):
    m = M.init_model("MSE", 0)
    z0 = M.forward_features(m, H)
    m.phi["conv1.w"][0, 0, 1, 1] += 0.1
    assert not np.array_equal(z0, M.forward_features(m, H))


def test_wrong_input_shape(H):
    with pytest.raises(ShapeError):
        M.forward_features(M.init_model("MSE", 0), H[:, :, :50])


def test_logvar_clamp_and_unit_sigma():
    m = M.init_model("NLL", 0)
    z = np.zeros((1, 128))
    m.head["out.b"][...] = [0.0, 0.0, 0.0, 0.0]
    np.testing.assert_allclose(M.forward_head(m, z).sigma, [[1.0, 1.0]])
    m.head["out.b"][...] = [0.0, 0.0, 20.0, -20.0]
    np.testing.assert_allclose(M.forward_head(m, z).sigma, [[math.exp(5), math.exp(-5)]], rtol=1e-14)


def test_sigma_within_clamp_bounds(H):
    m = M.init_model("NLL", 4)
    m.head["out.w"] *= 1e4
    s = M.predict(m, H).sigma
    assert np.all(s >= math.exp(-5)) and np.all(s <= math.exp(5))


def test_predict_maps_to_meters(H):
    from memlpos.channel import PositionNormalizer

    m = M.init_model("NLL", 0)
    n = PositionNormalizer((1.0, 2.0), (10.0, 4.0))
    u, p = M.predict(m, H), M.predict(m, H, n)
    np.testing.assert_allclose(p.position, u.position * [10.0, 4.0] + [1.0, 2.0])
    np.testing.assert_allclose(p.sigma, u.sigma * [10.0, 4.0])


def test_predict_batching_is_invisible(H):
    m = M.init_model("MSE", 0)
    np.testing.assert_allclose(M.predict(m, H, batch_size=1).position, M.predict(m, H).position, rtol=1e-12)
