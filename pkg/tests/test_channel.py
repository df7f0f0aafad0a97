import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from shapely.geometry import LineString, Polygon

from memlpos import channel as C

BOX = ((3.0, 3.0), (7.0, 3.0), (7.0, 7.0), (3.0, 7.0))


def _env(blockers=(), n_scatterers=0, seed=0, **kw):
    spec = C.EnvironmentSpec(blockers=blockers, n_scatterers=n_scatterers, **kw)
    return C.build_environment(spec, seed)


def test_broadside_response_is_all_ones():
    a = C.array_response(C.ArrayConfig(), 0.0, 0.0)
    np.testing.assert_allclose(a, np.ones(8), atol=1e-15)


def test_endfire_adjacent_row_phase_is_pi():
    cfg = C.ArrayConfig()
    a = C.array_response(cfg, math.pi / 2, 0.0).reshape(cfg.n_rows, cfg.n_cols)
    dphi = np.angle(a[1:, :] / a[:-1, :])
    np.testing.assert_allclose(np.abs(dphi), math.pi, atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(az=st.floats(-math.pi, math.pi), el=st.floats(-math.pi / 2, math.pi / 2))
def test_steering_matches_brute_force_path_lengths(az, el):
    cfg = C.ArrayConfig()
    a = C.array_response(cfg, az, el)
    u = np.array([math.cos(el) * math.cos(az), math.cos(el) * math.sin(az), math.sin(el)])
    for k in range(cfg.n_antennas):
        r, c = divmod(k, cfg.n_cols)
        pos = np.array([0.0, r * cfg.spacing, c * cfg.spacing])  # wavelengths
        # source at distance D along u; |src| - |src - pos| in a cancellation-free form
        src = 1e15 * u
        far = math.sqrt(sum((s - q) ** 2 for s, q in zip(src, pos)))
        delta = (2 * sum(s * q for s, q in zip(src, pos)) - sum(q * q for q in pos)) / (1e15 + far)
        assert abs(a[k] - np.exp(2j * np.pi * delta)) < 1e-12


def test_angles_out_of_range():
    with pytest.raises(ValueError):
        C.array_response(C.ArrayConfig(), 4.0, 0.0)


def test_empty_area_rejected():
    with pytest.raises(ValueError):
        C.build_environment(C.EnvironmentSpec(area=(0.0, 0.0, 0.0, 1.0)), 0)


def test_position_outside_area_rejected():
    with pytest.raises(ValueError):
        C.synthesize_csi(_env(), (11.0, 5.0))


def test_half_blocker_flags_shadowed_positions():
    # wall over the upper half of the BS-facing side; BS at left edge middle
    wall = ((2.0, 5.0), (2.5, 5.0), (2.5, 10.0), (2.0, 10.0))
    env = _env(blockers=(wall,), bs_position=(-1.0, 5.0, 3.0))
    assert env.is_nlos((8.0, 9.0))
    assert not env.is_nlos((8.0, 1.0))


@settings(max_examples=200, deadline=None)
@given(x=st.floats(0, 10), y=st.floats(0, 10),
       bx=st.floats(-3, 13), by=st.floats(-3, 13))
def test_nlos_flag_agrees_with_shapely(x, y, bx, by):
    env = _env(blockers=(BOX,), bs_position=(bx, by, 3.0))
    ref = LineString([(bx, by), (x, y)]).intersects(Polygon(BOX))
    assert env.is_nlos((x, y)) == ref


def test_single_los_path_phase_slope():
    env = _env(bs_position=(-1.0, -1.0, 3.0))
    p = (4.0, 6.0)
    H = C.synthesize_csi(env, p)
    h0 = H[0, :, 0] + 1j * H[0, :, 1]
    d = math.dist((-1.0, -1.0, 3.0), (p[0], p[1], env.spec.ue_height))
    tau = d / C.SPEED_OF_LIGHT
    slope = np.angle(h0[1:] / h0[:-1])
    np.testing.assert_allclose(slope, -2 * np.pi * env.array.pilot_spacing_hz * tau, atol=1e-9)
    np.testing.assert_allclose(np.abs(h0), 1.0 / d, rtol=1e-12)


def test_no_paths_gives_zero_csi():
    # BS enclosed by a blocker and no scatterers
    cage = ((-2.0, -2.0), (0.0, -2.0), (0.0, 0.0), (-2.0, 0.0))
    env = _env(blockers=(cage,), bs_position=(-1.0, -1.0, 3.0))
    assert env.paths((5.0, 5.0)) == []
    assert np.array_equal(C.synthesize_csi(env, (5.0, 5.0)), np.zeros((8, 103, 2)))


def test_csi_is_sum_of_per_path_contributions():
    env = _env(n_scatterers=5, seed=3)
    p = (2.0, 7.0)
    cfg = env.array
    freqs = cfg.carrier_hz + cfg.subcarrier_offsets()
    total = sum(amp * np.outer(C.array_response(cfg, az, el), np.exp(-2j * np.pi * freqs * tau))
                for amp, tau, az, el in env.paths(p))
    H = C.synthesize_csi(env, p)
    np.testing.assert_allclose(H[..., 0] + 1j * H[..., 1], total, atol=1e-15)
    assert len(env.paths(p)) == 6


def test_reference_phase_makes_anchor_real():
    env = _env(n_scatterers=4, seed=1)
    H = C.reference_phase(C.synthesize_csi(env, (3.0, 3.0)))
    assert H[0, 0, 1] == pytest.approx(0.0, abs=1e-15) and H[0, 0, 0] > 0


def test_generated_dataset_regenerates_bit_exactly():
    env = _env(n_scatterers=6, seed=7)
    ds = C.generate_dataset(env, 20, noise_std=0.01, seed=11)
    for i in range(len(ds)):
        raw = C.fingerprint(env, ds.positions[i], 0.01, ds.noise_seed, i)
        assert np.array_equal(raw * ds.csi_scale, ds.H[i])
    assert np.mean(np.sum(ds.H ** 2, axis=-1)) == pytest.approx(1.0)


def test_generation_is_deterministic_and_seed_sensitive():
    env = _env(n_scatterers=6, seed=7)
    a = C.generate_dataset(env, 5, seed=1)
    b = C.generate_dataset(env, 5, seed=1)
    c = C.generate_dataset(env, 5, seed=2)
    assert np.array_equal(a.H, b.H) and np.array_equal(a.positions, b.positions)
    assert not np.array_equal(a.positions, c.positions)


def test_normalizer_round_trip():
    n = C.PositionNormalizer.from_area((-2.0, 8.0, 1.0, 5.0))
    p = np.array([[-2.0, 1.0], [8.0, 5.0], [3.0, 2.0]])
    np.testing.assert_allclose(n.forward(p)[:2], [[0, 0], [1, 1]])
    np.testing.assert_allclose(n.inverse(n.forward(p)), p)


def test_incompatible_shapes_rejected():
    a = C.generate_dataset(_env(), 2, seed=0)
    small = C.EnvironmentSpec(array=C.ArrayConfig(n_subcarriers=10), n_scatterers=0)
    b = C.generate_dataset(C.build_environment(small, 0), 2, seed=0)
    with pytest.raises(ValueError):
        C.check_compatible([a, b])
