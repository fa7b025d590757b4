import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mimo_otfs.channel import ConfigurationError, GeometryConfig
from mimo_otfs.observation import (GridConfig, UlTrainingConfig, build_dictionaries, build_measurement,
                                   exact_doppler, project_to_grid, random_training, shift_matrix,
                                   simulate_ul_rx, taylor_doppler)

from conftest import TS, make_user


def test_grid_layout():
    g = GridConfig(90, 20)
    assert g.interval == pytest.approx(np.deg2rad(2))
    assert np.isclose(g.angles[45], 0.0)
    assert g.nearest_angle(np.deg2rad(30.9)) == 60
    n, l = g.unflatten(g.flat_index(7, 3))
    assert (n, l) == (7, 3)


def test_random_training_power():
    t = random_training(40, power=3.0, rng=np.random.default_rng(0))
    assert np.vdot(t, t).real == pytest.approx(3.0)
    assert np.allclose(np.abs(t), np.abs(t[0]))


def test_shift_matrix_is_cyclic():
    t = np.arange(5) + 1j
    D = shift_matrix(t, 3)
    assert np.array_equal(D[0], t)
    assert np.array_equal(D[2], np.roll(t, 2))


def test_taylor_doppler_first_order():
    ups = np.array([0.0, 500.0])
    T, E = taylor_doppler(ups, 40, TS), exact_doppler(ups, 40, TS)
    assert np.allclose(T[0], 1)
    assert np.max(np.abs(T - E)) < (2 * np.pi * 500 * 40 * TS) ** 2


def test_identity_observation(geom16):
    cfg = UlTrainingConfig(random_training(8, rng=np.random.default_rng(1)), cp_len=4)
    y = simulate_ul_rx(make_user([(0, 0.0, 0, 1.0)]), cfg, geom16)
    Y = y.reshape(8, 16)
    assert np.allclose(Y, cfg.training[:, None] * np.ones(16))


def test_delay_beyond_cp_rejected(geom16):
    cfg = UlTrainingConfig(random_training(8), cp_len=2)
    with pytest.raises(ConfigurationError):
        simulate_ul_rx(make_user([(3, 0.0, 0, 1.0)]), cfg, geom16)


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_observation_is_linear_in_gains(seed):
    rng = np.random.default_rng(seed)
    geom = GeometryConfig.from_carriers(4, 6e9)
    cfg = UlTrainingConfig(random_training(12, rng=rng), cp_len=4)
    spec = [(int(rng.integers(0, 4)), rng.uniform(-2000, 2000), rng.uniform(-60, 60), 1.0) for _ in range(3)]
    g1 = rng.standard_normal(3) + 1j * rng.standard_normal(3)
    g2 = rng.standard_normal(3) + 1j * rng.standard_normal(3)

    def y(g):
        return simulate_ul_rx(make_user([(t, v, a, x) for (t, v, a, _), x in zip(spec, g)]), cfg, geom)

    assert np.allclose(y(2 * g1 - 1j * g2), 2 * y(g1) - 1j * y(g2))


def test_operator_identities(ul_setup):
    grid, training, A, B = ul_setup
    rng = np.random.default_rng(2)
    ups = rng.uniform(-2000, 2000, grid.num_delays)
    beta = rng.uniform(-grid.interval / 2, grid.interval / 2, grid.num_angles)
    y = rng.standard_normal(24 * 16) + 1j * rng.standard_normal(24 * 16)
    pack = build_measurement(training.training, ups, beta, y, A, B, TS)
    g = rng.standard_normal(grid.size) + 1j * rng.standard_normal(grid.size)
    Phi = pack.Phi
    assert np.allclose(Phi @ g, pack.apply(g))
    assert np.allclose(Phi.conj().T @ Phi, pack.gram)
    assert np.allclose(Phi.conj().T @ y, pack.phi_h_y)
    idx = [0, 5, 77, grid.size - 1]
    assert np.allclose(pack.columns(idx), Phi[:, idx])


def test_on_grid_static_data_is_exactly_representable(ul_setup, geom16):
    grid, training, A, B = ul_setup
    u = make_user([(1, 0.0, 0, 0.8), (4, 0.0, 30, -0.5j), (4, 0.0, -20, 0.3)])
    y = simulate_ul_rx(u, training, geom16)
    truth = project_to_grid(u, grid, training)
    pack = build_measurement(training.training, truth.upsilon, truth.beta, y, A, B, TS)
    assert np.linalg.norm(pack.apply(truth.g) - y) < 1e-10 * np.linalg.norm(y)
    assert truth.support() == {(18, 1), (24, 4), (14, 4)}


def test_off_grid_model_error_is_second_order(ul_setup, geom16):
    grid, training, A, B = ul_setup
    errs = []
    for d in (0.4, 0.8):
        u = make_user([(2, 300.0, 20 + d, 1.0)])
        y = simulate_ul_rx(u, training, geom16)
        t = project_to_grid(u, grid, training)
        pack = build_measurement(training.training, t.upsilon, t.beta, y, A, B, TS)
        errs.append(np.linalg.norm(pack.apply(t.g) - y) / np.linalg.norm(y))
    assert errs[0] < errs[1] < 0.2
    assert errs[1] / errs[0] == pytest.approx(4, rel=0.35)


def test_beta_length_checked(ul_setup):
    grid, training, A, B = ul_setup
    with pytest.raises(ValueError):
        build_measurement(training.training, np.zeros(8), np.zeros(3), None, A, B, TS)
