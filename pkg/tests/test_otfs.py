import time

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mimo_otfs.channel import GeometryConfig
from mimo_otfs.otfs import (OtfsConfig, angle_to_antenna, dd_io_predict, dd_io_predict_angle, dda_channel,
                            demodulate, dump_grid, load_grid, modulate, oracle_residual, periodic_kernel,
                            propagate_time_domain)

from conftest import TS, make_user


def _grid(rng, shape):
    return rng.standard_normal(shape) + 1j * rng.standard_normal(shape)


def test_roundtrip_paper_grid_is_fast():
    cfg = OtfsConfig(512, 128, 32, TS)
    X = _grid(np.random.default_rng(0), (512, 128))
    t0 = time.perf_counter()
    Xr = demodulate(modulate(X, cfg), cfg)
    assert time.perf_counter() - t0 < 1.0
    assert np.linalg.norm(Xr - X) / np.linalg.norm(X) < 1e-10


@settings(max_examples=20, deadline=None)
@given(st.integers(1, 32), st.sampled_from([2, 4, 8, 16]), st.integers(0, 8), st.integers(0, 2 ** 32 - 1))
def test_roundtrip_property(L, N, cp, seed):
    cp = min(cp, L)
    cfg = OtfsConfig(L, N, cp, TS)
    X = _grid(np.random.default_rng(seed), (3, L, N))
    assert np.allclose(demodulate(modulate(X, cfg), cfg), X, atol=1e-12 * np.abs(X).max())


def test_modulate_energy_without_cp():
    cfg = OtfsConfig(16, 8, 0, TS)
    X = _grid(np.random.default_rng(1), (16, 8))
    assert np.linalg.norm(modulate(X, cfg)) == pytest.approx(np.linalg.norm(X))


def test_identity_channel():
    cfg = OtfsConfig(16, 8, 4, TS)
    geom = GeometryConfig(1)
    s = _grid(np.random.default_rng(2), (1, cfg.block_len))
    z = propagate_time_domain(s, make_user([(0, 0.0, 0, 1.0)]), cfg, geom)
    assert np.allclose(z, s[0])


def test_zero_doppler_oracle_equivalence(geom16):
    cfg = OtfsConfig(64, 32, 8, TS, otfs_start=100)
    u = make_user([(0, 0.0, 10, 1.0), (3, 0.0, 30, 0.5j), (8, 0.0, -5, 0.3)])
    assert oracle_residual(u, cfg, geom16, np.random.default_rng(3)) < 1e-9


def test_integer_doppler_leaves_only_intra_symbol_leakage(geom16):
    # the closed form ignores the Doppler rotation inside one symbol
    cfg = OtfsConfig(64, 128, 8, TS, otfs_start=37)
    res = cfg.doppler_resolution
    on = oracle_residual(make_user([(1, res, 10, 1.0), (5, -res, -40, 0.7)]), cfg, geom16,
                         np.random.default_rng(4))
    off = oracle_residual(make_user([(1, 0.5 * res, 10, 1.0), (5, -0.5 * res, -40, 0.7)]), cfg, geom16,
                          np.random.default_rng(4))
    assert on < 1e-2 < off


def test_residual_grows_with_fractional_doppler():
    cfg = OtfsConfig(512, 128, 32, TS)
    geom = GeometryConfig.from_carriers(2, 6e9)
    out = [oracle_residual(make_user([(0, nu, 10, 1.0), (3, -nu, 30, 0.5j)]), cfg, geom,
                           np.random.default_rng(5)) for nu in (2220.0, 1110.0, 0.0)]
    assert out[0] > out[1] > out[2]


def test_angle_and_antenna_drives_agree(geom16):
    cfg = OtfsConfig(32, 16, 8, TS, otfs_start=5)
    u = make_user([(0, 300.0, 10, 1.0), (3, -700.0, 30, 0.5j)])
    ch = dda_channel(u, cfg, geom16)
    Xb = np.zeros((16, 32, 16), complex)
    Xb[3, 2, 5], Xb[9, 10, 12] = 1, 2j
    Ya = dd_io_predict_angle(Xb, ch, cfg)
    Yd = dd_io_predict(angle_to_antenna(Xb), ch, cfg)
    assert np.linalg.norm(Ya - Yd) / np.linalg.norm(Yd) < 1e-10


def test_zero_channel_gives_noise_only(geom16):
    cfg = OtfsConfig(16, 8, 4, TS)
    ch = dda_channel(make_user([(0, 0.0, 0, 0.0)]), cfg, geom16)
    X = _grid(np.random.default_rng(6), (16, 16, 8))
    assert np.allclose(dd_io_predict(X, ch, cfg), 0)
    Y = dd_io_predict(X, ch, cfg, noise_var=2.0, rng=np.random.default_rng(7))
    assert np.mean(np.abs(Y) ** 2) == pytest.approx(2.0, rel=0.2)


def test_on_grid_path_is_a_single_dda_entry(geom16):
    cfg = OtfsConfig(32, 16, 8, TS)
    res = cfg.doppler_resolution
    u = make_user([(2, 3 * res, 30, 1.0)])       # angle bin 16 * 0.5 * sin(30 deg) = 4
    bar = dda_channel(u, cfg, geom16).dense_bar()
    mag = np.abs(bar)
    assert np.count_nonzero(mag > 1e-9 * mag.max()) == 1


def test_periodic_kernel_integer_and_zero():
    assert periodic_kernel(np.array(0.0), 8) == pytest.approx(8)
    assert abs(periodic_kernel(np.array(3.0), 8)) < 1e-12


def test_shape_errors():
    cfg = OtfsConfig(16, 8, 4, TS)
    with pytest.raises(ValueError):
        modulate(np.zeros((15, 8)), cfg)
    with pytest.raises(ValueError):
        demodulate(np.zeros(10), cfg)
    with pytest.raises(ValueError):
        OtfsConfig(16, 7, 4, TS)


def test_grid_dump_roundtrip(tmp_path):
    X = _grid(np.random.default_rng(8), (4, 6))
    dump_grid(tmp_path / "g.bin", X)
    assert np.array_equal(load_grid(tmp_path / "g.bin", X.shape), X.astype(np.complex64))
    assert (tmp_path / "g.bin").stat().st_size == X.size * 8
