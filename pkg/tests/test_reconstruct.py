import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mimo_otfs.channel import GeometryConfig
from mimo_otfs.emvb import UlGridEstimate
from mimo_otfs.observation import project_to_grid
from mimo_otfs.otfs import OtfsConfig, dda_channel
from mimo_otfs.reconstruct import (FDD, TDD, SignatureSet, UlPath, compute_signatures, dl_user,
                                   extract_dominant_paths, grid_to_params, map_to_dl, path_from_signature,
                                   reconstructed_dda)

from conftest import TS, make_user


def test_dominant_paths_order_and_ties():
    G = np.zeros((4, 3), complex)
    G[1, 2], G[3, 0], G[0, 1], G[2, 1] = 3, -2j, 1, 1
    d = extract_dominant_paths(G, 3)
    assert d.coords == [(1, 2), (3, 0), (0, 1)]          # tie at |1|: lower delay then lower angle
    assert d.captured == pytest.approx(14 / 15)
    short = extract_dominant_paths(G, 6)
    assert short.short and len(short.coords) == 4


def test_dominant_paths_energy_mode():
    G = np.zeros((3, 3))
    G[0, 0], G[1, 1], G[2, 2] = 10, 1, 0.1
    assert extract_dominant_paths(G, energy_fraction=0.95).coords == [(0, 0)]
    assert len(extract_dominant_paths(G, energy_fraction=0.999).coords) == 2


def test_grid_to_params_bounds(ul_setup):
    grid, training, _, _ = ul_setup
    est = UlGridEstimate(np.zeros((36, 8)), np.zeros(36), np.zeros(8))
    with pytest.raises(IndexError):
        grid_to_params([(36, 0)], est, grid, training)


def _tdd_setup(ul_setup):
    grid, training, _, _ = ul_setup
    geom = GeometryConfig.from_carriers(16, 6e9)
    otfs = OtfsConfig(64, 128, 8, TS, otfs_start=training.end_sample(1))
    res = otfs.doppler_resolution
    user = make_user([(1, res, 30, 0.8), (4, -res, 0, -0.5j), (6, 0.0, -30, 0.3 + 0.2j)])
    return grid, training, geom, otfs, user


def test_tdd_roundtrip_exact(ul_setup):
    grid, training, geom, otfs, user = _tdd_setup(ul_setup)
    truth = project_to_grid(user, grid, training)
    est = UlGridEstimate(truth.G, truth.beta, truth.upsilon)
    dom = extract_dominant_paths(est.G, 3)
    rec = map_to_dl(grid_to_params(dom.coords, est, grid, training), TDD, geom, otfs.otfs_start, TS)
    assert rec.gain_valid
    got = {(round(p.delay / TS), round(p.doppler, 6), round(p.angle, 9)): p.gain for p in rec.paths}
    for p in user.paths:
        key = (round(p.delay / TS), round(p.doppler, 6), round(p.angle, 9))
        expect = p.gain * np.exp(2j * np.pi * p.doppler * otfs.otfs_start * TS)
        assert abs(got[key] - expect) < 1e-8
    sig = compute_signatures(rec.paths, otfs, geom)
    truth_dl = dda_channel(dl_user(user, geom), otfs, geom)
    rec_dl = reconstructed_dda(rec, otfs, geom)
    assert np.allclose(rec_dl.bar_vector(sig.triples), truth_dl.bar_vector(sig.triples), atol=1e-10)


def test_fdd_scales_doppler_and_flags_gain():
    geom = GeometryConfig.from_carriers(16, 2e9, 2.2e9)
    ul = [UlPath(2 * TS, 1000.0, 0.2, 1.0, 8)]
    rec = map_to_dl(ul, FDD, geom, 100, TS)
    assert not rec.gain_valid
    assert rec.paths[0].doppler == pytest.approx(1100.0, rel=1e-12)
    assert rec.paths[0].angle == 0.2 and rec.paths[0].delay == 2 * TS
    with pytest.raises(ValueError):
        map_to_dl(ul, "XDD", geom, 0, TS)


def test_signature_rounding_modes():
    geom = GeometryConfig.from_carriers(16, 6e9)
    otfs = OtfsConfig(64, 128, 8, TS)
    res = otfs.doppler_resolution
    p = path_from_signature(3, -2, 5, 1.0, otfs, geom)
    assert compute_signatures([p], otfs, geom).triples == [(3, -2, 5)]
    near = p.__class__(p.delay, (-2 - 1e-7) * res, p.angle, 1.0)
    assert compute_signatures([near], otfs, geom, "floor").triples == [(3, -3, 5)]
    assert compute_signatures([near], otfs, geom, "nearest").triples == [(3, -2, 5)]
    with pytest.raises(ValueError):
        compute_signatures([p], otfs, geom, "ceil")


def test_signature_json_and_unique():
    s = SignatureSet([(1, 2, 3), (1, 2, 3), (0, -1, 4)])
    assert SignatureSet.from_json(s.to_json()).triples == s.triples
    assert s.unique().triples == [(1, 2, 3), (0, -1, 4)]
    assert s.angle_bins == [3, 3, 4]


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 63), st.integers(-64, 63), st.integers(-7, 7))
def test_signature_roundtrip_property(i, j, q):
    geom = GeometryConfig.from_carriers(16, 6e9)
    otfs = OtfsConfig(64, 128, 8, TS)
    p = path_from_signature(i, j, q, 1.0, otfs, geom)
    assert compute_signatures([p], otfs, geom).triples == [(i, j, q)]


def test_unreachable_angle_bin():
    with pytest.raises(ValueError):
        path_from_signature(0, 0, 9, 1.0, OtfsConfig(64, 128, 8, TS), GeometryConfig.from_carriers(16, 6e9))
