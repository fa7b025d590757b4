import dataclasses

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mimo_otfs.channel import ConfigurationError
from mimo_otfs.dl_estimate import (DispersionBounds, PilotPattern, SchedulingError, SchedulingPlan, Rect,
                                   check_plan, default_scheme3_region, dft_training, dispersion_bounds,
                                   pilot_overhead, schedule_paths, scheme1_estimate, scheme1_pattern,
                                   scheme2_estimate, scheme2_pattern, scheme2_system, scheme3_estimate,
                                   scheme3_pattern)
from mimo_otfs.harness import random_signatures
from mimo_otfs.otfs import OtfsConfig, dd_io_predict_angle, dda_channel
from mimo_otfs.reconstruct import SignatureSet

from conftest import TS

M = 16


@pytest.fixture
def scene():
    cfg = OtfsConfig(64, 32, 8, TS)
    users, sigs = random_signatures(4, 3, cfg, M, np.random.default_rng(1))
    from mimo_otfs.channel import GeometryConfig
    geom = GeometryConfig.from_carriers(M, 6e9)
    chans = [dda_channel(u, cfg, geom) for u in users]
    return cfg, users, sigs, chans


def _truth(ch, sig):
    return ch.bar_vector(sig.triples)


def test_dispersion_bounds():
    b = dispersion_bounds([SignatureSet([(3, -2, 0), (1, 4, 2)]), SignatureSet([(5, 1, -1)])])
    assert (b.l_G, b.n_G) == (5, 4)


def test_scheme1_exact(scene):
    cfg, _, sigs, chans = scene
    b = dispersion_bounds(sigs)
    pat = scheme1_pattern(sigs, b, M, cfg, 2.0)
    for sig, ch in zip(sigs, chans):
        Y = dd_io_predict_angle(pat.to_grid(M, cfg), ch, cfg)
        assert np.abs(scheme1_estimate(Y, sig, pat, cfg) - _truth(ch, sig)).max() < 1e-8


def test_scheme1_duplicate_pairs_rejected(small_otfs):
    sig = SignatureSet([(1, 0, 2), (1, 0, 3)])
    pat = scheme1_pattern([sig], dispersion_bounds([sig]), M, small_otfs)
    with pytest.raises(ValueError):
        scheme1_estimate(np.zeros((64, 32)), sig, pat, small_otfs)


def test_scheme1_noise_variance(scene):
    cfg, _, sigs, chans = scene
    sig, ch = sigs[0], chans[0]
    pat = scheme1_pattern([sig], dispersion_bounds([sig]), M, cfg, 4.0)
    rng = np.random.default_rng(2)
    h = _truth(ch, sig)
    err = [np.mean(np.abs(scheme1_estimate(dd_io_predict_angle(pat.to_grid(M, cfg), ch, cfg, 0.1, rng),
                                           sig, pat, cfg) - h) ** 2) for _ in range(300)]
    assert 10 * np.log10(np.mean(err) / (0.1 / 4.0)) == pytest.approx(0, abs=0.5)


def test_dft_training_is_scaled_unitary():
    T = dft_training(5, 3.0)
    assert np.allclose(T.conj().T @ T, 3.0 * np.eye(5))


def test_scheme2_exact_with_data_and_isolated(scene):
    cfg, _, sigs, chans = scene
    b = dispersion_bounds(sigs)
    plan = schedule_paths(sigs, b, cfg, M, 1, 3)
    assert check_plan(plan, sigs, b, cfg, M) == []
    full = scheme2_pattern(plan, sigs, M, cfg, 2.0, np.random.default_rng(3))
    alone = scheme2_pattern(plan, sigs[:3] + [SignatureSet([])], M, cfg, 2.0, np.random.default_rng(3))
    for k in range(3):
        T = scheme2_system(plan, k, sigs[k], full, M, cfg)
        assert np.allclose(T.conj().T @ T, 2.0 * np.eye(3))
        est = scheme2_estimate(dd_io_predict_angle(full.to_grid(M, cfg), chans[k], cfg), plan, k, sigs[k],
                               full, M, cfg)
        assert np.abs(est - _truth(chans[k], sigs[k])).max() < 1e-8
        est2 = scheme2_estimate(dd_io_predict_angle(alone.to_grid(M, cfg), chans[k], cfg), plan, k,
                                sigs[k], alone, M, cfg)
        assert np.abs(est - est2).max() < 1e-12


def test_scheme2_unbiased_with_expected_variance(scene):
    cfg, _, sigs, chans = scene
    sig, ch = sigs[1], chans[1]
    b = dispersion_bounds([sig])
    plan = schedule_paths([sig], b, cfg, M, 1, 3)
    pat = scheme2_pattern(plan, [sig], M, cfg, 1.0)
    rng = np.random.default_rng(4)
    h = _truth(ch, sig)
    est = np.array([scheme2_estimate(dd_io_predict_angle(pat.to_grid(M, cfg), ch, cfg, 0.05, rng), plan, 0,
                                     sig, pat, M, cfg) for _ in range(400)])
    err = est - h
    assert 10 * np.log10(np.mean(np.abs(err) ** 2) / 0.05) == pytest.approx(0, abs=0.5)
    se = np.sqrt(0.05 / 400)
    assert np.all(np.abs(err.mean(axis=0)) < 4 * se)


def test_scheme3_exact(scene):
    cfg, _, sigs, chans = scene
    b = dispersion_bounds(sigs)
    region = default_scheme3_region(sigs, cfg)
    pat = scheme3_pattern(sigs, M, cfg, *region, power=2.0, rng=np.random.default_rng(5))
    for sig, ch in zip(sigs, chans):
        Y = dd_io_predict_angle(pat.to_grid(M, cfg), ch, cfg)
        assert np.abs(scheme3_estimate(Y, sig, pat, b.l_G, M, cfg) - _truth(ch, sig)).max() < 1e-8


def test_scheme3_region_must_fit(small_otfs):
    sig = SignatureSet([(1, 0, 2)])
    with pytest.raises(ConfigurationError):
        scheme3_pattern([sig], M, small_otfs, 62, 0, 4, 4)


def test_pattern_json_roundtrip(scene):
    cfg, _, sigs, _ = scene
    pat = scheme3_pattern(sigs, M, cfg, *default_scheme3_region(sigs, cfg), rng=np.random.default_rng(6))
    back = PilotPattern.from_json(pat.to_json())
    assert back.placements == pat.placements and back.region == pat.region


def test_plan_json_roundtrip(scene):
    cfg, _, sigs, _ = scene
    plan = schedule_paths(sigs, dispersion_bounds(sigs), cfg, M, 1, 3)
    back = SchedulingPlan.from_json(plan.to_json())
    assert back.to_json() == plan.to_json()


def test_checker_catches_violations(scene):
    cfg, _, sigs, _ = scene
    b = dispersion_bounds(sigs)
    plan = schedule_paths(sigs, b, cfg, M, 1, 3)
    merged = dataclasses.replace(plan, groups=[[k for g in plan.groups for k in g]],
                                 regions=[plan.regions[0]])
    assert check_plan(merged, sigs, b, cfg, M)
    crowded = dataclasses.replace(plan, regions=[Rect(0, 0, 1, 3)] * len(plan.regions))
    if len(plan.groups) > 1:
        assert check_plan(crowded, sigs, b, cfg, M)


def test_scheduler_runs_out_of_space(small_otfs):
    sigs = [SignatureSet([(0, 0, 0)]) for _ in range(80)]
    with pytest.raises(SchedulingError):
        schedule_paths(sigs, dispersion_bounds(sigs), small_otfs, M, 8, 8)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_scheduler_output_always_checks(seed):
    cfg = OtfsConfig(64, 32, 8, TS)
    _, sigs = random_signatures(4, 3, cfg, M, np.random.default_rng(seed))
    b = dispersion_bounds(sigs)
    assert check_plan(schedule_paths(sigs, b, cfg, M, 1, 3), sigs, b, cfg, M) == []


def test_overhead_examples():
    assert pilot_overhead(1, 8, 12, 64, 4, 4, 40, 32).ul_samples == 576
    assert pilot_overhead(1, 2, 12, 64, 4, 4, 40, 32).dl_grids == 24
    assert pilot_overhead(2, 2, 12, 64, 4, 4, 40, 32).dl_grids == 288
    assert pilot_overhead(3, 2, 12, 64, 4, 4, 40, 32).dl_grids == 384
    with pytest.raises(ValueError):
        pilot_overhead(4, 1, 1, 1, 1, 1, 1, 1)
