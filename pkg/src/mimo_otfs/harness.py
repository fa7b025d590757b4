"""Monte-Carlo experiment harness: UL extraction, DL reconstruction and DL estimation.

One trial draws channels, simulates the UL training block, runs a sparse
solver, reconstructs DL parameters and signatures, simulates the DL pilot
block and records normalized MSEs. Trials with the same seed and index see
the same channel draw for every sweep value (paired comparisons).
"""

from __future__ import annotations

import configparser
import csv
import dataclasses
import io
import json
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .channel import GeometryConfig, PathParams, ScenarioConfig, UserChannel, doppler_limit, sample_paths
from .dl_estimate import (SchedulingPlan, check_plan, default_scheme3_region, dispersion_bounds,
                          schedule_paths, scheme1_estimate, scheme1_pattern, scheme2_estimate,
                          scheme2_pattern, scheme3_estimate, scheme3_pattern)
from .emvb import UlGridEstimate, run_emvb
from .fast import run_fast_emvb
from .observation import (GridConfig, UlTrainingConfig, build_dictionaries, build_measurement,
                          project_to_grid, random_training, simulate_ul_rx)
from .otfs import OtfsConfig, dd_io_predict_angle, dda_channel, demodulate, modulate, oracle_residual
from .reconstruct import (FDD, TDD, SignatureSet, compute_signatures, dl_user, extract_dominant_paths,
                          grid_to_params, map_to_dl, path_from_signature)

log = logging.getLogger(__name__)

SWEEP_AXES = ("snr", "N_t", "P", "speed", "em_iter")
CSV_HEADER = ["sweep", "value", "trial", "mse_g", "mse_beta", "mse_upsilon", "mse_hno", "runtime_ms"]


def mse(x_hat, x) -> float:
    """Normalized squared error ``||x_hat - x||^2 / ||x||^2``."""
    x_hat, x = np.asarray(x_hat), np.asarray(x)
    if x_hat.shape != x.shape:
        raise ValueError("shape mismatch")
    ref = float(np.vdot(x, x).real)
    if ref == 0:
        raise ZeroDivisionError("zero-norm reference")
    return float(np.vdot(x_hat - x, x_hat - x).real) / ref


def _mse_or_abs(x_hat, x) -> float:
    """Normalized error, or the plain squared error when the truth is zero."""
    x_hat, x = np.asarray(x_hat), np.asarray(x)
    if x.size == 0:
        return 0.0
    if not np.any(x):
        return float(np.vdot(x_hat, x_hat).real)
    return mse(x_hat, x)


def to_db(x: float) -> float:
    return float(10 * np.log10(x)) if x > 0 else float("-inf")


PROFILES: Dict[str, Dict] = {
    # desk-scale profile; N_D = 128 keeps the DL Doppler resolution (~2.2 kHz)
    # inside the Doppler range so that on-grid Doppler draws are not all zero
    "small": dict(num_antennas=16, delay_bins=64, doppler_bins=128, cp_len=8, num_angles=36,
                  num_delays=8, delay_pool=8, num_paths=4, train_len=24),
    "paper": dict(num_antennas=64, delay_bins=512, doppler_bins=128, cp_len=32, num_angles=90,
                  num_delays=20, delay_pool=16, num_paths=12, train_len=40),
}


@dataclass(frozen=True)
class ExperimentConfig:
    profile: str = "small"
    num_antennas: int = 16
    delay_bins: int = 64
    doppler_bins: int = 128
    cp_len: int = 8
    num_angles: int = 36
    num_delays: int = 8
    delay_pool: int = 8                 # delays drawn from {0, .., delay_pool - 1} T_s
    num_paths: int = 4
    train_len: int = 24
    num_users: int = 1
    angle_min_deg: float = -10.0
    angle_max_deg: float = 50.0
    speed_kmh: float = 400.0
    f_ul: float = 6e9
    f_dl: float = 6e9
    sample_period: float = 1 / 20e6
    snr_db: float = 20.0
    on_grid: bool = False
    solver: str = "fast"                # fast | emvb
    max_iter: int = 10
    tol: float = 1e-4
    mode: str = TDD
    dl_scheme: int = 3
    H_d: int = 4
    H_D: int = 4
    signature_rounding: str = "nearest"
    sweep: str = "snr"
    values: Tuple[float, ...] = (5.0, 10.0, 15.0, 20.0, 25.0)
    trials: int = 10
    seed: int = 0
    workers: int = 1
    record_runtime: bool = True

    def __post_init__(self):
        if self.trials < 1:
            raise ValueError("trials must be >= 1")
        if self.sweep not in SWEEP_AXES:
            raise ValueError(f"sweep must be one of {SWEEP_AXES}")
        if self.solver not in ("fast", "emvb"):
            raise ValueError("solver must be 'fast' or 'emvb'")
        if self.mode not in (TDD, FDD):
            raise ValueError("mode must be TDD or FDD")
        if self.dl_scheme not in (1, 2, 3):
            raise ValueError("dl_scheme must be 1, 2 or 3")
        object.__setattr__(self, "values", tuple(float(v) for v in self.values))

    @classmethod
    def from_profile(cls, profile: str = "small", **overrides) -> "ExperimentConfig":
        if profile not in PROFILES:
            raise ValueError(f"unknown profile {profile!r}")
        return cls(profile=profile, **{**PROFILES[profile], **overrides})

    @classmethod
    def from_ini(cls, text: str, profile: Optional[str] = None) -> "ExperimentConfig":
        """Read ``key = value`` pairs from an ``[experiment]`` section."""
        parser = configparser.ConfigParser()
        parser.read_string(text)
        if not parser.has_section("experiment"):
            raise ValueError("config needs an [experiment] section")
        sec = parser["experiment"]
        types = {f.name: f.type for f in dataclasses.fields(cls)}
        kw = {}
        for key, raw in sec.items():
            if key not in types:
                raise ValueError(f"unknown config key {key!r}")
            kw[key] = _parse_value(types[key], raw, sec, key)
        prof = profile or kw.pop("profile", "small")
        kw.pop("profile", None)
        return cls.from_profile(prof, **kw)

    def with_value(self, value: float) -> "ExperimentConfig":
        key = {"snr": "snr_db", "N_t": "train_len", "P": "num_paths", "speed": "speed_kmh",
               "em_iter": "max_iter"}[self.sweep]
        typ = int if key in ("train_len", "num_paths", "max_iter") else float
        return dataclasses.replace(self, **{key: typ(value)})

    @property
    def noise_var(self) -> float:
        # unit pilot power on both links: SNR = 10 log10(sigma_p^2 / sigma^2)
        return 10.0 ** (-self.snr_db / 10)


def _parse_value(typ: str, raw: str, sec, key):
    typ = str(typ)
    if "bool" in typ:
        return sec.getboolean(key)
    if "Tuple" in typ:
        return tuple(float(v) for v in raw.replace(",", " ").split())
    if "int" in typ:
        return int(raw)
    if "float" in typ:
        return float(raw)
    return raw.strip()


@dataclass
class Setup:
    cfg: ExperimentConfig
    geom: GeometryConfig
    otfs: OtfsConfig
    grid: GridConfig
    training: UlTrainingConfig
    A: np.ndarray
    B: np.ndarray

    @property
    def max_doppler(self) -> float:
        return doppler_limit(self.cfg.speed_kmh, self.cfg.f_ul)


def build_setup(cfg: ExperimentConfig) -> Setup:
    geom = GeometryConfig.from_carriers(cfg.num_antennas, cfg.f_ul, cfg.f_dl)
    grid = GridConfig(cfg.num_angles, cfg.num_delays)
    t = random_training(cfg.train_len, rng=np.random.default_rng([cfg.seed, 7]))
    training = UlTrainingConfig(t, cfg.cp_len, 0, cfg.sample_period)
    # DL OTFS block starts right after the UL training slots of all users
    otfs = OtfsConfig(cfg.delay_bins, cfg.doppler_bins, cfg.cp_len, cfg.sample_period,
                      training.end_sample(cfg.num_users))
    A, B = build_dictionaries(grid, geom)
    return Setup(cfg, geom, otfs, grid, training, A, B)


def on_grid_choices(setup: Setup) -> Tuple[Tuple[float, ...], Tuple[float, ...]]:
    """Angles on both the UL grid and the DL angle bins, Dopplers on the DL bins."""
    g = setup.geom
    pos = g.num_antennas * g.antenna_spacing * np.sin(setup.grid.angles) / g.dl_wavelength
    ok = (np.abs(pos - np.rint(pos)) < 1e-9) & (np.abs(setup.grid.angles) < np.deg2rad(80))
    angles = tuple(float(a) for a in setup.grid.angles[ok])
    res = setup.otfs.doppler_resolution
    # UL Doppler that maps to an integer DL bin
    ratio = g.ul_wavelength / g.dl_wavelength
    jmax = int(np.floor(setup.max_doppler * ratio / res + 1e-9))
    dopplers = tuple(float(j * res / ratio) for j in range(-jmax, jmax + 1))
    return angles, dopplers


def scenario_for(setup: Setup) -> ScenarioConfig:
    cfg = setup.cfg
    fd = setup.max_doppler
    kw = dict(num_users=cfg.num_users, num_paths=cfg.num_paths, delay_pool=tuple(range(cfg.delay_pool)),
              angle_range=(np.deg2rad(cfg.angle_min_deg), np.deg2rad(cfg.angle_max_deg)),
              doppler_range=(-fd, fd))
    if cfg.on_grid:
        angles, dopplers = on_grid_choices(setup)
        kw.update(angle_choices=angles, doppler_choices=dopplers, distinct_delays=True)
    return ScenarioConfig(**kw)


@dataclass
class MseRecord:
    sweep: str
    value: float
    trial: int
    mse_g: float
    mse_beta: float
    mse_upsilon: float
    mse_hno: float
    runtime_ms: float
    error: Optional[str] = None
    support_exact: Optional[bool] = None

    @property
    def ok(self) -> bool:
        return self.error is None


def run_ul_solver(setup: Setup, y: np.ndarray, noise_var: float, max_iter: int, tol: float,
                  callback=None) -> UlGridEstimate:
    cfg = setup.cfg
    pack = build_measurement(setup.training.training, np.zeros(setup.grid.num_delays),
                             np.zeros(setup.grid.num_angles), y, setup.A, setup.B, cfg.sample_period)
    solver = run_fast_emvb if cfg.solver == "fast" else run_emvb
    est, _ = solver(pack, noise_var, setup.grid.interval, max_iter=max_iter, tol=tol, callback=callback,
                    max_doppler=2 * setup.max_doppler)
    return est


def estimate_dl(setup: Setup, Y: np.ndarray, sig: SignatureSet, pattern, plan=None, user: int = 0
                ) -> np.ndarray:
    M = setup.geom.num_antennas
    scheme = setup.cfg.dl_scheme
    if scheme == 1:
        return scheme1_estimate(Y, sig, pattern, setup.otfs)
    if scheme == 2:
        return scheme2_estimate(Y, plan, user, sig, pattern, M, setup.otfs)
    return scheme3_estimate(Y, sig, pattern, dispersion_bounds([sig]).l_G, M, setup.otfs)


def dl_pattern(setup: Setup, sig: SignatureSet, rng: np.random.Generator):
    M = setup.geom.num_antennas
    cfg, otfs = setup.cfg, setup.otfs
    bounds = dispersion_bounds([sig])
    if cfg.dl_scheme == 1:
        return scheme1_pattern([sig], bounds, M, otfs), None
    if cfg.dl_scheme == 2:
        plan = schedule_paths([sig], bounds, otfs, M, 1, max(len(sig), 1))
        return scheme2_pattern(plan, [sig], M, otfs), plan
    region = default_scheme3_region([sig], otfs, cfg.H_d, cfg.H_D)
    return scheme3_pattern([sig], M, otfs, *region, rng=rng), None


def evaluate_user(setup: Setup, user: UserChannel, est: UlGridEstimate, noise_var: float,
                  rng: np.random.Generator) -> Dict[str, float]:
    """All per-user MSEs for a UL estimate (UL truth from on-grid projection)."""
    cfg = setup.cfg
    truth = project_to_grid(user, setup.grid, setup.training)
    cols = np.unique(truth.angle_idx)
    rows = np.unique(truth.delay_idx)
    out = {"mse_g": mse(est.g, truth.g),
           "mse_beta": _mse_or_abs(est.beta[cols], truth.beta[cols]),
           "mse_upsilon": _mse_or_abs(est.upsilon[rows], truth.upsilon[rows])}
    dom = extract_dominant_paths(est.G, cfg.num_paths)
    out["support_exact"] = set(dom.coords) == truth.support()
    ul = grid_to_params(dom.coords, est, setup.grid, setup.training, user.user_index)
    rec = map_to_dl(ul, cfg.mode, setup.geom, setup.otfs.otfs_start, cfg.sample_period)
    sig = compute_signatures(rec.paths, setup.otfs, setup.geom, cfg.signature_rounding).unique()
    pattern, plan = dl_pattern(setup, sig, rng)
    M = setup.geom.num_antennas
    true_dl = dda_channel(dl_user(user, setup.geom), setup.otfs, setup.geom)
    Y = dd_io_predict_angle(pattern.to_grid(M, setup.otfs), true_dl, setup.otfs, noise_var, rng)
    h_hat = estimate_dl(setup, Y, sig, pattern, plan)
    out["mse_hno"] = _mse_or_abs(h_hat, true_dl.bar_vector(sig.triples))
    return out


def _trial_rngs(cfg: ExperimentConfig, trial: int):
    return np.random.default_rng([cfg.seed, trial, 0]), np.random.default_rng([cfg.seed, trial, 1])


def run_point(cfg: ExperimentConfig, value: float, trial: int) -> MseRecord:
    """One trial at one sweep value; failures are captured in the record."""
    recs = _run_trial(cfg, value, trial, None)
    return recs[0]


def _run_trial(cfg: ExperimentConfig, value: float, trial: int,
               marks: Optional[Sequence[int]]) -> List[MseRecord]:
    """Trial at ``value``; with ``marks`` (em_iter sweeps) one record per iteration mark."""
    nan = float("nan")
    values = [value] if marks is None else list(marks)
    try:
        point = cfg.with_value(value if marks is None else max(marks))
        setup = build_setup(point)
        chan_rng, noise_rng = _trial_rngs(cfg, trial)
        users = sample_paths(scenario_for(setup), cfg.sample_period, chan_rng)
        sums: Dict[int, Dict[str, float]] = {i: {} for i in range(len(values))}
        runtime = 0.0
        for user in users:
            y = simulate_ul_rx(user, setup.training, setup.geom, point.noise_var, noise_rng,
                               setup.grid.num_delays)
            snaps: Dict[int, UlGridEstimate] = {}

            def keep(it, est, snaps=snaps):
                snaps[it] = dataclasses.replace(est, history=list(est.history))

            t0 = time.perf_counter()
            tol = point.tol if marks is None else 0.0
            est = run_ul_solver(setup, y, point.noise_var, point.max_iter, tol,
                                None if marks is None else keep)
            runtime += (time.perf_counter() - t0) * 1e3
            ests = [est] if marks is None else [snaps[min(int(m), max(snaps))] for m in values]
            for i, e in enumerate(ests):
                res = evaluate_user(setup, user, e, point.noise_var, np.random.default_rng([cfg.seed, trial, 2]))
                for k, v in res.items():
                    sums[i][k] = sums[i].get(k, 0.0) + float(v)
        K = len(users)
        rt = runtime / K if cfg.record_runtime else 0.0
        return [MseRecord(cfg.sweep, float(v), trial, s["mse_g"] / K, s["mse_beta"] / K,
                          s["mse_upsilon"] / K, s["mse_hno"] / K, rt,
                          support_exact=bool(s["support_exact"] == K))
                for v, s in zip(values, sums.values())]
    except Exception as exc:   # trial-level capture
        log.warning("trial %d at %s=%s failed: %s", trial, cfg.sweep, value, exc)
        return [MseRecord(cfg.sweep, float(v), trial, nan, nan, nan, nan, 0.0, error=f"{type(exc).__name__}: {exc}")
                for v in values]


def _task(args):
    cfg, value, trial, marks = args
    return _run_trial(cfg, value, trial, marks)


def run_records(cfg: ExperimentConfig) -> List[MseRecord]:
    if cfg.sweep == "em_iter":
        tasks = [(cfg, max(cfg.values), t, tuple(int(v) for v in cfg.values)) for t in range(cfg.trials)]
    else:
        tasks = [(cfg, v, t, None) for v in cfg.values for t in range(cfg.trials)]
    if cfg.workers > 1:
        with ProcessPoolExecutor(cfg.workers) as pool:
            chunks = list(pool.map(_task, tasks))
    else:
        chunks = [_task(a) for a in tasks]
    records = [r for c in chunks for r in c]
    order = {v: i for i, v in enumerate(cfg.values)}
    records.sort(key=lambda r: (order.get(r.value, len(order)), r.trial))
    return records


METRICS = ("mse_g", "mse_beta", "mse_upsilon", "mse_hno")


def summarize(cfg: ExperimentConfig, records: Sequence[MseRecord]) -> Dict:
    points = []
    for v in cfg.values:
        rs = [r for r in records if r.value == v]
        good = [r for r in rs if r.ok]
        entry = {"value": v, "trials": len(rs), "failures": len(rs) - len(good)}
        for m in METRICS:
            lin = float(np.mean([getattr(r, m) for r in good])) if good else float("nan")
            entry[m] = lin
            entry[m + "_db"] = to_db(lin) if good else float("nan")
        entry["support_exact_rate"] = float(np.mean([bool(r.support_exact) for r in good])) if good else 0.0
        points.append(entry)
    return {"sweep": cfg.sweep, "solver": cfg.solver, "profile": cfg.profile, "seed": cfg.seed,
            "points": points}


def records_csv(records: Sequence[MseRecord]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_HEADER)
    for r in records:
        w.writerow([r.sweep, f"{r.value:.9g}", r.trial] +
                   [f"{getattr(r, m):.9g}" for m in METRICS] + [f"{r.runtime_ms:.9g}"])
    return buf.getvalue()


def run_sweep(cfg: ExperimentConfig, out_dir: Optional[Path] = None, tag: str = "sweep"):
    """Run all points; optionally write ``<tag>.csv`` and ``<tag>.json``. Returns (records, summary)."""
    records = run_records(cfg)
    summary = summarize(cfg, records)
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / f"{tag}.csv").write_text(records_csv(records))
        (out_dir / f"{tag}.json").write_text(json.dumps(summary, indent=2))
    return records, summary


def compare_solvers(cfg: ExperimentConfig, out_dir: Optional[Path] = None) -> Dict:
    """Full vs fast EM-VB on identical seeds; per-point paired dB differences."""
    res = {}
    for solver in ("emvb", "fast"):
        c = dataclasses.replace(cfg, solver=solver)
        res[solver] = run_sweep(c, out_dir, f"sweep_{solver}")
    paired = []
    for v in cfg.values:
        e = [r for r in res["emvb"][0] if r.value == v]
        f = [r for r in res["fast"][0] if r.value == v]
        both = [(a, b) for a, b in zip(e, f) if a.ok and b.ok]
        me = float(np.mean([a.mse_g for a, _ in both])) if both else float("nan")
        mf = float(np.mean([b.mse_g for _, b in both])) if both else float("nan")
        paired.append({"value": v, "pairs": len(both), "emvb_db": to_db(me), "fast_db": to_db(mf),
                       "gap_db": to_db(mf) - to_db(me)})
    out = {"sweep": cfg.sweep, "paired": paired}
    if out_dir is not None:
        (Path(out_dir) / "paired.json").write_text(json.dumps(out, indent=2))
    return out


# ---------------------------------------------------------------- oracle and scheduling helpers

ORACLE_DOPPLERS = (2220.0, 1110.0, 555.0, 0.0)


def _oracle_user(nu: float, cp_len: int) -> UserChannel:
    spec = [(0, 1.0, 10.0, 1.0), (min(3, cp_len), -1.0, 30.0, 0.5j), (cp_len // 2, 0.5, -5.0, 0.3)]
    Ts = 1 / 20e6
    return UserChannel(tuple(PathParams(t * Ts, nu * s, float(np.deg2rad(a)), complex(g))
                             for t, s, a, g in spec))


def oracle_suite(profile: str = "small", seed: int = 0) -> Dict:
    """Roundtrip, integer-Doppler equivalence and the Doppler sweep of the closed form.

    The zero-Doppler check runs at ``profile``. The Doppler sweep runs on the
    full delay-Doppler grid with a 4-antenna array.
    """
    cfg = ExperimentConfig.from_profile(profile)
    rng = np.random.default_rng([seed, 11])
    otfs = OtfsConfig(cfg.delay_bins, cfg.doppler_bins, cfg.cp_len, cfg.sample_period)
    X = rng.standard_normal((otfs.delay_bins, otfs.doppler_bins)) + 1j * rng.standard_normal(
        (otfs.delay_bins, otfs.doppler_bins))
    rt = float(np.linalg.norm(demodulate(modulate(X, otfs), otfs) - X) / np.linalg.norm(X))
    geom = GeometryConfig.from_carriers(cfg.num_antennas, cfg.f_ul)
    zero = oracle_residual(_oracle_user(0.0, cfg.cp_len), otfs, geom, rng)
    full = OtfsConfig(512, 128, 32, cfg.sample_period)
    small_geom = GeometryConfig.from_carriers(4, cfg.f_ul)
    sweep = [{"doppler_hz": nu, "residual": oracle_residual(_oracle_user(nu, 32), full, small_geom, rng)}
             for nu in ORACLE_DOPPLERS]
    res = [e["residual"] for e in sweep]
    return {"profile": profile, "roundtrip": rt, "zero_doppler": zero, "doppler_sweep": sweep,
            "monotone": all(a > b for a, b in zip(res, res[1:]))}


def random_signatures(num_users: int, num_paths: int, otfs: OtfsConfig, M: int,
                      rng: np.random.Generator, max_delay: int = 4, max_doppler: int = 2,
                      distinct_dd: bool = False):
    """On-grid DL users with distinct angle bins per user; returns (users, signatures).

    ``distinct_dd`` also makes the (delay, Doppler) pairs of each user distinct.
    """
    geom = GeometryConfig.from_carriers(M, 6e9)
    reach = [q for q in range(-M // 2, M // 2) if abs(q) < M // 2]
    users, sigs = [], []
    for k in range(num_users):
        qs = rng.choice(reach, size=num_paths, replace=False)
        if distinct_dd:
            cells = [(i, j) for i in range(max_delay + 1) for j in range(-max_doppler, max_doppler + 1)]
            pick = rng.choice(len(cells), size=num_paths, replace=False)
            triples = [(cells[c][0], cells[c][1], int(q)) for c, q in zip(pick, qs)]
        else:
            triples = [(int(rng.integers(0, max_delay + 1)), int(rng.integers(-max_doppler, max_doppler + 1)),
                        int(q)) for q in qs]
        gains = (rng.standard_normal(num_paths) + 1j * rng.standard_normal(num_paths)) * np.sqrt(0.5 / num_paths)
        paths = [path_from_signature(i, j, q, g, otfs, geom) for (i, j, q), g in zip(triples, gains)]
        users.append(UserChannel(tuple(paths), k))
        sigs.append(SignatureSet(triples))
    return users, sigs


def schedule_scenario(num_users: int, num_paths: int, otfs: OtfsConfig, M: int, seed: int = 0):
    """Draw users, schedule them for scheme 2 and run the checker: (plan, signatures, violations)."""
    rng = np.random.default_rng([seed, 13])
    _, sigs = random_signatures(num_users, num_paths, otfs, M, rng)
    bounds = dispersion_bounds(sigs)
    plan = schedule_paths(sigs, bounds, otfs, M, 1, num_paths)
    return plan, sigs, check_plan(plan, sigs, bounds, otfs, M)
