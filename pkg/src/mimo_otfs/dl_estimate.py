"""Downlink delay-Doppler-angle channel estimation, path scheduling and pilot overhead.

All schemes estimate the dominant entries ``h-bar[i, j, q]`` at known
signatures. The received model on the DD grid is

    y[l, n] = sum_p exp(j2*pi*l*j_p/(N_D(L_D+L_cp))) h-bar_p xbar[q_p, l - i_p, n - j_p]

with modular indices (stored Doppler column ``n`` holds ``n - N_D/2``), i.e. the
twist phase uses the output delay row, as in ``otfs.dd_io_predict``.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .channel import ConfigurationError
from .otfs import OtfsConfig
from .reconstruct import SignatureSet


class SchedulingError(RuntimeError):
    """Raised when the delay-Doppler-angle resource cannot hold all groups."""


@dataclass(frozen=True)
class DispersionBounds:
    l_G: int
    n_G: int

    def __post_init__(self):
        if self.l_G < 0 or self.n_G < 0:
            raise ValueError("dispersion bounds must be nonnegative")


def dispersion_bounds(signatures: Sequence[SignatureSet]) -> DispersionBounds:
    triples = [t for s in signatures for t in s.triples]
    if not triples:
        raise ValueError("no signatures")
    return DispersionBounds(max(i for i, _, _ in triples), max(abs(j) for _, j, _ in triples))


def twist_mask(rows, dopplers, cfg: OtfsConfig) -> np.ndarray:
    """``exp(j2*pi*l*j/(N_D(L_D+L_cp)))`` for output rows ``l`` and Doppler bins ``j``."""
    return np.exp(2j * np.pi * np.multiply.outer(np.asarray(rows), np.asarray(dopplers))
                  / cfg.twist_denominator)


# ---------------------------------------------------------------- pilot patterns

@dataclass
class PilotPattern:
    """Sparse angle-layer pilot placements ``(layer s, l, n) -> value``.

    ``s`` is the stored layer ``q + M/2``, ``n`` the stored Doppler column.
    """

    scheme: int
    power: float
    placements: Dict[Tuple[int, int, int], complex] = field(default_factory=dict)
    region: Optional[Tuple[int, int, int, int]] = None     # scheme 3: (l_s, n_s, H_d, H_D)
    pilot_column: Optional[int] = None                    # scheme 1: n_G

    def to_grid(self, num_layers: int, cfg: OtfsConfig) -> np.ndarray:
        X = np.zeros((num_layers, cfg.delay_bins, cfg.doppler_bins), dtype=complex)
        for (s, l, n), v in self.placements.items():
            X[s, l, n] = v
        return X

    def to_json(self) -> str:
        d = {"scheme": self.scheme, "power": self.power, "region": self.region,
             "pilot_column": self.pilot_column,
             "placements": [[s, l, n, v.real, v.imag] for (s, l, n), v in sorted(self.placements.items())]}
        return json.dumps(d)

    @classmethod
    def from_json(cls, text: str) -> "PilotPattern":
        d = json.loads(text)
        pl = {(int(s), int(l), int(n)): complex(re, im) for s, l, n, re, im in d["placements"]}
        region = tuple(d["region"]) if d["region"] is not None else None
        return cls(int(d["scheme"]), float(d["power"]), pl, region, d["pilot_column"])


def _layer(q: int, M: int) -> int:
    return q + M // 2


def scheme1_pattern(signatures: Sequence[SignatureSet], bounds: DispersionBounds, num_layers: int,
                    cfg: OtfsConfig, power: float = 1.0) -> PilotPattern:
    """Embedded pilot ``sqrt(power)`` at ``(0, n_G)`` on every used angle layer."""
    if 2 * bounds.n_G >= cfg.doppler_bins or bounds.l_G >= cfg.delay_bins:
        raise ConfigurationError("dispersion exceeds the delay-Doppler grid")
    layers = sorted({_layer(q, num_layers) for s in signatures for q in s.angle_bins})
    pl = {(s, 0, bounds.n_G): complex(np.sqrt(power)) for s in layers}
    return PilotPattern(1, power, pl, pilot_column=bounds.n_G)


def scheme1_estimate(Y: np.ndarray, signatures: SignatureSet, pattern: PilotPattern,
                     cfg: OtfsConfig) -> np.ndarray:
    """Read each path at ``(i_p, n_G + j_p)`` and undo pilot scaling and twist."""
    pairs = [(i, j) for i, j, _ in signatures.triples]
    if len(set(pairs)) != len(pairs):
        raise ValueError("scheme 1 needs distinct (delay, Doppler) signatures per user")
    nG = pattern.pilot_column
    out = np.empty(len(pairs), dtype=complex)
    for k, (i, j) in enumerate(pairs):
        y = Y[i % cfg.delay_bins, (nG + j) % cfg.doppler_bins]
        out[k] = y / np.sqrt(pattern.power) * np.conj(twist_mask(i, j, cfg))
    return out


def dft_training(num_paths: int, power: float) -> np.ndarray:
    """``P x P`` training with ``T^H T = power * I`` (scaled unitary DFT)."""
    v = np.arange(num_paths)
    return np.sqrt(power / num_paths) * np.exp(-2j * np.pi * np.outer(v, v) / num_paths)


def scheme3_pattern(signatures: Sequence[SignatureSet], num_layers: int, cfg: OtfsConfig,
                    l_s: int, n_s: int, H_d: int, H_D: int, power: float = 1.0,
                    rng: Optional[np.random.Generator] = None) -> PilotPattern:
    """Random constant-modulus pilots filling ``[l_s, l_s+H_d) x [n_s, n_s+H_D)`` on used layers.

    The region must keep every dispersed copy inside the grid without
    wrapping: ``l + i < L_D - 1`` and ``0 < n + j < N_D - 1``.
    """
    if H_d < 1 or H_D < 1:
        raise ConfigurationError("pilot region must be nonempty")
    bounds = dispersion_bounds(signatures)
    j_min = min(j for s in signatures for _, j, _ in s.triples)
    j_max = max(j for s in signatures for _, j, _ in s.triples)
    if l_s < 0 or l_s + H_d - 1 + bounds.l_G >= cfg.delay_bins - 1:
        raise ConfigurationError("pilot region violates the delay boundary l + i < L_D - 1")
    if n_s + j_min <= 0 or n_s + H_D - 1 + j_max >= cfg.doppler_bins - 1:
        raise ConfigurationError("pilot region violates the Doppler boundary 0 < n + j < N_D - 1")
    rng = np.random.default_rng(0) if rng is None else rng
    layers = sorted({_layer(q, num_layers) for s in signatures for q in s.angle_bins})
    amp = np.sqrt(power)
    pl = {}
    for s in layers:
        ph = np.exp(2j * np.pi * rng.random((H_d, H_D)))
        for u in range(H_d):
            for v in range(H_D):
                pl[(s, l_s + u, n_s + v)] = complex(amp * ph[u, v])
    return PilotPattern(3, power, pl, region=(l_s, n_s, H_d, H_D))


def default_scheme3_region(signatures: Sequence[SignatureSet], cfg: OtfsConfig, H_d: int = 4,
                           H_D: int = 4) -> Tuple[int, int, int, int]:
    """Smallest-index region satisfying the boundary assumption."""
    j_min = min(j for s in signatures for _, j, _ in s.triples)
    return 0, max(1 - j_min, 0), H_d, H_D


def scheme3_system(signatures: SignatureSet, pattern: PilotPattern, l_G: int, num_layers: int,
                   cfg: OtfsConfig) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """``Psi^e`` and the observation window ``(rows, cols)`` for one user."""
    l_s, n_s, H_d, H_D = pattern.region
    i_arr = np.array([t[0] for t in signatures.triples])
    j_arr = np.array([t[1] for t in signatures.triples])
    q_arr = np.array([t[2] for t in signatures.triples])
    rows = np.arange(l_s + i_arr.min(), l_s + H_d + l_G)
    cols = np.arange(n_s + j_arr.min(), n_s + H_D + j_arr.max())
    X = pattern.to_grid(num_layers, cfg)
    L, N = cfg.delay_bins, cfg.doppler_bins
    # element ((H_D + j_max - j_min)(l - l0) + n - n0, p): row-major over the window
    ll, nn = np.meshgrid(rows, cols, indexing="ij")
    Psi = np.empty((ll.size, len(signatures)), dtype=complex)
    for p, (i, j, q) in enumerate(zip(i_arr, j_arr, q_arr)):
        xe = X[_layer(q, num_layers), (ll - i) % L, (nn - j) % N]
        Psi[:, p] = (twist_mask(ll, j, cfg) * xe).reshape(-1)
    return Psi, rows, cols


def scheme3_estimate(Y: np.ndarray, signatures: SignatureSet, pattern: PilotPattern, l_G: int,
                     num_layers: int, cfg: OtfsConfig, rcond: float = 1e-10) -> np.ndarray:
    """Least squares ``(Psi^H Psi)^-1 Psi^H y`` over the dispersed pilot window."""
    Psi, rows, cols = scheme3_system(signatures, pattern, l_G, num_layers, cfg)
    y = Y[np.ix_(rows % cfg.delay_bins, cols % cfg.doppler_bins)].reshape(-1)
    s = np.linalg.svd(Psi, compute_uv=False)
    if s.size == 0 or s[-1] <= rcond * s[0]:
        a, b, c = _coherent_pair(Psi)
        raise np.linalg.LinAlgError(
            f"Psi^e is rank deficient: columns {a} {signatures.triples[a]} and {b} "
            f"{signatures.triples[b]} have coherence {c:.6f}")
    gram = Psi.conj().T @ Psi
    return np.linalg.solve(gram, Psi.conj().T @ y)


def _coherent_pair(Psi: np.ndarray) -> Tuple[int, int, float]:
    nrm = np.linalg.norm(Psi, axis=0)
    nrm[nrm == 0] = 1.0
    C = np.abs((Psi / nrm).conj().T @ (Psi / nrm))
    np.fill_diagonal(C, -1.0)
    if C.shape[0] < 2:
        return 0, 0, 1.0
    a, b = np.unravel_index(np.argmax(C), C.shape)
    return int(min(a, b)), int(max(a, b)), float(C[a, b])


# ---------------------------------------------------------------- scheduling

@dataclass(frozen=True)
class Rect:
    l: int
    n: int
    W_d: int
    W_D: int


@dataclass
class SchedulingPlan:
    groups: List[List[int]]
    regions: List[Rect]                                  # per group A^r
    D_theta: int
    D_tau: int
    D_nu: int
    # (user, path) -> transmit origin (l, n) of A^t on layer q_{k,p}
    transmit: Dict[Tuple[int, int], Tuple[int, int]] = field(default_factory=dict)

    def group_of(self, user: int) -> int:
        for g, members in enumerate(self.groups):
            if user in members:
                return g
        raise KeyError(user)

    def region_of(self, user: int) -> Rect:
        return self.regions[self.group_of(user)]

    def to_json(self) -> str:
        d = {"groups": self.groups, "regions": [asdict(r) for r in self.regions],
             "D_theta": self.D_theta, "D_tau": self.D_tau, "D_nu": self.D_nu,
             "transmit": [[k, p, l, n] for (k, p), (l, n) in sorted(self.transmit.items())]}
        return json.dumps(d)

    @classmethod
    def from_json(cls, text: str) -> "SchedulingPlan":
        d = json.loads(text)
        return cls([list(g) for g in d["groups"]], [Rect(**r) for r in d["regions"]],
                   d["D_theta"], d["D_tau"], d["D_nu"],
                   {(k, p): (l, n) for k, p, l, n in d["transmit"]})


def circular_distance(a: int, b: int, n: int) -> int:
    d = abs(a - b) % n
    return min(d, n - d)


def angle_set_distance(qa: Sequence[int], qb: Sequence[int], M: int) -> int:
    return min(circular_distance(a, b, M) for a in qa for b in qb)


def default_gaps(bounds: DispersionBounds, D_theta: int = 2) -> Tuple[int, int, int]:
    """``(D_theta, D_tau, D_nu)`` with one bin beyond the largest relative shift."""
    return D_theta, bounds.l_G + 1, 2 * bounds.n_G + 1


def schedule_paths(signatures: Sequence[SignatureSet], bounds: DispersionBounds, cfg: OtfsConfig,
                   num_layers: int, W_d: int, W_D: int, D_theta: Optional[int] = None,
                   D_tau: Optional[int] = None, D_nu: Optional[int] = None) -> SchedulingPlan:
    """Greedy first-fit grouping over angle, then delay-Doppler tiling of group regions."""
    dt, dl, dn = default_gaps(bounds)
    D_theta = dt if D_theta is None else D_theta
    D_tau = dl if D_tau is None else D_tau
    D_nu = dn if D_nu is None else D_nu
    if W_d < 1 or W_D < 1:
        raise ConfigurationError("region size must be positive")
    for k, s in enumerate(signatures):
        if len(set(s.angle_bins)) != len(s):
            raise ConfigurationError(f"user {k} has paths sharing an angle bin")
    groups: List[List[int]] = []
    for k, s in enumerate(signatures):
        for g in groups:
            if all(angle_set_distance(s.angle_bins, signatures[m].angle_bins, num_layers)
                   >= max(D_theta, 1) for m in g):
                g.append(k)
                break
        else:
            groups.append([k])
    # tile the grid with strides leaving min |l1 - l2| >= D_tau (and circularly)
    L, N = cfg.delay_bins, cfg.doppler_bins
    step_l, step_n = W_d + max(D_tau, 1) - 1, W_D + max(D_nu, 1) - 1
    rows = L // step_l if W_d <= L else 0
    cols = N // step_n if W_D <= N else 0
    if len(groups) > rows * cols:
        raise SchedulingError(f"{len(groups)} groups need regions {W_d}x{W_D} with gaps "
                              f"({D_tau}, {D_nu}); the {L}x{N} grid holds {rows * cols}")
    regions = []
    for g in range(len(groups)):
        r, c = divmod(g, cols)
        regions.append(Rect(r * step_l, c * step_n, W_d, W_D))
    transmit = {}
    for g, members in enumerate(groups):
        rect = regions[g]
        for k in members:
            for p, (i, j, _) in enumerate(signatures[k].triples):
                transmit[(k, p)] = ((rect.l - i) % L, (rect.n - j) % N)
    return SchedulingPlan(groups, regions, D_theta, D_tau, D_nu, transmit)


def scheme2_pattern(plan: SchedulingPlan, signatures: Sequence[SignatureSet], num_layers: int,
                    cfg: OtfsConfig, power: float = 1.0, data_rng: Optional[np.random.Generator] = None
                    ) -> PilotPattern:
    """Training in row 0 of every transmit block; optional random data elsewhere."""
    L, N = cfg.delay_bins, cfg.doppler_bins
    pl = {}
    for k, sig in enumerate(signatures):
        P = len(sig)
        if P == 0:
            continue
        rect = plan.region_of(k)
        if rect.W_D < P:
            raise ConfigurationError(f"region width {rect.W_D} cannot hold {P} training symbols")
        T = dft_training(P, power)
        for p, (_, _, q) in enumerate(sig.triples):
            l0, n0 = plan.transmit[(k, p)]
            s = _layer(q, num_layers)
            for u in range(rect.W_d):
                for v in range(rect.W_D):
                    if u == 0 and v < P:
                        val = T[v, p]
                    elif data_rng is not None:
                        val = np.sqrt(power / P) * np.exp(2j * np.pi * data_rng.random())
                    else:
                        continue
                    pl[(s, (l0 + u) % L, (n0 + v) % N)] = complex(val)
    return PilotPattern(2, power, pl)


def scheme2_system(plan: SchedulingPlan, user: int, signatures: SignatureSet, pattern: PilotPattern,
                   num_layers: int, cfg: OtfsConfig) -> np.ndarray:
    """Training matrix ``T_k`` (row ``v`` observes ``(l_k, n_k + v)``)."""
    rect = plan.region_of(user)
    P = len(signatures)
    L, N = cfg.delay_bins, cfg.doppler_bins
    T = np.zeros((P, P), dtype=complex)
    for p, (i, j, q) in enumerate(signatures.triples):
        s = _layer(q, num_layers)
        for v in range(P):
            x = pattern.placements.get((s, (rect.l - i) % L, (rect.n + v - j) % N), 0j)
            T[v, p] = twist_mask(rect.l, j, cfg) * x
    return T


def scheme2_estimate(Y: np.ndarray, plan: SchedulingPlan, user: int, signatures: SignatureSet,
                     pattern: PilotPattern, num_layers: int, cfg: OtfsConfig) -> np.ndarray:
    """``T_k^-1`` applied to the first ``P`` grids of the user's observation row."""
    rect = plan.region_of(user)
    P = len(signatures)
    T = scheme2_system(plan, user, signatures, pattern, num_layers, cfg)
    if np.linalg.matrix_rank(T) < P:
        raise np.linalg.LinAlgError("training matrix T_k is singular; choose another training placement")
    y = Y[rect.l % cfg.delay_bins, (rect.n + np.arange(P)) % cfg.doppler_bins]
    return np.linalg.solve(T, y)


def check_plan(plan: SchedulingPlan, signatures: Sequence[SignatureSet], bounds: DispersionBounds,
               cfg: OtfsConfig, num_layers: int) -> List[str]:
    """Independent constraint check; returns the list of violations (empty when valid)."""
    L, N = cfg.delay_bins, cfg.doppler_bins
    bad: List[str] = []
    users = sorted(k for g in plan.groups for k in g)
    if users != list(range(len(signatures))):
        bad.append("groups do not partition the users")
    if plan.D_tau < bounds.l_G + 1 or plan.D_nu < 2 * bounds.n_G + 1:
        bad.append("guard gaps smaller than the delay-Doppler dispersion")
    if len(plan.regions) != len(plan.groups):
        bad.append("one region per group required")
        return bad
    # within a group: disjoint angle sets at distance >= D_theta
    for g, members in enumerate(plan.groups):
        for a in range(len(members)):
            for b in range(a + 1, len(members)):
                qa = set(signatures[members[a]].angle_bins)
                qb = set(signatures[members[b]].angle_bins)
                if qa & qb:
                    bad.append(f"group {g}: users {members[a]} and {members[b]} share angle bins")
                gap = min(min(abs(x - y) % num_layers, num_layers - abs(x - y) % num_layers)
                          for x in qa for y in qb)
                if gap < plan.D_theta:
                    bad.append(f"group {g}: angle gap {gap} < D_theta")
    # across groups: region cells separated in delay or in Doppler (circular)
    cells = []
    for r in plan.regions:
        if r.W_d > L or r.W_D > N:
            bad.append(f"region {r} larger than the grid")
        cells.append((np.arange(r.l, r.l + r.W_d) % L, np.arange(r.n, r.n + r.W_D) % N))
    for a in range(len(cells)):
        for b in range(a + 1, len(cells)):
            dl = np.abs(cells[a][0][:, None] - cells[b][0][None, :])
            dl = np.minimum(dl, L - dl).min()
            dn = np.abs(cells[a][1][:, None] - cells[b][1][None, :])
            dn = np.minimum(dn, N - dn).min()
            if not (dl >= plan.D_tau or dn >= plan.D_nu):
                bad.append(f"regions of groups {a} and {b} violate the guard gaps ({dl}, {dn})")
    # alignment and transmit-region disjointness per layer
    occupied: Dict[Tuple[int, int, int], Tuple[int, int]] = {}
    for k, sig in enumerate(signatures):
        try:
            r = plan.regions[next(g for g, m in enumerate(plan.groups) if k in m)]
        except StopIteration:
            continue
        for p, (i, j, q) in enumerate(sig.triples):
            if (k, p) not in plan.transmit:
                bad.append(f"missing transmit region for user {k} path {p}")
                continue
            l0, n0 = plan.transmit[(k, p)]
            if (l0 + i) % L != r.l % L or (n0 + j) % N != r.n % N:
                bad.append(f"user {k} path {p} is not aligned with its observation region")
            for u in range(r.W_d):
                for v in range(r.W_D):
                    key = (q, (l0 + u) % L, (n0 + v) % N)
                    if key in occupied and occupied[key] != (k, p):
                        bad.append(f"transmit regions of {occupied[key]} and {(k, p)} overlap")
                        break
                    occupied[key] = (k, p)
    return bad


# ---------------------------------------------------------------- overhead

@dataclass(frozen=True)
class OverheadReport:
    ul_samples: int
    scheme1: int
    scheme2: int
    scheme3: int
    scheme: int

    @property
    def dl_grids(self) -> int:
        return {1: self.scheme1, 2: self.scheme2, 3: self.scheme3}[self.scheme]


def pilot_overhead(scheme: int, K: int, P: int, M: int, H_d: int, H_D: int, N_t: int,
                   L_cp: int) -> OverheadReport:
    """UL training samples and DL pilot grids of each scheme (upper bounds for 1 and 3)."""
    if scheme not in (1, 2, 3):
        raise ValueError("scheme must be 1, 2 or 3")
    return OverheadReport(K * (L_cp + N_t), min(K * P, M), K * P * P,
                          min(K * P * H_d * H_D, M * H_d * H_D), scheme)
