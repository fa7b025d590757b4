"""Uplink-to-downlink parameter reconstruction and delay-Doppler-angle signatures.

Dominant entries of the uplink gain matrix give (delay, Doppler, angle) per
path. Reciprocity copies delay and angle; Doppler scales with the carrier
wavelength ratio. The gain is only transferable in TDD, after rotating its
phase from the uplink reference sample to the downlink OTFS start.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .channel import DL, UL, GeometryConfig, PathParams, UserChannel
from .emvb import UlGridEstimate
from .observation import GridConfig, UlTrainingConfig
from .otfs import DdaChannel, OtfsConfig

TDD = "TDD"
FDD = "FDD"
FLOOR_EPS = 1e-9


@dataclass
class DominantPaths:
    coords: List[Tuple[int, int]]          # (angle index n*, delay index l*)
    gains: np.ndarray
    captured: float                        # captured energy fraction
    short: bool = False                    # fewer nonzeros than requested


def extract_dominant_paths(G: np.ndarray, num_paths: Optional[int] = None,
                           energy_fraction: float = 0.99) -> DominantPaths:
    """Largest-magnitude entries of ``G`` (angle x delay), taken greedily.

    Stops at ``num_paths`` entries when given, else once the captured energy
    reaches ``energy_fraction``. Ties go to the lower delay, then lower angle.
    """
    G = np.asarray(G)
    mag = np.abs(G) ** 2
    total = float(mag.sum())
    n_idx, l_idx = np.nonzero(mag > 0)
    order = np.lexsort((n_idx, l_idx, -mag[n_idx, l_idx]))
    coords, gains = [], []
    got = 0.0
    for k in order:
        if num_paths is not None and len(coords) >= num_paths:
            break
        if num_paths is None and total > 0 and got >= energy_fraction * total * (1 - 1e-12):
            break
        n, l = int(n_idx[k]), int(l_idx[k])
        coords.append((n, l))
        gains.append(G[n, l])
        got += mag[n, l]
    short = num_paths is not None and len(coords) < num_paths
    return DominantPaths(coords, np.array(gains, dtype=complex), got / total if total > 0 else 0.0, short)


@dataclass(frozen=True)
class UlPath:
    delay: float
    doppler: float
    angle: float
    coupled_gain: complex          # h * exp(j2*pi*nu*n_ref*T_s)
    ref_sample: int


def grid_to_params(coords: Sequence[Tuple[int, int]], est: UlGridEstimate, grid: GridConfig,
                   training: UlTrainingConfig, user_index: int = 0) -> List[UlPath]:
    """Physical uplink parameters at the selected grid coordinates."""
    ref = training.reference_sample(user_index)
    out = []
    for n, l in coords:
        if not (0 <= n < grid.num_angles and 0 <= l < grid.num_delays):
            raise IndexError(f"grid coordinate {(n, l)} out of bounds")
        out.append(UlPath(l * training.sample_period, float(est.upsilon[l]),
                          float(grid.angles[n] + est.beta[n]), complex(est.G[n, l]), ref))
    return out


@dataclass
class ReconstructedPathSet:
    paths: List[PathParams]        # DL parameters; gain referenced to sample n_o
    mode: str
    gain_valid: bool
    ref_sample: int                # n_o

    def user(self, user_index: int = 0) -> UserChannel:
        return UserChannel(tuple(self.paths), user_index)


def map_to_dl(ul_paths: Sequence[UlPath], mode: str, geom: GeometryConfig,
              otfs_start: int, sample_period: float) -> ReconstructedPathSet:
    """Reciprocity mapping plus the phase rotation to the OTFS start ``n_o``."""
    if mode not in (TDD, FDD):
        raise ValueError(f"unknown duplex mode {mode!r}")
    ratio = geom.ul_wavelength / geom.dl_wavelength
    paths = []
    for p in ul_paths:
        rot = np.exp(2j * np.pi * p.doppler * (ratio * otfs_start - p.ref_sample) * sample_period)
        paths.append(PathParams(p.delay, p.doppler * ratio, p.angle, complex(p.coupled_gain * rot)))
    return ReconstructedPathSet(paths, mode, mode == TDD, otfs_start)


def reconstructed_dda(rec: ReconstructedPathSet, cfg: OtfsConfig, geom: GeometryConfig) -> DdaChannel:
    """Closed-form DL channel from reconstructed parameters.

    The gains are already referenced to ``n_o``; only the one-sample offset
    of the channel snapshot is added.
    """
    NT = cfg.doppler_bins * cfg.symbol_period
    lam = geom.wavelength(DL)
    taps = [p.delay_taps(cfg.sample_period) for p in rec.paths]
    coeffs = [p.gain * np.exp(2j * np.pi * p.doppler * cfg.sample_period) for p in rec.paths]
    dpos = [p.doppler * NT for p in rec.paths]
    apos = [geom.num_antennas * geom.antenna_spacing * np.sin(p.angle) / lam for p in rec.paths]
    return DdaChannel(taps, coeffs, dpos, apos, cfg, geom.num_antennas)


def dl_user(user: UserChannel, geom: GeometryConfig) -> UserChannel:
    """True DL channel of a user: Doppler scaled by the carrier ratio."""
    ratio = geom.ul_wavelength / geom.dl_wavelength
    return user.with_paths([PathParams(p.delay, p.doppler * ratio, p.angle, p.gain) for p in user.paths])


@dataclass
class SignatureSet:
    triples: List[Tuple[int, int, int]] = field(default_factory=list)   # (i, j, q)

    @property
    def angle_bins(self) -> List[int]:
        return [q for _, _, q in self.triples]

    def unique(self) -> "SignatureSet":
        seen, out = set(), []
        for t in self.triples:
            if t not in seen:
                seen.add(t)
                out.append(t)
        return SignatureSet(out)

    def __len__(self) -> int:
        return len(self.triples)

    def to_json(self) -> str:
        return json.dumps([list(t) for t in self.triples])

    @classmethod
    def from_json(cls, text: str) -> "SignatureSet":
        return cls([tuple(int(v) for v in t) for t in json.loads(text)])


def _wrap(x: int, n: int) -> int:
    return (x + n // 2) % n - n // 2


def _quantize(x: float, rounding: str) -> int:
    if rounding == "floor":
        return int(np.floor(x + FLOOR_EPS))
    if rounding == "nearest":
        return int(np.floor(x + 0.5))
    raise ValueError(f"unknown rounding {rounding!r}")


def compute_signatures(paths: Sequence[PathParams], cfg: OtfsConfig, geom: GeometryConfig,
                       rounding: str = "floor") -> SignatureSet:
    """``q = floor(M d sin(theta)/lambda)``, ``i = floor(tau L_D df)``, ``j = floor(nu N_D T)``.

    Floor is toward minus infinity with a 1e-9 guard against representation
    error. Doppler and angle bins wrap periodically into the grid range.
    """
    M = geom.num_antennas
    lam = geom.wavelength(DL)
    NT = cfg.doppler_bins * cfg.symbol_period
    out = []
    for p in paths:
        i = _quantize(p.delay * cfg.delay_bins * cfg.subcarrier_spacing, "floor")
        if not 0 <= i < cfg.delay_bins:
            raise ValueError(f"delay bin {i} outside [0, {cfg.delay_bins})")
        j = _wrap(_quantize(p.doppler * NT, rounding), cfg.doppler_bins)
        q = _wrap(_quantize(M * geom.antenna_spacing * np.sin(p.angle) / lam, rounding), M)
        out.append((i, j, q))
    return SignatureSet(out)


def path_from_signature(i: int, j: int, q: int, gain: complex, cfg: OtfsConfig,
                        geom: GeometryConfig) -> PathParams:
    """On-grid DL path whose signature is exactly ``(i, j, q)``."""
    M = geom.num_antennas
    s = q * geom.wavelength(DL) / (M * geom.antenna_spacing)
    if abs(s) > 1:
        raise ValueError(f"angle bin {q} is not reachable with this array")
    NT = cfg.doppler_bins * cfg.symbol_period
    return PathParams(i * cfg.sample_period, j / NT, float(np.arcsin(s)), complex(gain))
