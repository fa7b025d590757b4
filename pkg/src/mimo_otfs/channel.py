"""Geometric high-mobility multipath channel.

Paths are described by (delay, Doppler, angle, gain). Delays are integer
multiples of the sampling period, angles are measured from array broadside.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import List, Optional, Sequence, Tuple

import numpy as np

SPEED_OF_LIGHT = 3e8

UL = "UL"
DL = "DL"


class ConfigurationError(ValueError):
    """Raised when a configuration cannot produce a valid scenario."""


@dataclass(frozen=True)
class GeometryConfig:
    """Uniform linear array at the base station."""

    num_antennas: int = 64
    antenna_spacing: float = 0.025      # [m], half wavelength at 6 GHz
    dl_wavelength: float = SPEED_OF_LIGHT / 6e9
    ul_wavelength: float = SPEED_OF_LIGHT / 6e9

    def __post_init__(self):
        if self.num_antennas < 1:
            raise ConfigurationError("num_antennas must be >= 1")
        if self.antenna_spacing <= 0 or self.dl_wavelength <= 0 or self.ul_wavelength <= 0:
            raise ConfigurationError("spacing and wavelengths must be positive")

    def wavelength(self, which_link: str = DL) -> float:
        if which_link == UL:
            return self.ul_wavelength
        if which_link == DL:
            return self.dl_wavelength
        raise ValueError(f"unknown link {which_link!r}")

    @classmethod
    def from_carriers(cls, num_antennas: int, f_ul: float, f_dl: Optional[float] = None,
                      spacing_wavelengths: float = 0.5) -> "GeometryConfig":
        """Array with spacing given in UL wavelengths (TDD when ``f_dl`` is None)."""
        f_dl = f_ul if f_dl is None else f_dl
        lam_ul = SPEED_OF_LIGHT / f_ul
        return cls(num_antennas, spacing_wavelengths * lam_ul, SPEED_OF_LIGHT / f_dl, lam_ul)


@dataclass(frozen=True)
class PathParams:
    delay: float        # [s]
    doppler: float      # [Hz]
    angle: float        # [rad]
    gain: complex

    def delay_taps(self, sample_period: float) -> int:
        taps = int(round(self.delay / sample_period))
        if abs(taps * sample_period - self.delay) > 1e-6 * sample_period:
            raise ConfigurationError(f"delay {self.delay} is not a multiple of T_s")
        return taps


@dataclass(frozen=True)
class UserChannel:
    paths: Tuple[PathParams, ...]
    user_index: int = 0

    @property
    def num_paths(self) -> int:
        return len(self.paths)

    def delays(self) -> np.ndarray:
        return np.array([p.delay for p in self.paths])

    def dopplers(self) -> np.ndarray:
        return np.array([p.doppler for p in self.paths])

    def angles(self) -> np.ndarray:
        return np.array([p.angle for p in self.paths])

    def gains(self) -> np.ndarray:
        return np.array([p.gain for p in self.paths], dtype=complex)

    def with_paths(self, paths: Sequence[PathParams]) -> "UserChannel":
        return replace(self, paths=tuple(paths))


@dataclass(frozen=True)
class ScenarioConfig:
    """Random draw ranges for K users with P paths each.

    ``delay_pool`` holds delays in units of the sampling period.
    ``angle_choices``/``doppler_choices``, when given, replace the uniform
    intervals with uniform draws from a finite set (on-grid scenarios).
    """

    num_users: int = 1
    num_paths: int = 12
    delay_pool: Tuple[int, ...] = tuple(range(16))
    angle_range: Tuple[float, float] = (np.deg2rad(-10.0), np.deg2rad(50.0))
    doppler_range: Tuple[float, float] = (-2220.0, 2220.0)
    rng_seed: int = 0
    distinct_angles: bool = False
    distinct_delay_doppler: bool = False
    distinct_delays: bool = False
    angle_bin_width: Optional[float] = None
    angle_choices: Optional[Tuple[float, ...]] = None
    doppler_choices: Optional[Tuple[float, ...]] = None


def steering(theta: float, cfg: GeometryConfig, which_link: str = DL) -> Tuple[np.ndarray, np.ndarray]:
    """ULA steering vector a(theta) and its derivative da/dtheta."""
    m = np.arange(cfg.num_antennas)
    ratio = cfg.antenna_spacing / cfg.wavelength(which_link)
    a = np.exp(2j * np.pi * m * ratio * np.sin(theta))
    b = 2j * np.pi * m * ratio * np.cos(theta) * a
    return a, b


def _draw_angles(rng: np.random.Generator, cfg: ScenarioConfig) -> np.ndarray:
    P = cfg.num_paths
    lo, hi = cfg.angle_range
    for _ in range(1000):
        if cfg.angle_choices is not None:
            choices = np.asarray(cfg.angle_choices, dtype=float)
            theta = rng.choice(choices, size=P, replace=not cfg.distinct_angles or P > len(choices))
        else:
            theta = rng.uniform(lo, hi, size=P)
        if not cfg.distinct_angles:
            return theta
        width = cfg.angle_bin_width
        if width is None:
            raise ConfigurationError("distinct_angles needs angle_bin_width")
        bins = np.floor(theta / width)
        if len(np.unique(bins)) == P:
            return theta
    raise ConfigurationError("could not draw angle-separable paths")


def sample_paths(cfg: ScenarioConfig, sample_period: float = 1 / 20e6,
                 rng: Optional[np.random.Generator] = None) -> List[UserChannel]:
    """Draw ``num_users`` channels; deterministic for a given seed."""
    if len(cfg.delay_pool) == 0:
        raise ConfigurationError("delay_pool is empty")
    if cfg.num_paths < 1 or cfg.num_users < 1:
        raise ConfigurationError("need at least one user and one path")
    rng = np.random.default_rng(cfg.rng_seed) if rng is None else rng
    pool = np.asarray(cfg.delay_pool, dtype=int)
    P = cfg.num_paths
    users = []
    for k in range(cfg.num_users):
        for _ in range(1000):
            if cfg.distinct_delays and P > len(pool):
                raise ConfigurationError("distinct_delays needs num_paths <= len(delay_pool)")
            taps = rng.choice(pool, size=P, replace=not cfg.distinct_delays)
            if cfg.doppler_choices is not None:
                nu = rng.choice(np.asarray(cfg.doppler_choices, dtype=float), size=P)
            else:
                nu = rng.uniform(*cfg.doppler_range, size=P)
            pairs = set(zip(taps.tolist(), np.round(nu, 6).tolist()))
            if not cfg.distinct_delay_doppler or len(pairs) == P:
                break
        else:
            raise ConfigurationError("could not draw distinct delay-Doppler pairs")
        theta = _draw_angles(rng, cfg)
        gains = (rng.standard_normal(P) + 1j * rng.standard_normal(P)) * np.sqrt(0.5 / P)
        paths = tuple(PathParams(float(t * sample_period), float(v), float(a), complex(g))
                      for t, v, a, g in zip(taps, nu, theta, gains))
        users.append(UserChannel(paths, k))
    return users


def channel_at(user: UserChannel, delay_tap: int, time_index: int, cfg: GeometryConfig,
               sample_period: float, which_link: str = DL) -> np.ndarray:
    """Antenna-domain channel h_l(r) for delay tap ``l`` at sample ``r``."""
    if delay_tap < 0:
        raise ValueError("delay_tap must be nonnegative")
    h = np.zeros(cfg.num_antennas, dtype=complex)
    for p in user.paths:
        if p.delay_taps(sample_period) != delay_tap:
            continue
        a, _ = steering(p.angle, cfg, which_link)
        h += p.gain * np.exp(2j * np.pi * p.doppler * time_index * sample_period) * a
    return h


def doppler_limit(speed_kmh: float, carrier_hz: float = 6e9) -> float:
    """Maximum Doppler shift for a terminal moving at ``speed_kmh``."""
    return speed_kmh / 3.6 * carrier_hz / SPEED_OF_LIGHT
