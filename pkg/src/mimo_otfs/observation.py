"""Uplink training observation model.

The received training block of one user is ``Y = A~ G~ C + V`` with
``A~ = A + B diag(beta)`` (first-order off-grid steering), ``G~`` the sparse
angle x delay gain matrix and ``C`` the Doppler-modulated cyclic-shift
training matrix. Vectorized: ``y = Phi g`` with ``g = vec(G~)`` (column-major,
index ``l * N + n``) and ``y`` stacked per time sample (index ``n * M + m``).
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from functools import cached_property
from typing import Optional

import numpy as np

from .channel import UL, ConfigurationError, GeometryConfig, UserChannel, steering


@dataclass(frozen=True)
class GridConfig:
    """Uniform angle grid ``angle_start + n * r`` and delay grid ``{0..L-1} T_s``."""

    num_angles: int = 90
    num_delays: int = 20
    angle_start: float = -np.pi / 2
    angle_stop: float = np.pi / 2       # excluded endpoint

    def __post_init__(self):
        if self.num_angles < 1 or self.num_delays < 1:
            raise ConfigurationError("grid sizes must be positive")
        if self.angle_stop <= self.angle_start:
            raise ConfigurationError("empty angle interval")

    @property
    def interval(self) -> float:
        return (self.angle_stop - self.angle_start) / self.num_angles

    @property
    def angles(self) -> np.ndarray:
        return self.angle_start + self.interval * np.arange(self.num_angles)

    @property
    def size(self) -> int:
        return self.num_angles * self.num_delays

    def nearest_angle(self, theta) -> np.ndarray:
        idx = np.rint((np.asarray(theta) - self.angle_start) / self.interval).astype(int)
        return np.clip(idx, 0, self.num_angles - 1)

    def flat_index(self, angle_idx, delay_idx):
        return np.asarray(delay_idx) * self.num_angles + np.asarray(angle_idx)

    def unflatten(self, flat):
        flat = np.asarray(flat)
        return flat % self.num_angles, flat // self.num_angles


def random_training(length: int, power: Optional[float] = None,
                    rng: Optional[np.random.Generator] = None) -> np.ndarray:
    """Constant-amplitude, random-phase sequence with ``||t||^2 = power``."""
    rng = np.random.default_rng(0) if rng is None else rng
    power = float(length) if power is None else power
    return np.sqrt(power / length) * np.exp(2j * np.pi * rng.random(length))


@dataclass(frozen=True)
class UlTrainingConfig:
    training: np.ndarray = field(default_factory=lambda: random_training(40))
    cp_len: int = 32
    train_start: int = 0
    sample_period: float = 1 / 20e6

    def __post_init__(self):
        t = np.asarray(self.training, dtype=complex)
        if t.ndim != 1 or t.size < 1:
            raise ConfigurationError("training must be a nonempty vector")
        object.__setattr__(self, "training", t)

    @property
    def train_len(self) -> int:
        return self.training.size

    @property
    def power(self) -> float:
        return float(np.vdot(self.training, self.training).real)

    def slot_offset(self, user_index: int) -> int:
        """Absolute start sample of a user's training slot (0-based user index)."""
        return self.train_start + (self.cp_len + self.train_len) * user_index

    def reference_sample(self, user_index: int) -> int:
        """Absolute sample of the first CP-free training sample."""
        return self.slot_offset(user_index) + self.cp_len

    def end_sample(self, num_users: int) -> int:
        return self.slot_offset(num_users)


def build_dictionaries(grid: GridConfig, geom: GeometryConfig, which_link: str = UL):
    """Steering dictionary ``A`` and its angle derivative ``B`` (both M x N)."""
    cols = [steering(th, geom, which_link) for th in grid.angles]
    A = np.stack([c[0] for c in cols], axis=1)
    B = np.stack([c[1] for c in cols], axis=1)
    return A, B


def shift_matrix(training: np.ndarray, num_delays: int) -> np.ndarray:
    """``D[l, n] = t[(n - l) mod N_t]`` (rows ``t^T J_l``)."""
    t = np.asarray(training)
    n = np.arange(t.size)
    return t[(n[None, :] - np.arange(num_delays)[:, None]) % t.size]


def taylor_doppler(upsilon: np.ndarray, train_len: int, sample_period: float) -> np.ndarray:
    """First-order Doppler vectors ``1 + j2*pi*n*T_s*v`` as an ``(L, N_t)`` array."""
    n = np.arange(train_len)
    return 1 + 2j * np.pi * sample_period * np.outer(upsilon, n)


def exact_doppler(upsilon: np.ndarray, train_len: int, sample_period: float) -> np.ndarray:
    n = np.arange(train_len)
    return np.exp(2j * np.pi * sample_period * np.outer(upsilon, n))


@dataclass
class MeasurementPack:
    """Observation operator for one user at fixed ``(beta, upsilon)``.

    ``Phi`` is only materialized on request; solvers use the Kronecker
    identities ``Phi^H Phi = (conj(C) C^T) kron (A~^H A~)`` and
    ``Phi^H y = vec(A~^H Y C^H)``.
    """

    A: np.ndarray
    B: np.ndarray
    D: np.ndarray
    C: np.ndarray
    beta: np.ndarray
    upsilon: np.ndarray
    y: np.ndarray
    sample_period: float

    @property
    def num_antennas(self) -> int:
        return self.A.shape[0]

    @property
    def num_angles(self) -> int:
        return self.A.shape[1]

    @property
    def num_delays(self) -> int:
        return self.C.shape[0]

    @property
    def train_len(self) -> int:
        return self.C.shape[1]

    @cached_property
    def A_tilde(self) -> np.ndarray:
        return self.A + self.B * self.beta[None, :]

    @property
    def Y(self) -> np.ndarray:
        """Observation as an ``M x N_t`` matrix."""
        return self.y.reshape(self.train_len, self.num_antennas).T

    @cached_property
    def Phi(self) -> np.ndarray:
        # row block n: c_n^T kron A~
        At = self.A_tilde
        return np.concatenate([np.kron(self.C[:, n][None, :], At) for n in range(self.train_len)], axis=0)

    @cached_property
    def gram(self) -> np.ndarray:
        At = self.A_tilde
        return np.kron(np.conj(self.C) @ self.C.T, At.conj().T @ At)

    @cached_property
    def phi_h_y(self) -> np.ndarray:
        At = self.A_tilde
        return (At.conj().T @ self.Y @ self.C.conj().T).reshape(-1, order="F")

    def apply(self, g: np.ndarray) -> np.ndarray:
        """``Phi g`` without forming ``Phi``."""
        G = np.asarray(g).reshape(self.num_angles, self.num_delays, order="F")
        return (self.A_tilde @ G @ self.C).T.reshape(-1)

    def columns(self, idx) -> np.ndarray:
        """Selected columns of ``Phi`` (``N_t M x len(idx)``)."""
        idx = np.atleast_1d(np.asarray(idx, dtype=int))
        n_ang, l_del = idx % self.num_angles, idx // self.num_angles
        # entry (n*M + m, k) = C[l_k, n] * A~[m, n_k]
        cols = self.C[l_del, :].T[:, None, :] * self.A_tilde[:, n_ang][None, :, :]
        return cols.reshape(self.train_len * self.num_antennas, idx.size)

    def with_params(self, beta=None, upsilon=None) -> "MeasurementPack":
        beta = self.beta if beta is None else np.asarray(beta, dtype=float)
        upsilon = self.upsilon if upsilon is None else np.asarray(upsilon, dtype=float)
        C = self.D * taylor_doppler(upsilon, self.train_len, self.sample_period)
        return MeasurementPack(self.A, self.B, self.D, C, beta, upsilon, self.y, self.sample_period)


TAYLOR_WARN = 0.1


def build_measurement(training: np.ndarray, upsilon, beta, y, A: np.ndarray, B: np.ndarray,
                      sample_period: float) -> MeasurementPack:
    """Assemble the off-grid, first-order Doppler observation operator."""
    training = np.asarray(training, dtype=complex)
    upsilon = np.asarray(upsilon, dtype=float)
    beta = np.asarray(beta, dtype=float)
    if beta.shape != (A.shape[1],):
        raise ValueError("beta length must equal the number of angle grids")
    accum = 2 * np.pi * sample_period * training.size * np.max(np.abs(upsilon), initial=0.0)
    if accum > TAYLOR_WARN:
        warnings.warn(f"Doppler phase accumulation {accum:.3f} leaves the first-order regime",
                      RuntimeWarning, stacklevel=2)
    D = shift_matrix(training, upsilon.size)
    C = D * taylor_doppler(upsilon, training.size, sample_period)
    y = np.zeros(training.size * A.shape[0], dtype=complex) if y is None else np.asarray(y, dtype=complex)
    return MeasurementPack(A, B, D, C, beta, upsilon, y, sample_period)


def simulate_ul_rx(user: UserChannel, cfg: UlTrainingConfig, geom: GeometryConfig,
                   noise_var: float = 0.0, rng: Optional[np.random.Generator] = None,
                   num_delays: Optional[int] = None) -> np.ndarray:
    """Received training samples of one user, exact Doppler, stacked ``(N_t M,)``."""
    t = cfg.training
    Nt, M = t.size, geom.num_antennas
    n = np.arange(Nt)
    ref = cfg.reference_sample(user.user_index)
    Y = np.zeros((Nt, M), dtype=complex)
    for p in user.paths:
        tap = p.delay_taps(cfg.sample_period)
        if tap > cfg.cp_len or (num_delays is not None and tap >= num_delays):
            raise ConfigurationError(f"path delay of {tap} samples outside the training model")
        a, _ = steering(p.angle, geom, UL)
        phase = np.exp(2j * np.pi * p.doppler * (ref + n) * cfg.sample_period)
        Y += np.outer(p.gain * phase * t[(n - tap) % Nt], a)
    if noise_var > 0:
        rng = np.random.default_rng() if rng is None else rng
        Y += np.sqrt(noise_var / 2) * (rng.standard_normal(Y.shape) + 1j * rng.standard_normal(Y.shape))
    return Y.reshape(-1)


@dataclass
class GridTruth:
    """Grid projection of a user's true parameters (what the solver can represent)."""

    G: np.ndarray              # N x L, gains with their reference-time phase
    beta: np.ndarray           # N, power-weighted offset per angle column
    upsilon: np.ndarray        # L, power-weighted Doppler per delay row
    angle_idx: np.ndarray      # per path
    delay_idx: np.ndarray      # per path

    @property
    def g(self) -> np.ndarray:
        return self.G.reshape(-1, order="F")

    def support(self) -> set:
        return set(zip(self.angle_idx.tolist(), self.delay_idx.tolist()))


def project_to_grid(user: UserChannel, grid: GridConfig, cfg: UlTrainingConfig) -> GridTruth:
    N, L = grid.num_angles, grid.num_delays
    ref = cfg.reference_sample(user.user_index)
    G = np.zeros((N, L), dtype=complex)
    bw = np.zeros(N)
    bsum = np.zeros(N)
    uw = np.zeros(L)
    usum = np.zeros(L)
    ai, di = [], []
    for p in user.paths:
        n = int(grid.nearest_angle(p.angle))
        l = p.delay_taps(cfg.sample_period)
        if l >= L:
            raise ConfigurationError("delay beyond the delay grid")
        G[n, l] += p.gain * np.exp(2j * np.pi * p.doppler * ref * cfg.sample_period)
        w = abs(p.gain) ** 2
        bw[n] += w
        bsum[n] += w * (p.angle - grid.angles[n])
        uw[l] += w
        usum[l] += w * p.doppler
        ai.append(n)
        di.append(l)
    beta = np.divide(bsum, bw, out=np.zeros(N), where=bw > 0)
    upsilon = np.divide(usum, uw, out=np.zeros(L), where=uw > 0)
    return GridTruth(G, beta, upsilon, np.array(ai, dtype=int), np.array(di, dtype=int))
