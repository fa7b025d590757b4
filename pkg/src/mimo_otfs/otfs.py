"""OTFS modulation over a massive MIMO array.

Grids are stored as ``(L_D, N_D)`` arrays whose second axis holds Doppler
index ``j`` in ``[-N_D/2, N_D/2)`` at column ``j + N_D/2``. Multi-antenna
blocks carry a leading antenna (or angle-layer) axis: ``(M, L_D, N_D)``.
Angle layers hold angle bin ``q`` in ``[-M/2, M/2)`` at ``q + M/2``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .channel import DL, GeometryConfig, UserChannel, steering


@dataclass(frozen=True)
class OtfsConfig:
    delay_bins: int = 512
    doppler_bins: int = 128
    cp_len: int = 32
    sample_period: float = 1 / 20e6
    otfs_start: int = 0

    def __post_init__(self):
        if self.delay_bins < 1 or self.doppler_bins < 2:
            raise ValueError("grid dimensions too small")
        if self.doppler_bins % 2:
            raise ValueError("doppler_bins must be even")
        if self.cp_len < 0 or self.cp_len > self.delay_bins:
            raise ValueError("cp_len must lie in [0, delay_bins]")

    @property
    def subcarrier_spacing(self) -> float:
        return 1.0 / (self.delay_bins * self.sample_period)

    @property
    def symbol_period(self) -> float:
        return (self.delay_bins + self.cp_len) * self.sample_period

    @property
    def doppler_resolution(self) -> float:
        return 1.0 / (self.doppler_bins * self.symbol_period)

    @property
    def block_len(self) -> int:
        return (self.delay_bins + self.cp_len) * self.doppler_bins

    @property
    def twist_denominator(self) -> int:
        return self.doppler_bins * (self.delay_bins + self.cp_len)


def dft_matrix(n: int) -> np.ndarray:
    """Unitary DFT matrix with entries exp(-j2*pi*p*q/n)/sqrt(n)."""
    k = np.arange(n)
    return np.exp(-2j * np.pi * np.outer(k, k) / n) / np.sqrt(n)


def modulate(X: np.ndarray, cfg: OtfsConfig) -> np.ndarray:
    """Delay-Doppler block(s) to CP-prefixed time samples.

    Accepts ``(L_D, N_D)`` or ``(M, L_D, N_D)``; returns ``(T,)`` or ``(M, T)``
    with ``T = (L_D + L_cp) N_D`` (OFDM symbols concatenated in time).
    """
    X = np.asarray(X)
    if X.shape[-2:] != (cfg.delay_bins, cfg.doppler_bins):
        raise ValueError(f"grid shape {X.shape[-2:]} does not match config")
    S = np.fft.ifft(X, axis=-1, norm="ortho")            # X F^H
    if cfg.cp_len:
        S = np.concatenate([S[..., -cfg.cp_len:, :], S], axis=-2)
    # vec(): columns are OFDM symbols
    return np.swapaxes(S, -1, -2).reshape(*X.shape[:-2], cfg.block_len)


def demodulate(z: np.ndarray, cfg: OtfsConfig) -> np.ndarray:
    """Received samples ``(..., T)`` to delay-Doppler grid(s)."""
    z = np.asarray(z)
    if z.shape[-1] != cfg.block_len:
        raise ValueError(f"stream length {z.shape[-1]} != {cfg.block_len}")
    Z = np.swapaxes(z.reshape(*z.shape[:-1], cfg.doppler_bins, cfg.delay_bins + cfg.cp_len), -1, -2)
    return np.fft.fft(Z[..., cfg.cp_len:, :], axis=-1, norm="ortho")


def propagate_time_domain(s: np.ndarray, user: UserChannel, cfg: OtfsConfig,
                          geom: GeometryConfig, noise_var: float = 0.0,
                          rng: Optional[np.random.Generator] = None,
                          which_link: str = DL) -> np.ndarray:
    """Exact linear time-varying propagation of per-antenna streams ``(M, T)``.

    The Doppler phase is referenced to absolute sample ``otfs_start + r``.
    """
    s = np.atleast_2d(np.asarray(s, dtype=complex))
    if s.shape[0] != geom.num_antennas:
        raise ValueError("stream count must equal num_antennas")
    T = s.shape[1]
    r = np.arange(T)
    z = np.zeros(T, dtype=complex)
    for p in user.paths:
        tap = p.delay_taps(cfg.sample_period)
        if tap > cfg.cp_len:
            raise ValueError(f"path delay of {tap} samples exceeds the CP ({cfg.cp_len})")
        a, _ = steering(p.angle, geom, which_link)
        beam = a @ s
        delayed = np.zeros(T, dtype=complex)
        delayed[tap:] = beam[:T - tap]
        z += p.gain * np.exp(2j * np.pi * p.doppler * (cfg.otfs_start + r) * cfg.sample_period) * delayed
    if noise_var > 0:
        rng = np.random.default_rng() if rng is None else rng
        z += np.sqrt(noise_var / 2) * (rng.standard_normal(T) + 1j * rng.standard_normal(T))
    return z


def periodic_kernel(x: np.ndarray, n: int) -> np.ndarray:
    """sum_{k<n} exp(j2*pi*x*k/n): Dirichlet kernel times its linear phase."""
    k = np.arange(n)
    return np.exp(2j * np.pi * np.multiply.outer(x, k) / n).sum(axis=-1)


class DdaChannel:
    """P-sparse closed form of the delay-Doppler-space / -angle channel.

    ``coeffs`` already include the per-path phase of the first channel
    snapshot, i.e. ``h exp(j2*pi*nu*(n_o + 1)*T_s)``.
    """

    def __init__(self, taps, coeffs, doppler_pos, angle_pos, cfg: OtfsConfig, num_antennas: int):
        self.taps = np.asarray(taps, dtype=int)
        self.coeffs = np.asarray(coeffs, dtype=complex)
        self.doppler_pos = np.asarray(doppler_pos, dtype=float)   # nu * N_D * T
        self.angle_pos = np.asarray(angle_pos, dtype=float)       # M d sin(theta) / lambda
        self.cfg = cfg
        self.num_antennas = num_antennas

    @property
    def doppler_index(self) -> np.ndarray:
        N = self.cfg.doppler_bins
        return np.arange(-N // 2, N // 2)

    @property
    def angle_index(self) -> np.ndarray:
        M = self.num_antennas
        return np.arange(-(M // 2), M - M // 2)

    def doppler_kernels(self) -> np.ndarray:
        """(P, N_D) Doppler factors, stored with the +N_D/2 offset."""
        N = self.cfg.doppler_bins
        return periodic_kernel(self.doppler_pos[:, None] - self.doppler_index[None, :], N) / N

    def angle_kernels(self) -> np.ndarray:
        """(P, M) normalized spatial DFT of the steering phases, +M/2 offset."""
        M = self.num_antennas
        return periodic_kernel(self.angle_pos[:, None] - self.angle_index[None, :], M) / np.sqrt(M)

    def antenna_phases(self) -> np.ndarray:
        M = self.num_antennas
        return np.exp(2j * np.pi * np.outer(self.angle_pos, np.arange(M)) / M)

    def dense_tilde(self) -> np.ndarray:
        """h~[i, j + N_D/2, m] as a dense ``(L_D, N_D, M)`` tensor."""
        out = np.zeros((self.cfg.delay_bins, self.cfg.doppler_bins, self.num_antennas), dtype=complex)
        dop = self.doppler_kernels()
        ant = self.antenna_phases()
        for p, tap in enumerate(self.taps):
            out[tap] += self.coeffs[p] * np.outer(dop[p], ant[p])
        return out

    def dense_bar(self) -> np.ndarray:
        """h-bar[i, j + N_D/2, q + M/2] as a dense ``(L_D, N_D, M)`` tensor."""
        out = np.zeros((self.cfg.delay_bins, self.cfg.doppler_bins, self.num_antennas), dtype=complex)
        dop = self.doppler_kernels()
        ang = self.angle_kernels()
        for p, tap in enumerate(self.taps):
            out[tap] += self.coeffs[p] * np.outer(dop[p], ang[p])
        return out

    def bar_at(self, i: int, j: int, q: int) -> complex:
        N, M = self.cfg.doppler_bins, self.num_antennas
        sel = self.taps == i
        if not np.any(sel):
            return 0j
        dop = periodic_kernel(self.doppler_pos[sel] - j, N) / N
        ang = periodic_kernel(self.angle_pos[sel] - q, M) / np.sqrt(M)
        return complex(np.sum(self.coeffs[sel] * dop * ang))

    def bar_vector(self, signatures: Sequence) -> np.ndarray:
        return np.array([self.bar_at(i, j, q) for i, j, q in signatures], dtype=complex)

    def entries(self, rel_threshold: float = 1e-9) -> dict:
        """Nonzero (i, j, q) entries of h-bar above a relative magnitude."""
        dense = self.dense_bar()
        mag = np.abs(dense)
        if mag.max(initial=0.0) == 0:
            return {}
        idx = np.argwhere(mag > rel_threshold * mag.max())
        N, M = self.cfg.doppler_bins, self.num_antennas
        return {(int(i), int(j) - N // 2, int(q) - M // 2): complex(dense[i, j, q]) for i, j, q in idx}


def dda_channel(user: UserChannel, cfg: OtfsConfig, geom: GeometryConfig,
                which_link: str = DL) -> DdaChannel:
    taps, coeffs, dpos, apos = [], [], [], []
    lam = geom.wavelength(which_link)
    NT = cfg.doppler_bins * cfg.symbol_period
    for p in user.paths:
        taps.append(p.delay_taps(cfg.sample_period))
        coeffs.append(p.gain * np.exp(2j * np.pi * p.doppler * (cfg.otfs_start + 1) * cfg.sample_period))
        dpos.append(p.doppler * NT)
        apos.append(geom.num_antennas * geom.antenna_spacing * np.sin(p.angle) / lam)
    return DdaChannel(taps, coeffs, dpos, apos, cfg, geom.num_antennas)


def _awgn(shape, noise_var, rng):
    rng = np.random.default_rng() if rng is None else rng
    return np.sqrt(noise_var / 2) * (rng.standard_normal(shape) + 1j * rng.standard_normal(shape))


def dd_io_predict(X: np.ndarray, channel: DdaChannel, cfg: OtfsConfig, noise_var: float = 0.0,
                  rng: Optional[np.random.Generator] = None) -> np.ndarray:
    """Delay-Doppler input-output relation for antenna-domain blocks ``(M, L_D, N_D)``.

    Twisted 2-D periodic convolution with the dense per-antenna channel; the
    twist uses the output delay index and the wrapped Doppler shift.
    """
    X = np.asarray(X, dtype=complex)
    if X.ndim == 2:
        X = X[None]
    L, N = cfg.delay_bins, cfg.doppler_bins
    tilde = channel.dense_tilde()
    Y = np.zeros((L, N), dtype=complex)
    rows = np.arange(L)
    shifts = np.arange(-N // 2, N // 2)
    for tap in np.unique(channel.taps):
        # V[i', j', d] = sum_m X_m[i', j'] h~[tap, d, m]
        V = np.tensordot(X, tilde[tap], axes=([0], [1]))
        V = np.roll(V, tap, axis=0)
        for col, d in enumerate(shifts):
            twist = np.exp(2j * np.pi * rows * d / cfg.twist_denominator)
            Y += twist[:, None] * np.roll(V[:, :, col], d, axis=1)
    if noise_var > 0:
        Y += _awgn(Y.shape, noise_var, rng)
    return Y


def dd_io_predict_angle(Xbar: np.ndarray, channel: DdaChannel, cfg: OtfsConfig, noise_var: float = 0.0,
                        rng: Optional[np.random.Generator] = None) -> np.ndarray:
    """Same relation driven by angle-layer blocks ``x-bar`` ``(M, L_D, N_D)``.

    Efficient when the layers are sparse (pilot-only frames).
    """
    Xbar = np.asarray(Xbar, dtype=complex)
    L, N = cfg.delay_bins, cfg.doppler_bins
    M = channel.num_antennas
    dop = channel.doppler_kernels()         # (P, N)
    ang = channel.angle_kernels()           # (P, M)
    shifts = np.arange(-N // 2, N // 2)
    Y = np.zeros((L, N), dtype=complex)
    s, l0, n0 = np.nonzero(Xbar)
    if len(s):
        vals = Xbar[s, l0, n0]
        for p, tap in enumerate(channel.taps):
            w = vals * ang[p, s] * channel.coeffs[p]                 # (nnz,)
            out_l = (l0 + tap) % L
            out_n = (n0[:, None] + shifts[None, :]) % N             # (nnz, N)
            twist = np.exp(2j * np.pi * out_l[:, None] * shifts[None, :] / cfg.twist_denominator)
            contrib = w[:, None] * dop[p][None, :] * twist
            np.add.at(Y, (np.broadcast_to(out_l[:, None], out_n.shape), out_n), contrib)
    if noise_var > 0:
        Y += _awgn(Y.shape, noise_var, rng)
    return Y


def angle_to_antenna(Xbar: np.ndarray) -> np.ndarray:
    """Map angle layers (q + M/2 ordering) to antenna-domain blocks.

    x_m = M^{-1/2} sum_q xbar_q exp(-j2*pi*m*q/M), so that
    sum_m x_m h~_m = sum_q xbar_q h-bar_q.
    """
    Xbar = np.asarray(Xbar, dtype=complex)
    M = Xbar.shape[0]
    q = np.arange(-(M // 2), M - M // 2)
    m = np.arange(M)
    W = np.exp(-2j * np.pi * np.outer(m, q) / M) / np.sqrt(M)
    return np.tensordot(W, Xbar, axes=([1], [0]))


def dump_grid(path, grid: np.ndarray) -> None:
    """Write a grid as row-major little-endian complex64 (re, im float32 pairs)."""
    np.ascontiguousarray(grid, dtype="<c8").tofile(path)


def load_grid(path, shape) -> np.ndarray:
    return np.fromfile(path, dtype="<c8").reshape(shape).astype(complex)


def oracle_residual(user: UserChannel, cfg: OtfsConfig, geom: GeometryConfig,
                    rng: Optional[np.random.Generator] = None) -> float:
    """Relative gap between the closed form and time-domain propagation on a random block."""
    rng = np.random.default_rng() if rng is None else rng
    shape = (geom.num_antennas, cfg.delay_bins, cfg.doppler_bins)
    X = (rng.standard_normal(shape) + 1j * rng.standard_normal(shape)) / np.sqrt(2)
    Yp = dd_io_predict(X, dda_channel(user, cfg, geom), cfg)
    Yt = demodulate(propagate_time_domain(modulate(X, cfg), user, cfg, geom), cfg)
    return float(np.linalg.norm(Yp - Yt) / np.linalg.norm(Yt))
