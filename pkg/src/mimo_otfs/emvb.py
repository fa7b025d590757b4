"""EM variational-Bayes recovery of the sparse uplink gain matrix.

E-step: Gaussian posterior of ``g`` under a Gaussian-Gamma sparse prior.
M-step: closed-form updates of the off-grid angle offsets ``beta`` and the
per-delay Doppler vector ``upsilon``, both evaluated at the posterior mean.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy import linalg

from .observation import MeasurementPack

log = logging.getLogger(__name__)


@dataclass
class HyperState:
    alpha: np.ndarray
    a: float = 1e-4
    b: float = 1e-4

    def __post_init__(self):
        self.alpha = np.asarray(self.alpha, dtype=float)
        if np.any(self.alpha <= 0):
            raise ValueError("precisions must be positive")

    @classmethod
    def initial(cls, size: int, a: float = 1e-4, b: float = 1e-4, value: float = 1.0) -> "HyperState":
        return cls(np.full(size, value), a, b)


@dataclass
class SparsePosterior:
    mean: np.ndarray
    cov: Optional[np.ndarray] = None
    hyper: Optional[HyperState] = None

    def second_moment_diag(self) -> np.ndarray:
        m2 = np.abs(self.mean) ** 2
        if self.cov is not None:
            m2 = m2 + np.real(np.diag(self.cov))
        return m2


@dataclass
class UlGridEstimate:
    G: np.ndarray              # N x L
    beta: np.ndarray
    upsilon: np.ndarray
    iterations: int = 0
    history: list = field(default_factory=list)

    @property
    def g(self) -> np.ndarray:
        return self.G.reshape(-1, order="F")


def _mean_matrix(mean: np.ndarray, pack: MeasurementPack) -> np.ndarray:
    return np.asarray(mean).reshape(pack.num_angles, pack.num_delays, order="F")


def check_posterior(post: SparsePosterior, tol: float = 1e-10) -> None:
    """Hermitian PSD check on the covariance."""
    S = post.cov
    if S is None:
        return
    if not np.allclose(S, S.conj().T, atol=1e-10 * max(1.0, np.abs(S).max())):
        raise AssertionError("posterior covariance is not Hermitian")
    lam = np.linalg.eigvalsh((S + S.conj().T) / 2)
    if lam.min() < -tol * np.real(np.trace(S)):
        raise AssertionError(f"posterior covariance has eigenvalue {lam.min():.3e}")


def e_step_gain(pack: MeasurementPack, hyper: HyperState, noise_var: float) -> SparsePosterior:
    """``Sigma = (Phi^H Phi / s2 + diag(alpha))^-1``, ``mu = Sigma Phi^H y / s2``."""
    if noise_var <= 0:
        raise ValueError("noise_var must be positive")
    Xi = pack.gram / noise_var
    Xi[np.diag_indices_from(Xi)] += hyper.alpha
    try:
        cf = linalg.cho_factor(Xi, lower=False, check_finite=False)
    except linalg.LinAlgError as exc:
        cond = np.linalg.cond(Xi)
        raise np.linalg.LinAlgError(f"posterior precision not positive definite (cond={cond:.3e})") from exc
    Sigma = linalg.cho_solve(cf, np.eye(Xi.shape[0], dtype=complex), check_finite=False)
    Sigma = (Sigma + Sigma.conj().T) / 2
    mu = Sigma @ pack.phi_h_y / noise_var
    return SparsePosterior(mu, Sigma)


def e_step_alpha(post: SparsePosterior, hyper: HyperState) -> np.ndarray:
    """Gamma posterior mean ``(a + 1) / (b + <|g_i|^2>)``."""
    return (hyper.a + 1.0) / (hyper.b + post.second_moment_diag())


def _active(energy: np.ndarray, rel_tol: float) -> np.ndarray:
    top = energy.max(initial=0.0)
    if top <= 0:
        return np.zeros(energy.shape, dtype=bool)
    return energy > rel_tol * top


def m_step_beta(post: SparsePosterior, pack: MeasurementPack, interval: float,
                rel_tol: float = 1e-6) -> np.ndarray:
    """Off-grid angle offsets from the normal equations, clipped to half a grid step.

    Only angle columns carrying posterior energy are solved; the rest keep
    their previous value.
    """
    G = _mean_matrix(post.mean, pack)
    U = G @ pack.C                                       # N x N_t
    sel = _active(np.sum(np.abs(U) ** 2, axis=1), rel_tol)
    beta = pack.beta.copy()
    if not np.any(sel):
        warnings.warn("beta normal matrix is singular (zero gains); keeping previous beta",
                      RuntimeWarning, stacklevel=2)
        return beta
    bn = np.linalg.norm(pack.B, axis=0)
    sel &= bn > 1e-9 * bn.max(initial=0.0)
    Bs = pack.B[:, sel]
    Us = U[sel]
    H = np.real((Bs.conj().T @ Bs) * (Us.conj() @ Us.T))
    R = pack.Y - pack.A @ U
    rhs = np.real(np.sum(Us.conj() * (Bs.conj().T @ R), axis=1))
    try:
        sol = _solve_scaled(H, rhs)
    except np.linalg.LinAlgError:
        warnings.warn("beta normal matrix is singular; keeping previous beta",
                      RuntimeWarning, stacklevel=2)
        return beta
    if not np.all(np.isfinite(sol)):
        warnings.warn("beta update is not finite; keeping previous beta", RuntimeWarning, stacklevel=2)
        return beta
    beta[sel] = np.clip(sol, -interval / 2, interval / 2)
    return beta


def m_step_upsilon(post: SparsePosterior, pack: MeasurementPack, rel_tol: float = 1e-6,
                   max_abs: Optional[float] = None) -> np.ndarray:
    """Doppler per delay row: stationary point of the first-order residual.

    With ``W_n = A~ G~ diag(d_n)`` and ``s_n = 2 pi n T_s`` the objective
    ``sum_n ||O_n - j s_n W_n v||^2`` gives
    ``Pi = sum_n s_n^2 Re{W_n^H W_n}`` and ``omega = sum_n s_n Im{W_n^H O_n}``.
    Rows without posterior energy are left untouched.
    """
    G = _mean_matrix(post.mean, pack)
    At = pack.A_tilde
    D = pack.D
    s = 2 * np.pi * np.arange(pack.train_len) * pack.sample_period
    AG = At @ G                                           # M x L
    sel = _active(np.sum(np.abs(AG) ** 2, axis=0), rel_tol)
    ups = pack.upsilon.copy()
    if not np.any(sel):
        return ups
    K = AG.conj().T @ AG                                  # L x L
    Pi = np.real(K * ((D.conj() * s ** 2) @ D.T))
    O = pack.Y - AG @ D
    omega = np.sum(s[None, :] * np.imag(D.conj() * (AG.conj().T @ O)), axis=1)
    Pi_s = Pi[np.ix_(sel, sel)]
    try:
        sol = _solve_scaled(Pi_s, omega[sel])
    except np.linalg.LinAlgError:
        warnings.warn("Doppler normal matrix is singular; keeping previous upsilon",
                      RuntimeWarning, stacklevel=2)
        return ups
    if not np.all(np.isfinite(sol)):
        return ups
    if max_abs is not None:
        sol = np.clip(sol, -max_abs, max_abs)
    ups[sel] = sol
    return ups


def _solve_scaled(H: np.ndarray, rhs: np.ndarray, rcond: float = 1e-10) -> np.ndarray:
    """Symmetric solve with Jacobi scaling; tiny singular directions are dropped."""
    d = np.sqrt(np.abs(np.diag(H)))
    d[d == 0] = 1.0
    Hs = H / np.outer(d, d)
    sol, *_ = np.linalg.lstsq(Hs, rhs / d, rcond=rcond)
    return sol / d


NOISE_FLOOR = 1e-6


def effective_noise(noise_var: float, y: np.ndarray, floor: float = NOISE_FLOOR) -> float:
    """Noise variance used by the solvers: at least ``floor`` times the mean sample power."""
    power = float(np.mean(np.abs(y) ** 2)) if np.size(y) else 0.0
    eff = max(float(noise_var), floor * power)
    if eff <= 0:
        raise ValueError("noise_var must be positive for an all-zero observation")
    return eff


def _rel_change(new: np.ndarray, old: np.ndarray) -> float:
    ref = np.linalg.norm(old)
    if ref == 0:
        return np.inf if np.linalg.norm(new) > 0 else 0.0
    return float(np.linalg.norm(new - old) / ref)


IterationCallback = Callable[[int, UlGridEstimate], None]


def run_emvb(pack: MeasurementPack, noise_var: float, interval: float,
             hyper: Optional[HyperState] = None, max_iter: int = 10, tol: float = 1e-4,
             callback: Optional[IterationCallback] = None, update_beta: bool = True,
             update_upsilon: bool = True, max_doppler: Optional[float] = None):
    """Alternate E-steps (gain, precision) and M-steps (beta, upsilon).

    ``pack`` carries the observation and the initial ``(beta, upsilon)``.
    Returns ``(UlGridEstimate, SparsePosterior)``.
    """
    NL = pack.num_angles * pack.num_delays
    noise_var = effective_noise(noise_var, pack.y)
    hyper = HyperState.initial(NL) if hyper is None else hyper
    post = SparsePosterior(np.zeros(NL, dtype=complex), None)
    est = UlGridEstimate(np.zeros((pack.num_angles, pack.num_delays), dtype=complex),
                         pack.beta.copy(), pack.upsilon.copy(), 0)
    prev_mu = None
    for it in range(1, max_iter + 1):
        post = e_step_gain(pack, hyper, noise_var)
        hyper = HyperState(e_step_alpha(post, hyper), hyper.a, hyper.b)
        beta = m_step_beta(post, pack, interval) if update_beta else pack.beta
        pack = pack.with_params(beta=beta)
        ups = m_step_upsilon(post, pack, max_abs=max_doppler) if update_upsilon else pack.upsilon
        pack = pack.with_params(upsilon=ups)
        est = UlGridEstimate(_mean_matrix(post.mean, pack).copy(), pack.beta.copy(),
                             pack.upsilon.copy(), it, est.history)
        if callback is not None:
            callback(it, est)
        change = _rel_change(post.mean, prev_mu) if prev_mu is not None else np.inf
        est.history.append(change)
        log.debug("emvb iter %d change %.3e", it, change)
        if change < tol:
            break
        prev_mu = post.mean
    post.hyper = hyper
    return est, post
