"""Fast marginal-likelihood variant of the EM-VB solver.

The E-step maximizes the type-II likelihood one precision at a time with
add / re-estimate / prune decisions, keeping only the posterior of the
active basis set. The M-step is shared with the full solver.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, List, Optional

import numpy as np
from scipy import linalg

from .emvb import (IterationCallback, SparsePosterior, UlGridEstimate, _rel_change, effective_noise,
                   m_step_beta, m_step_upsilon)
from .observation import MeasurementPack

log = logging.getLogger(__name__)

ADD, REESTIMATE, PRUNE, SKIP = "add", "re-estimate", "prune", "skip"

# candidates this close to an active column (normalized correlation) are not added
ALIGNMENT_MAX = 1 - 1e-3
# candidates with less than this share of energy outside the active span are not added
MIN_RESIDUAL = 0.0


def log_marginal_term(alpha: float, p: float, q2: float) -> float:
    """``l(alpha) = log alpha - log(alpha + p) + |q|^2 / (alpha + p)``; zero at infinity."""
    if not np.isfinite(alpha):
        return 0.0
    return float(np.log(alpha) - np.log(alpha + p) + q2 / (alpha + p))


def optimal_alpha(p: float, q2: float) -> float:
    return p * p / (q2 - p) if q2 > p else np.inf


@dataclass
class FastState:
    """Active-set posterior for one E-step.

    ``gram`` and ``phi_h_y`` are ``Phi^H Phi`` and ``Phi^H y``; ``mu`` and
    ``Sigma`` cover the active columns only, in the order of ``active``.
    ``P``/``Q`` cache the in-model factors of every column and are kept
    current by rank-one corrections after each action.
    """

    gram: np.ndarray
    phi_h_y: np.ndarray
    noise_var: float
    alpha: np.ndarray
    active: List[int] = field(default_factory=list)
    mu: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=complex))
    Sigma: np.ndarray = field(default_factory=lambda: np.zeros((0, 0), dtype=complex))
    P: Optional[np.ndarray] = None
    Q: Optional[np.ndarray] = None
    max_active: Optional[int] = None
    alignment_max: float = ALIGNMENT_MAX
    min_residual: float = 0.0
    _chol_key: Optional[tuple] = None
    _chol: Optional[tuple] = None
    actions: List[str] = field(default_factory=list)
    delta_l: List[float] = field(default_factory=list)

    @classmethod
    def empty(cls, pack: MeasurementPack, noise_var: float, min_residual: float = 0.0) -> "FastState":
        NL = pack.num_angles * pack.num_delays
        st = cls(pack.gram, pack.phi_h_y, noise_var, np.full(NL, np.inf),
                 max_active=pack.train_len * pack.num_antennas, min_residual=min_residual)
        st.refresh()
        return st

    @property
    def size(self) -> int:
        return self.alpha.size

    def refresh(self) -> None:
        """Recompute ``Sigma``, ``mu`` and the factor cache from scratch."""
        B = np.asarray(self.active, dtype=int)
        if B.size == 0:
            self.mu = np.zeros(0, dtype=complex)
            self.Sigma = np.zeros((0, 0), dtype=complex)
        else:
            Xi = self.gram[np.ix_(B, B)] / self.noise_var + np.diag(self.alpha[B])
            Sigma = linalg.inv(Xi, check_finite=False)
            self.Sigma = (Sigma + Sigma.conj().T) / 2
            self.mu = self.Sigma @ self.phi_h_y[B] / self.noise_var
        self.P, self.Q = self.all_factors()

    def all_factors(self):
        """``(P, Q)`` for every column, computed directly from ``Sigma`` and ``mu``."""
        s2 = self.noise_var
        P = np.real(np.diag(self.gram)) / s2
        Q = self.phi_h_y / s2
        if self.active:
            Z = self.gram[:, self.active]                    # phi_i^H Phi_B
            P = P - np.real(np.sum((Z @ self.Sigma) * Z.conj(), axis=1)) / s2 ** 2
            Q = Q - (Z @ self.mu) / s2
        return P, Q

    def posterior(self) -> SparsePosterior:
        mean = np.zeros(self.size, dtype=complex)
        if self.active:
            mean[self.active] = self.mu
        return SparsePosterior(mean, None)

    def log_marginal(self) -> float:
        """Type-II log likelihood up to an additive constant independent of alpha."""
        if not self.active:
            return 0.0
        B = np.asarray(self.active)
        Xi = self.gram[np.ix_(B, B)] / self.noise_var + np.diag(self.alpha[B])
        _, logdet = np.linalg.slogdet(Xi)
        return float(np.sum(np.log(self.alpha[B])) - logdet
                     + np.real(np.vdot(self.phi_h_y[B], self.mu)) / self.noise_var)


def sparsity_factors(i: int, state: FastState):
    """Leave-one-out factors ``(p_i, q_i)`` plus the in-model ``(P_i, Q_i)``."""
    P = float(state.P[i])
    Q = complex(state.Q[i])
    a = float(state.alpha[i])
    if a != np.inf:
        if a <= P:
            return np.inf, 0j, P, Q
        return a * P / (a - P), a * Q / (a - P), P, Q
    return P, Q, P, Q


def _downdate(state: FastState, j: int, kappa: float) -> None:
    """``Sigma -= kappa s_j s_j^H`` with the matching mean and factor corrections."""
    s2 = state.noise_var
    sj = state.Sigma[:, j].copy()
    muj = state.mu[j]
    w = state.gram[:, state.active] @ sj / s2
    state.P = state.P + kappa * np.abs(w) ** 2
    state.Q = state.Q + kappa * muj * w
    state.mu = state.mu - kappa * muj * sj
    state.Sigma = state.Sigma - kappa * np.outer(sj, sj.conj())


def residual_fraction(i: int, state: FastState) -> float:
    """Share of column ``i``'s energy outside the span of the active columns.

    ``1 - g_Bi^H G_BB^-1 g_Bi / g_ii`` on the unregularized Gram; the
    Cholesky factor of ``G_BB`` is cached until the active set changes.
    """
    if not state.active:
        return 1.0
    key = tuple(state.active)
    if state._chol_key != key:
        B = np.asarray(state.active)
        try:
            state._chol = linalg.cho_factor(state.gram[np.ix_(B, B)], check_finite=False)
        except linalg.LinAlgError:
            state._chol = None
        state._chol_key = key
    if state._chol is None:
        return 0.0
    z = state.gram[state.active, i]
    gii = float(np.real(state.gram[i, i]))
    if gii <= 0:
        return 0.0
    proj = float(np.real(np.vdot(z, linalg.cho_solve(state._chol, z, check_finite=False))))
    return 1.0 - proj / gii


def _aligned(i: int, state: FastState) -> bool:
    """True when column ``i`` lies almost inside the span of the active columns."""
    if not state.active:
        return False
    g = state.gram
    B = state.active
    diag = np.real(np.diag(g))
    corr = np.abs(g[i, B]) / np.sqrt(diag[i] * diag[B])
    if corr.max() > state.alignment_max:
        return True
    return residual_fraction(i, state) < state.min_residual


def decide_and_update(i: int, state: FastState) -> str:
    """Single-coordinate likelihood step at index ``i``; updates the state in place."""
    p, q, P, Q = sparsity_factors(i, state)
    q2 = abs(q) ** 2
    in_model = state.alpha[i] != np.inf
    old = log_marginal_term(state.alpha[i], p, q2) if in_model and p != np.inf else 0.0
    new_alpha = optimal_alpha(p, q2) if p != np.inf else np.inf
    s2 = state.noise_var

    if new_alpha != np.inf and not in_model:
        full = state.max_active is not None and len(state.active) >= state.max_active
        action = SKIP if full or _aligned(i, state) else ADD
    elif new_alpha != np.inf:
        action = REESTIMATE if new_alpha != state.alpha[i] else SKIP
    elif in_model:
        action = PRUNE
    else:
        action = SKIP

    if action == ADD:
        sii = 1.0 / (new_alpha + P)
        mui = sii * Q
        col = state.gram[:, i]
        if state.active:
            e = state.Sigma @ col[state.active] / s2
            top = state.Sigma + sii * np.outer(e, e.conj())
            state.Sigma = np.block([[top, -sii * e[:, None]],
                                    [-sii * e.conj()[None, :], np.array([[sii]])]])
            state.mu = np.concatenate([state.mu - mui * e, [mui]])
            em = (col - state.gram[:, state.active] @ e) / s2
        else:
            state.Sigma = np.array([[sii]], dtype=complex)
            state.mu = np.array([mui], dtype=complex)
            em = col / s2
        state.P = state.P - sii * np.abs(em) ** 2
        state.Q = state.Q - mui * em
        state.active.append(i)
        state.alpha[i] = new_alpha
    elif action == REESTIMATE:
        j = state.active.index(i)
        delta = 1.0 / (new_alpha - state.alpha[i])
        _downdate(state, j, 1.0 / (state.Sigma[j, j].real + delta))
        state.alpha[i] = new_alpha
    elif action == PRUNE:
        j = state.active.index(i)
        _downdate(state, j, 1.0 / state.Sigma[j, j].real)
        keep = [k for k in range(len(state.active)) if k != j]
        state.mu = state.mu[keep]
        state.Sigma = state.Sigma[np.ix_(keep, keep)]
        state.active.pop(j)
        state.alpha[i] = np.inf

    if action != SKIP:
        gain = (log_marginal_term(new_alpha, p, q2) if new_alpha != np.inf else 0.0) - old
        state.actions.append(action)
        state.delta_l.append(gain)
    return action


def action_gains(state: FastState) -> np.ndarray:
    """Likelihood gain of the best single-coordinate action at every index."""
    P, Q, alpha = state.P, state.Q, state.alpha
    active = np.isfinite(alpha)
    q2 = np.abs(Q) ** 2
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        denom = np.where(active, alpha - P, 1.0)
        scale = np.where(active, alpha / denom, 1.0)
        p = np.where(active, P * scale, P)
        q2 = q2 * scale ** 2
        ratio = q2 / p
        add_gain = np.where(ratio > 1, ratio - 1 - np.log(ratio), 0.0)
        new_a = np.where(ratio > 1, p ** 2 / (q2 - p), np.inf)
        a_act = np.where(active, alpha, 1.0)
        old_l = np.log(a_act) - np.log(a_act + p) + q2 / (a_act + p)
        new_l = np.where(np.isfinite(new_a), np.log(new_a) - np.log(new_a + p) + q2 / (new_a + p), 0.0)
        gain = np.where(active & (denom > 0), new_l - old_l, np.where(active, 0.0, add_gain))
    gain[~np.isfinite(gain)] = 0.0
    if state.active and state.max_active is not None and len(state.active) >= state.max_active:
        gain[~active] = 0.0
    return gain


def fast_e_step(state: FastState, tol: float = 1e-6, max_actions: int = 1000,
                order: str = "greedy") -> FastState:
    """Coordinate-wise likelihood maximization until convergence.

    ``order="greedy"`` applies, at each step, the action with the largest
    likelihood gain; ``order="cyclic"`` seeds from the best single column and
    then sweeps the indices in order. Either way the loop stops when the
    largest gain falls below ``tol`` relative to the current log likelihood
    (at least 1 in absolute terms), or after ``max_actions`` actions.
    """
    start = len(state.actions)
    if order == "greedy":
        state.refresh()
        scale = max(1.0, abs(state.log_marginal()))
        blocked = np.zeros(state.size, dtype=bool)
        while len(state.actions) - start < max_actions:
            gain = action_gains(state)
            gain[blocked] = 0.0
            i = int(np.argmax(gain))
            if gain[i] < tol * scale:
                break
            if not np.isfinite(state.alpha[i]) and _aligned(i, state):
                blocked[i] = True
                continue
            decide_and_update(i, state)
            n = len(state.actions) - start
            if n % 50 == 0 or not (np.all(np.isfinite(state.P)) and np.all(np.isfinite(state.Q))):
                state.refresh()
                scale = max(1.0, abs(state.log_marginal()))
        return state
    if order != "cyclic":
        raise ValueError(f"unknown order {order!r}")
    if not state.active:
        P, Q = state.P, state.Q
        score = np.where(np.abs(Q) ** 2 > P, np.abs(Q) ** 2 / P - 1 - np.log(np.abs(Q) ** 2 / P), -np.inf)
        best = int(np.argmax(score))
        if np.isfinite(score[best]):
            decide_and_update(best, state)
    while len(state.actions) - start < max_actions:
        state.refresh()
        scale = max(1.0, abs(state.log_marginal()))
        sweep_max = 0.0
        for i in range(state.size):
            n_before = len(state.actions)
            decide_and_update(i, state)
            if len(state.actions) > n_before:
                sweep_max = max(sweep_max, abs(state.delta_l[-1]))
                if not (np.all(np.isfinite(state.P)) and np.all(np.isfinite(state.Q))):
                    state.refresh()
            if len(state.actions) - start >= max_actions:
                break
        if sweep_max < tol * scale:
            break
    return state


def run_fast_emvb(pack: MeasurementPack, noise_var: float, interval: float, max_iter: int = 10,
                  tol: float = 1e-4, callback: Optional[IterationCallback] = None,
                  update_beta: bool = True, update_upsilon: bool = True,
                  max_doppler: Optional[float] = None, inner_tol: float = 1e-6,
                  max_actions: int = 1000, order: str = "greedy", warm_start: bool = True,
                  min_residual: float = MIN_RESIDUAL):
    """Outer EM loop with the fast E-step; returns ``(UlGridEstimate, FastState)``.

    The active set and its precisions carry over between EM iterations.
    """
    noise_var = effective_noise(noise_var, pack.y)
    state = FastState.empty(pack, noise_var, min_residual)
    est = UlGridEstimate(np.zeros((pack.num_angles, pack.num_delays), dtype=complex),
                         pack.beta.copy(), pack.upsilon.copy(), 0)
    prev = None
    for it in range(1, max_iter + 1):
        if warm_start:
            state.gram, state.phi_h_y = pack.gram, pack.phi_h_y
            state.refresh()
        else:
            state = FastState.empty(pack, noise_var, min_residual)
        fast_e_step(state, inner_tol, max_actions, order)
        post = state.posterior()
        beta = m_step_beta(post, pack, interval) if update_beta else pack.beta
        pack = pack.with_params(beta=beta)
        ups = m_step_upsilon(post, pack, max_abs=max_doppler) if update_upsilon else pack.upsilon
        pack = pack.with_params(upsilon=ups)
        G = post.mean.reshape(pack.num_angles, pack.num_delays, order="F")
        est = UlGridEstimate(G, pack.beta.copy(), pack.upsilon.copy(), it, est.history)
        if callback is not None:
            callback(it, est)
        change = _rel_change(post.mean, prev) if prev is not None else np.inf
        est.history.append(change)
        log.debug("fast iter %d |B|=%d change %.3e", it, len(state.active), change)
        if change < tol:
            break
        prev = post.mean
    return est, state
