"""Parameter estimation from fully observed games.

The strategy HMM (ZIP emissions over the per-type production vector) is fit
by EM with scaled forward-backward recursions. Loss rates use additive
smoothing over unit-epochs, and the observation model is a maximum-likelihood
beta-binomial regression on scouting effort. Types with too little data fall
back to the median of the fitted estimates.
"""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.optimize import minimize
from scipy.special import digamma, expit, gammaln

from .generative import GameTrace
from .model import (
    ModelParams,
    ObsRegressionCoeffs,
    StrategyParams,
    UnitTypeCatalog,
    betabin_logpmf,
    zip_logpmf,
)

log = logging.getLogger(__name__)

NU_GUARD = 1e-4
LAMBDA_GUARD = 0.1
MU_CLIP = 1e-15
POSITIVE_MASS_EPS = 1e-10
L2_PENALTY = 1e-6


class TrainingError(ValueError):
    pass


class DegenerateDesignWarning(UserWarning):
    """Effort never varies, so the effort slope is pinned by the L2 penalty alone."""


@dataclass
class EMConfig:
    M: int = 30
    max_iters: int = 200
    loglik_tol: float = 1e-6
    restarts: int = 5
    seed: int = 0

    def __post_init__(self):
        if self.M < 1:
            raise TrainingError("M must be at least 1")
        if self.restarts < 1:
            raise TrainingError("need at least one EM run")


@dataclass
class LossRateStats:
    d: np.ndarray
    D: np.ndarray


@dataclass
class FitReport:
    loglik_history: list[float] = field(default_factory=list)
    heldout_loglik: float | None = None
    fallback_flags: dict[str, dict[str, str]] = field(default_factory=dict)
    restart_logliks: list[float] = field(default_factory=list)
    converged: bool = False

    def to_dict(self) -> dict:
        return {
            "loglik_history": list(self.loglik_history),
            "heldout_loglik": self.heldout_loglik,
            "fallback_flags": self.fallback_flags,
            "restart_logliks": list(self.restart_logliks),
            "converged": self.converged,
        }


# ---------------------------------------------------------------------------
# Forward-backward
# ---------------------------------------------------------------------------


def emission_logliks(P: np.ndarray, strategy: StrategyParams) -> np.ndarray:
    """``log P(P_t | S_t = s)`` for a ``(..., T, N)`` production array -> ``(..., T, M)``."""
    P = np.asarray(P)
    ll = zip_logpmf(P[..., None, :], strategy.nu, strategy.lam)
    return ll.sum(axis=-1)


def _forward_backward_batch(log_b: np.ndarray, eta: np.ndarray, pi: np.ndarray):
    """Scaled forward-backward over a batch of equal-length sequences.

    ``log_b`` is ``(G, T, M)``. Returns gamma ``(G, T, M)``, the summed
    transition posteriors ``(G, M, M)``, per-sequence xi ``(G, T-1, M, M)``
    and per-sequence log-likelihoods ``(G,)``.
    """
    G, T, M = log_b.shape
    shift = log_b.max(axis=2, keepdims=True)
    if not np.all(np.isfinite(shift)):
        raise TrainingError("emission likelihood is zero under every state")
    b = np.exp(log_b - shift)
    alpha = np.empty((G, T, M))
    scale = np.empty((G, T))
    a = eta[None, :] * b[:, 0]
    for t in range(T):
        if t > 0:
            a = (alpha[:, t - 1] @ pi) * b[:, t]
        c = a.sum(axis=1)
        if np.any(c <= 0) or not np.all(np.isfinite(c)):
            raise TrainingError(f"non-finite likelihood at step {t}")
        alpha[:, t] = a / c[:, None]
        scale[:, t] = c
    beta = np.empty((G, T, M))
    beta[:, -1] = 1.0
    for t in range(T - 2, -1, -1):
        beta[:, t] = ((b[:, t + 1] * beta[:, t + 1]) @ pi.T) / scale[:, t + 1][:, None]
    gamma = alpha * beta
    gamma /= gamma.sum(axis=2, keepdims=True)
    if T > 1:
        xi = (alpha[:, :-1, :, None] * pi[None, None]
              * (b[:, 1:] * beta[:, 1:])[:, :, None, :]) / scale[:, 1:, None, None]
    else:
        xi = np.zeros((G, 0, M, M))
    loglik = np.log(scale).sum(axis=1) + shift[..., 0].sum(axis=1)
    return gamma, xi, loglik


def forward_backward(P_sequence, strategy: StrategyParams):
    """State posteriors for one production sequence.

    Returns ``(gamma, xi, loglik)`` with gamma ``(T, M)``, xi ``(T-1, M, M)``
    and ``loglik = log P(P_1..P_T | strategy)``.
    """
    P = np.atleast_2d(np.asarray(P_sequence))
    log_b = emission_logliks(P, strategy)[None]
    gamma, xi, ll = _forward_backward_batch(log_b, strategy.eta, strategy.pi)
    return gamma[0], xi[0], float(ll[0])


def _as_sequences(data) -> list[np.ndarray]:
    seqs = []
    for item in data:
        if isinstance(item, GameTrace):
            if any(ep.P is None for ep in item.epochs):
                raise TrainingError(f"game {item.id} has no production record")
            seqs.append(item.array("P"))
        else:
            seqs.append(np.atleast_2d(np.asarray(item, dtype=np.int64)))
    return [s for s in seqs if s.shape[0] > 0]


def _group_by_length(seqs: list[np.ndarray]) -> list[np.ndarray]:
    by_len: dict[int, list[np.ndarray]] = {}
    for s in seqs:
        by_len.setdefault(s.shape[0], []).append(s)
    return [np.stack(by_len[k]) for k in sorted(by_len)]


class _Suffstats:
    def __init__(self, M: int, N: int):
        self.init = np.zeros(M)
        self.trans = np.zeros((M, M))
        self.occ = np.zeros((M, N))       # sum gamma
        self.pos = np.zeros((M, N))       # sum gamma * [P > 0]
        self.excess = np.zeros((M, N))    # sum gamma * [P > 0] * (P - 1)
        self.loglik = 0.0


def _e_step(batches: list[np.ndarray], strategy: StrategyParams) -> _Suffstats:
    M, N = strategy.n_states, strategy.n_types
    st = _Suffstats(M, N)
    lls = []
    for P in batches:
        log_b = emission_logliks(P, strategy)
        gamma, xi, ll = _forward_backward_batch(log_b, strategy.eta, strategy.pi)
        positive = (P > 0).astype(float)
        excess = np.where(P > 0, P - 1, 0).astype(float)
        st.init += gamma[:, 0].sum(axis=0)
        st.trans += xi.sum(axis=(0, 1))
        st.occ += gamma.sum(axis=(0, 1))[:, None]
        st.pos += np.einsum("gts,gti->si", gamma, positive)
        st.excess += np.einsum("gts,gti->si", gamma, excess)
        lls.append(ll)
    # sorted summation keeps the total independent of batch order
    st.loglik = math.fsum(np.concatenate(lls).tolist())
    return st


def _m_step(st: _Suffstats, prev: StrategyParams) -> StrategyParams:
    eta = st.init / st.init.sum()
    row = st.trans.sum(axis=1, keepdims=True)
    pi = np.where(row > 0, st.trans / np.where(row > 0, row, 1.0), prev.pi)
    with np.errstate(divide="ignore", invalid="ignore"):
        nu = np.where(st.occ > 0, st.pos / st.occ, 0.0)
        lam = st.excess / st.pos
    # nu's objective is concave, so clipping gives the constrained maximizer and
    # EM stays monotone; a reset to the floor at a mass threshold would not
    nu = np.clip(nu, NU_GUARD, 1.0)
    lam = np.where(st.pos < POSITIVE_MASS_EPS, LAMBDA_GUARD, lam)
    return StrategyParams(eta=eta, pi=pi, nu=nu, lam=np.maximum(lam, 0.0))


def _random_init(M: int, N: int, rng: np.random.Generator) -> StrategyParams:
    return StrategyParams(
        eta=np.full(M, 1.0 / M),
        pi=np.full((M, M), 1.0 / M),
        nu=np.maximum(rng.uniform(0.0, 1.0, size=(M, N)), NU_GUARD),
        lam=rng.uniform(0.0, 10.0, size=(M, N)),
    )


def _run_em(batches, init: StrategyParams, config: EMConfig):
    strategy = init
    history = []
    converged = False
    for it in range(config.max_iters):
        st = _e_step(batches, strategy)
        history.append(st.loglik)
        if it > 0:
            prev = history[-2]
            if abs(st.loglik - prev) <= config.loglik_tol * max(1.0, abs(prev)):
                converged = True
                break
        strategy = _m_step(st, strategy)
    else:
        # the last M-step was never scored
        history.append(_e_step(batches, strategy).loglik)
    return strategy, history, converged


def em_fit(data, config: EMConfig, rng: np.random.Generator | None = None):
    """Fit the strategy HMM by EM, keeping the best of ``config.restarts`` runs.

    ``data`` is a sequence of games or ``(T, N)`` production arrays. Every
    run starts from uniform initial and transition probabilities, ``nu`` drawn
    from U(0, 1) and ``lam`` from U(0, 10).
    """
    seqs = _as_sequences(data)
    if not seqs:
        raise TrainingError("empty training set")
    N = seqs[0].shape[1]
    if any(s.shape[1] != N for s in seqs):
        raise TrainingError("sequences disagree on the number of unit types")
    rng = rng if rng is not None else np.random.default_rng(config.seed)
    batches = _group_by_length(seqs)

    best = None
    report = FitReport()
    for r in range(config.restarts):
        init = _random_init(config.M, N, rng)
        strategy, history, converged = _run_em(batches, init, config)
        report.restart_logliks.append(history[-1])
        log.debug("EM restart %d: %d iterations, loglik %.6f", r, len(history), history[-1])
        if best is None or history[-1] > best[1][-1]:
            best = (strategy, history, converged)
    strategy, report.loglik_history, report.converged = best
    return strategy, report


def sequence_loglik(data, strategy: StrategyParams) -> np.ndarray:
    """Per-game ``log P(P | strategy)``.

    A game the strategy cannot produce (for instance two units of a type
    whose fitted ``lam`` is 0) scores ``-inf`` and triggers a warning.
    """
    seqs = _as_sequences(data)
    out = np.empty(len(seqs))
    impossible = 0
    for g, s in enumerate(seqs):
        log_b = emission_logliks(s, strategy)[None]
        try:
            out[g] = _forward_backward_batch(log_b, strategy.eta, strategy.pi)[2][0]
        except TrainingError:
            out[g] = -np.inf
            impossible += 1
    if impossible:
        warnings.warn(f"{impossible} of {len(seqs)} games have zero likelihood under the "
                      "strategy model", RuntimeWarning)
    return out


def heldout_loglik(data, strategy: StrategyParams) -> float:
    """Average per-game production log-likelihood on held-out games."""
    lls = sequence_loglik(data, strategy)
    if lls.size == 0:
        raise TrainingError("held-out set is empty")
    return math.fsum(lls.tolist()) / lls.size


# ---------------------------------------------------------------------------
# Unobserved-loss rates
# ---------------------------------------------------------------------------


def loss_rate_stats(dataset: Sequence[GameTrace], initial_counts: Sequence[int]) -> LossRateStats:
    """Count unobserved losses ``d`` and exposed unit-epochs ``D`` per type.

    Synthetic traces carry the exact losses; otherwise losses are reconstructed
    as the shortfall of ``U_t - P_t`` against the unkilled units of the
    previous epoch.
    """
    c = np.asarray(initial_counts, dtype=np.int64)
    d = np.zeros_like(c)
    D = np.zeros_like(c)
    for game in dataset:
        U_prev = c
        K_prev = np.zeros_like(c)
        for ep in game.epochs:
            if ep.U is None:
                raise TrainingError(f"game {game.id} lacks ground-truth counts")
            base = np.maximum(U_prev - K_prev, 0)
            D += base
            if ep.L is not None:
                d += ep.L
            else:
                if ep.P is None:
                    raise TrainingError(f"game {game.id} lacks production needed to infer losses")
                d += np.maximum(0, base - (ep.U - ep.P))
            U_prev, K_prev = ep.U, ep.K
    return LossRateStats(d=d, D=D)


def smoothed_loss_rates(stats: LossRateStats, min_unit_epochs: int = 100):
    """``(d + 1) / (D + 2)`` where ``D >= min_unit_epochs``; the median of those elsewhere.

    Returns the rates and a boolean mask of types that used the median.
    """
    est = (stats.d + 1.0) / (stats.D + 2.0)
    enough = stats.D >= min_unit_epochs
    fallback = ~enough
    if np.any(enough):
        rates = np.where(enough, est, np.median(est[enough]))
    else:
        pooled = (stats.d.sum() + 1.0) / (stats.D.sum() + 2.0)
        rates = np.full(est.shape, pooled)
    return rates, fallback


def estimate_loss_rates(dataset: Sequence[GameTrace], initial_counts: Sequence[int],
                        min_unit_epochs: int = 100):
    stats = loss_rate_stats(dataset, initial_counts)
    rates, _ = smoothed_loss_rates(stats, min_unit_epochs)
    return rates, stats


# ---------------------------------------------------------------------------
# Beta-binomial regression for the observation model
# ---------------------------------------------------------------------------


def betabin_regression_nll(theta, U, O, E, penalty: float = L2_PENALTY) -> float:
    """Penalized negative log-likelihood of ``(a0, a1, b)`` on rows ``(U, O, E)``."""
    a0, a1, b = theta
    # keep the objective finite at saturation so line searches can backtrack
    mu = np.clip(expit(a0 + a1 * E), MU_CLIP, 1.0 - MU_CLIP)
    rho = expit(b)
    ll = betabin_logpmf(O, U, mu, np.full_like(mu, max(rho, 1e-300)))
    return float(-ll.sum() + penalty * np.dot(theta, theta))


def betabin_regression_grad(theta, U, O, E, penalty: float = L2_PENALTY) -> np.ndarray:
    """Analytic gradient of :func:`betabin_regression_nll`.

    With ``phi = (1 - rho)/rho = exp(-b)`` the shape parameters are
    ``alpha = mu*phi`` and ``beta = (1 - mu)*phi``.
    """
    a0, a1, b = theta
    # same clip as the objective; also avoids inf - inf below
    mu = np.clip(expit(a0 + a1 * E), MU_CLIP, 1.0 - MU_CLIP)
    phi = math.exp(-b)
    al = mu * phi
    be = (1.0 - mu) * phi
    d_al = digamma(O + al) - digamma(al)
    d_be = digamma(U - O + be) - digamma(be)
    d_phi = digamma(phi) - digamma(U + phi)
    dmu = mu * (1.0 - mu)
    g_eta = phi * dmu * (d_al - d_be)
    g_b = -(al * d_al + be * d_be + phi * d_phi)
    grad = -np.array([g_eta.sum(), (g_eta * E).sum(), g_b.sum()])
    return grad + 2.0 * penalty * np.asarray(theta, dtype=float)


def _fit_rows(U, O, E, fixed_b: float | None = None, x0=None):
    if x0 is None:
        x0 = np.zeros(3)
    x0 = np.asarray(x0, dtype=float)
    if fixed_b is None:
        fun = lambda th: betabin_regression_nll(th, U, O, E)
        jac = lambda th: betabin_regression_grad(th, U, O, E)
        start = x0
    else:
        fun = lambda th: betabin_regression_nll([th[0], th[1], fixed_b], U, O, E)
        jac = lambda th: betabin_regression_grad([th[0], th[1], fixed_b], U, O, E)[:2]
        start = x0[:2]
    # b far below -18 puts rho under the clamp; keep the search inside it
    bounds = [(-50, 50), (-50, 50)] + ([(-18.0, 18.0)] if fixed_b is None else [])
    res = minimize(fun, start, jac=jac, method="L-BFGS-B", bounds=bounds)
    if not res.success:
        warnings.warn(f"beta-binomial regression did not converge: {res.message}", RuntimeWarning)
    x = res.x if fixed_b is None else np.array([res.x[0], res.x[1], fixed_b])
    return x, res


@dataclass
class ObsFitConfig:
    min_observed: int = 100
    min_multi_present: int = 100


def observation_rows(dataset: Sequence[GameTrace], i: int):
    """Rows ``(U, O, E)`` for type ``i`` over epochs where the type exists."""
    U, O, E = [], [], []
    for game in dataset:
        for ep in game.epochs:
            if ep.U is None:
                raise TrainingError(f"game {game.id} lacks ground-truth counts")
            if ep.U[i] > 0:
                U.append(ep.U[i])
                O.append(ep.O[i])
                E.append(ep.E)
    return np.array(U, dtype=float), np.array(O, dtype=float), np.array(E, dtype=float)


def fit_observation_model(dataset: Sequence[GameTrace], n_types: int,
                          config: ObsFitConfig | None = None, names: Sequence[str] | None = None):
    """Fit per-type effort regressions; returns ``(coeffs, flags)``.

    The mean link is fit for a type only if it was observed on at least
    ``min_observed`` occasions, and the dispersion only if in addition at
    least two units were present on ``min_multi_present`` occasions. Missing
    pieces are filled with the median of the fitted coefficients.
    """
    config = config or ObsFitConfig()
    names = list(names) if names is not None else [str(i) for i in range(n_types)]
    rows = [observation_rows(dataset, i) for i in range(n_types)]
    fit_mu = [int((O > 0).sum()) >= config.min_observed for U, O, E in rows]
    fit_rho = [fm and int((U >= 2).sum()) >= config.min_multi_present
               for fm, (U, O, E) in zip(fit_mu, rows)]

    coeffs: list[np.ndarray | None] = [None] * n_types
    for i, (U, O, E) in enumerate(rows):
        if fit_rho[i]:
            _warn_if_constant(E, names[i])
            coeffs[i], _ = _fit_rows(U, O, E)

    b_fitted = [c[2] for c in coeffs if c is not None]
    b_median = float(np.median(b_fitted)) if b_fitted else 0.0
    for i, (U, O, E) in enumerate(rows):
        if fit_mu[i] and not fit_rho[i]:
            _warn_if_constant(E, names[i])
            coeffs[i], _ = _fit_rows(U, O, E, fixed_b=b_median)

    fitted_mu = [c for c, fm in zip(coeffs, fit_mu) if fm]
    if fitted_mu:
        arr = np.array(fitted_mu)
        median = np.array([np.median(arr[:, 0]), np.median(arr[:, 1]), b_median])
    else:
        median = np.zeros(3)
    flags = {}
    out = []
    for i in range(n_types):
        c = coeffs[i] if coeffs[i] is not None else median
        flags[names[i]] = {"mu": "fitted" if fit_mu[i] else "median",
                           "rho": "fitted" if fit_rho[i] else "median"}
        out.append(ObsRegressionCoeffs(float(c[0]), float(c[1]), float(c[2])))
    return out, flags


def _warn_if_constant(E, name):
    if E.size and np.ptp(E) == 0:
        warnings.warn(f"effort is constant for type {name!r}; the effort slope is "
                      "determined only by the L2 penalty", DegenerateDesignWarning)


# ---------------------------------------------------------------------------
# Everything together
# ---------------------------------------------------------------------------


def fit_model(dataset: Sequence[GameTrace], catalog: UnitTypeCatalog, em_config: EMConfig,
              u_max: int, obs_config: ObsFitConfig | None = None, min_unit_epochs: int = 100,
              heldout: Sequence[GameTrace] | None = None, rng: np.random.Generator | None = None):
    """Fit every model component from fully observed games; returns ``(ModelParams, FitReport)``."""
    if not dataset:
        raise TrainingError("empty training set")
    strategy, report = em_fit(dataset, em_config, rng)
    stats = loss_rate_stats(dataset, catalog.initial_counts)
    loss, loss_fallback = smoothed_loss_rates(stats, min_unit_epochs)
    coeffs, flags = fit_observation_model(dataset, catalog.n_types, obs_config, catalog.names)
    for name, fb in zip(catalog.names, loss_fallback):
        flags[name]["loss"] = "median" if fb else "fitted"
    report.fallback_flags = flags
    params = ModelParams(catalog=catalog, strategy=strategy, loss_rates=loss,
                         obs=tuple(coeffs), u_max=u_max)
    if heldout:
        report.heldout_loglik = heldout_loglik(heldout, strategy)
    return params, report
