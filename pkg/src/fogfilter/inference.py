"""Rao-Blackwellized particle filtering of hidden unit counts.

Particles sample the strategy-state chain using the transition model as the
proposal. Conditional on a sampled state history the per-type counts are
independent HMMs, so each particle carries one exact count distribution
(a vector over ``{0..u_max}``) per unit type. Because the proposal is the
transition model, a particle's weight is multiplied only by the evidence
likelihood. There is no resampling by default.

Count beliefs are plain numpy arrays whose last axis is the support
``{0..u_max}``; batches of beliefs are handled by broadcasting.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.special import logsumexp
from scipy.stats import binom

from .generative import GameTrace
from .model import ModelParams, ObsRegressionCoeffs, observation_loglik, zip_truncated_pmf

DEFAULT_PARTICLES = 1000


class FilterError(RuntimeError):
    """Evidence impossible under the model (every particle has zero weight)."""

    def __init__(self, epoch: int, message: str | None = None):
        self.epoch = epoch
        super().__init__(message or f"all particles died at epoch {epoch}")


# ---------------------------------------------------------------------------
# Per-type count messages
# ---------------------------------------------------------------------------


def survival_matrix(kills: int, loss_rate: float, u_max: int) -> np.ndarray:
    """``S[u, v] = P(v survivors | u units, kills)``; the base is ``max(0, u - kills)``."""
    u = np.arange(u_max + 1)
    base = np.maximum(u - int(kills), 0)
    return binom.pmf(u[None, :], base[:, None], 1.0 - loss_rate)


def production_matrix(production_dist: np.ndarray) -> np.ndarray:
    """``C[v, w] = P(v + produced = w)`` with everything at or above the cap folded into it."""
    q = np.asarray(production_dist, dtype=float)
    n = q.shape[-1]
    diff = np.arange(n)[None, :] - np.arange(n)[:, None]
    C = np.where(diff >= 0, q[..., np.clip(diff, 0, n - 1)], 0.0)
    # last column absorbs the tail beyond the cap
    C[..., :, -1] = 1.0 - C[..., :, :-1].sum(axis=-1)
    return np.maximum(C, 0.0)


def count_predict(prior: np.ndarray, kills: int, production_dist: np.ndarray,
                  loss_rate: float) -> np.ndarray:
    """Push a count belief through kills, binomial survival and production.

    ``production_dist`` must already be truncated to ``{0..u_max}`` with its
    tail folded into ``u_max``. Prior mass below ``kills`` is treated as
    having no survivors.
    """
    prior = np.asarray(prior, dtype=float)
    u_max = prior.shape[-1] - 1
    T = survival_matrix(kills, loss_rate, u_max) @ production_matrix(production_dist)
    out = prior @ T
    return out / out.sum(axis=-1, keepdims=True)


def count_update(predicted: np.ndarray, observed: int, effort: float,
                 coeffs: ObsRegressionCoeffs):
    """Condition a count belief on an observation; returns ``(posterior, log_evidence)``.

    Counts below the observed number get zero likelihood. If no predicted
    mass survives that floor the evidence is ``-inf`` and the posterior is
    returned unchanged (the caller marks the particle dead).
    """
    predicted = np.asarray(predicted, dtype=float)
    u_max = predicted.shape[-1] - 1
    lik = np.exp(observation_loglik(int(observed), coeffs, effort, u_max))
    return _condition(predicted, lik)


def _condition(belief: np.ndarray, lik: np.ndarray):
    post = belief * lik
    z = post.sum(axis=-1, keepdims=True)
    ok = z > 0
    post = np.where(ok, post / np.where(ok, z, 1.0), belief)
    with np.errstate(divide="ignore"):
        log_ev = np.log(z[..., 0])
    return post, log_ev


def apply_kill_floor(belief: np.ndarray, kills: int):
    """Use observed kills as proof that at least ``kills`` units existed.

    Where some mass lies at or above the floor, the belief is conditioned on
    it and the log of that mass is returned as evidence. Where none does, the
    mass is shifted up to the floor instead and the evidence is zero, so a
    lagging belief never kills a particle.
    """
    kills = int(kills)
    if kills == 0:
        return belief, np.zeros(belief.shape[:-1])
    shape = belief.shape
    flat = belief.reshape(-1, shape[-1])
    lik = (np.arange(shape[-1]) >= kills).astype(float)
    post, log_ev = _condition(flat, lik)
    impossible = ~np.isfinite(log_ev)
    if np.any(impossible):
        post[impossible] = 0.0
        post[impossible, min(kills, shape[-1] - 1)] = 1.0
        log_ev[impossible] = 0.0
    return post.reshape(shape), log_ev.reshape(shape[:-1])


# ---------------------------------------------------------------------------
# Shared per-epoch machinery
# ---------------------------------------------------------------------------


class _Kernels:
    """Caches per-(state, type) count transition matrices for one parameter set."""

    def __init__(self, params: ModelParams):
        self.params = params
        s = params.strategy
        u_max = params.u_max
        self.prod = zip_truncated_pmf(s.nu, s.lam, u_max)        # (M, N, U+1)
        self.conv = production_matrix(self.prod)                  # (M, N, U+1, U+1)
        self._surv: dict[tuple[int, int], np.ndarray] = {}
        self._trans: dict[tuple[int, ...], np.ndarray] = {}
        self.log_eta = _safe_log(s.eta)
        self.log_pi = _safe_log(s.pi)

    def survival(self, i: int, kills: int) -> np.ndarray:
        key = (i, int(kills))
        S = self._surv.get(key)
        if S is None:
            S = survival_matrix(kills, self.params.loss_rates[i], self.params.u_max)
            self._surv[key] = S
        return S

    def transition(self, kills: Sequence[int]) -> np.ndarray:
        """``(M, N, U+1, U+1)`` count transition for every state and type."""
        key = tuple(int(k) for k in kills)
        T = self._trans.get(key)
        if T is None:
            S = np.stack([self.survival(i, k) for i, k in enumerate(key)])   # (N, U+1, U+1)
            T = np.matmul(S[None], self.conv)
            if len(self._trans) > 64:
                self._trans.clear()
            self._trans[key] = T
        return T

    def evidence_lik(self, O, E: float) -> np.ndarray:
        p = self.params
        return np.exp(np.stack([observation_loglik(int(O[i]), p.obs[i], E, p.u_max)
                                for i in range(p.n_types)]))


def _safe_log(x):
    with np.errstate(divide="ignore"):
        return np.log(x)


def _propagate(beliefs: np.ndarray, states: np.ndarray, trans: np.ndarray) -> np.ndarray:
    out = np.empty_like(beliefs)
    for s in np.unique(states):
        idx = np.flatnonzero(states == s)
        b = beliefs[idx].transpose(1, 0, 2)                          # (N, r, U+1)
        out[idx] = np.matmul(b, trans[s]).transpose(1, 0, 2)
    total = out.sum(axis=-1, keepdims=True)
    return out / total


def _observe(beliefs: np.ndarray, ep, kernels: _Kernels, use_observations: bool,
             use_kills: bool):
    """Condition ``(P, N, U+1)`` beliefs on one epoch's evidence; returns log-increment per particle."""
    log_incr = np.zeros(beliefs.shape[0])
    if use_observations:
        lik = kernels.evidence_lik(ep.O, ep.E)                      # (N, U+1)
        beliefs, log_ev = _condition(beliefs, lik[None])
        log_incr += log_ev.sum(axis=1)
    if use_kills:
        for i, k in enumerate(ep.K):
            if k > 0:
                beliefs[:, i], log_ev = apply_kill_floor(beliefs[:, i], k)
                log_incr += log_ev
    return beliefs, log_incr


def _mixture(beliefs: np.ndarray, log_w: np.ndarray):
    w = _normalized(log_w)
    return np.einsum("r,rnu->nu", w, beliefs), w


def _normalized(log_w: np.ndarray) -> np.ndarray:
    alive = np.isfinite(log_w)
    w = np.zeros_like(log_w)
    if np.any(alive):
        w[alive] = np.exp(log_w[alive] - logsumexp(log_w[alive]))
    return w


def _sample_rows(cum: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    u = rng.random(cum.shape[0])
    idx = (u[:, None] >= cum).sum(axis=1)
    return np.minimum(idx, cum.shape[1] - 1)


def _next_states(states: np.ndarray, params: ModelParams, rng: np.random.Generator) -> np.ndarray:
    s = params.strategy
    if np.all(states < 0):
        cum = np.broadcast_to(np.cumsum(s.eta), (states.shape[0], s.n_states))
    else:
        cum = np.cumsum(s.pi, axis=1)[states]
    return _sample_rows(cum, rng)


# ---------------------------------------------------------------------------
# Filter
# ---------------------------------------------------------------------------


@dataclass
class ParticleSet:
    """Filter state after ``t`` epochs of evidence.

    ``states[r]`` is -1 before the first epoch (no strategy state drawn yet).
    ``beliefs`` has shape ``(R, N, u_max + 1)``.
    """

    t: int
    states: np.ndarray
    log_weights: np.ndarray
    beliefs: np.ndarray
    kills: np.ndarray | None = None

    @property
    def size(self) -> int:
        return self.states.shape[0]

    @property
    def alive(self) -> np.ndarray:
        return np.isfinite(self.log_weights)

    def weights(self) -> np.ndarray:
        return _normalized(self.log_weights)

    def marginals(self) -> np.ndarray:
        return _mixture(self.beliefs, self.log_weights)[0]

    def ess(self) -> float:
        w = self.weights()
        return float(1.0 / np.sum(w ** 2))

    def copy(self) -> "ParticleSet":
        return ParticleSet(self.t, self.states.copy(), self.log_weights.copy(),
                           self.beliefs.copy(), None if self.kills is None else self.kills.copy())

    @classmethod
    def initial(cls, params: ModelParams, R: int) -> "ParticleSet":
        n, u_max = params.n_types, params.u_max
        beliefs = np.zeros((R, n, u_max + 1))
        beliefs[:, np.arange(n), np.array(params.catalog.initial_counts)] = 1.0
        return cls(0, np.full(R, -1, dtype=np.int64), np.zeros(R), beliefs)


@dataclass
class FilterOutput:
    """Per-epoch filtering results for epochs ``1..T``.

    ``marginals[t-1, i]`` is the weighted-mixture count belief for type ``i``
    at epoch ``t``; ``loglik[t-1]`` estimates ``log p(y_t | y_1..y_{t-1})``.
    """

    marginals: np.ndarray
    existence: np.ndarray
    loglik: np.ndarray
    ess: np.ndarray
    particles: ParticleSet
    snapshots: list[ParticleSet] | None = None

    @property
    def T(self) -> int:
        return self.marginals.shape[0]

    @property
    def total_loglik(self) -> float:
        return float(self.loglik.sum())

    def mean_counts(self) -> np.ndarray:
        u = np.arange(self.marginals.shape[-1])
        return self.marginals @ u


def rbpf_step(particles: ParticleSet, ep, params: ModelParams, rng: np.random.Generator,
              kills_prev: np.ndarray, *, kernels: _Kernels | None = None,
              use_observations: bool = True, use_kills: bool = True,
              resample: bool = False) -> tuple[ParticleSet, float]:
    """Advance the particle set by one epoch; returns the new set and the evidence log-increment."""
    kernels = kernels or _Kernels(params)
    states = _next_states(particles.states, params, rng)
    trans = kernels.transition(kills_prev if use_kills else np.zeros(params.n_types, dtype=int))
    beliefs = _propagate(particles.beliefs, states, trans)
    beliefs, log_incr = _observe(beliefs, ep, kernels, use_observations, use_kills)

    prev_w = particles.weights()
    with np.errstate(divide="ignore", invalid="ignore"):
        log_w = particles.log_weights + log_incr
        step_ll = logsumexp(np.log(prev_w) + log_incr) if np.any(prev_w > 0) else -np.inf
    log_w = np.where(np.isnan(log_w), -np.inf, log_w)
    if not np.any(np.isfinite(log_w)):
        raise FilterError(ep.t)
    out = ParticleSet(ep.t, states, log_w, beliefs, ep.K.copy() if use_kills else None)
    if resample and out.ess() < 0.5 * out.size:
        out = _resample(out, rng)
    return out, float(step_ll)


def _resample(ps: ParticleSet, rng: np.random.Generator) -> ParticleSet:
    """Systematic resampling. Off by default; the reference method never resamples."""
    w = ps.weights()
    R = ps.size
    positions = (rng.random() + np.arange(R)) / R
    idx = np.minimum(np.searchsorted(np.cumsum(w), positions), R - 1)
    return ParticleSet(ps.t, ps.states[idx], np.zeros(R), ps.beliefs[idx], ps.kills)


def rbpf_filter(evidence: GameTrace, params: ModelParams, R: int = DEFAULT_PARTICLES,
                rng: np.random.Generator | None = None, *, horizon: int | None = None,
                use_observations: bool = True, use_kills: bool = True,
                resample: bool = False, keep_snapshots: bool = False) -> FilterOutput:
    """Filter a game's evidence through epoch ``horizon`` (default: all epochs).

    Ground-truth fields on the trace are ignored. ``use_observations=False``
    drops the O/E evidence (the "no observations" variant); ``use_kills=False``
    also drops kills. ``keep_snapshots`` stores the particle set after every
    epoch, starting with the initial set at epoch 0.
    """
    if R < 1:
        raise ValueError("need at least one particle")
    rng = rng if rng is not None else np.random.default_rng()
    epochs = evidence.epochs if horizon is None else evidence.epochs[:horizon]
    kernels = _Kernels(params)
    ps = ParticleSet.initial(params, R)
    n = params.n_types
    marg, exist, ll, ess = [], [], [], []
    snaps = [ps.copy()] if keep_snapshots else None
    kills_prev = np.zeros(n, dtype=np.int64)
    for ep in epochs:
        ps, step_ll = rbpf_step(ps, ep, params, rng, kills_prev, kernels=kernels,
                                use_observations=use_observations, use_kills=use_kills,
                                resample=resample)
        m, w = _mixture(ps.beliefs, ps.log_weights)
        marg.append(m)
        exist.append(1.0 - m[:, 0])
        ll.append(step_ll)
        ess.append(1.0 / np.sum(w ** 2))
        if keep_snapshots:
            snaps.append(ps.copy())
        kills_prev = ep.K
    u1 = params.u_max + 1
    return FilterOutput(
        marginals=np.array(marg).reshape(len(epochs), n, u1),
        existence=np.array(exist).reshape(len(epochs), n),
        loglik=np.array(ll),
        ess=np.array(ess),
        particles=ps,
        snapshots=snaps,
    )


@dataclass
class ForwardPrediction:
    """Predicted count marginals for epochs ``epochs[0]`` (the current one) through the target."""

    epochs: np.ndarray
    marginals: np.ndarray
    existence: np.ndarray = field(init=False)

    def __post_init__(self):
        self.existence = 1.0 - self.marginals[:, :, 0]

    def at(self, t: int) -> np.ndarray:
        return self.marginals[int(np.flatnonzero(self.epochs == t)[0])]


def predict_forward(particles: ParticleSet, params: ModelParams, t_star: int,
                    rng: np.random.Generator | None = None) -> ForwardPrediction:
    """Roll every particle forward to ``t_star`` without further evidence.

    Future states are sampled from the transition model; weights stay fixed.
    Kills recorded at the current epoch apply to the first step; future kills
    are taken as zero.
    """
    h = particles.t
    if t_star < h:
        raise ValueError(f"target epoch {t_star} precedes filter epoch {h}")
    rng = rng if rng is not None else np.random.default_rng()
    kernels = _Kernels(params)
    n = params.n_types
    kills = np.zeros(n, dtype=np.int64) if particles.kills is None else particles.kills
    states = particles.states
    beliefs = particles.beliefs
    out = [particles.marginals()]
    for _ in range(h + 1, t_star + 1):
        states = _next_states(states, params, rng)
        beliefs = _propagate(beliefs, states, kernels.transition(kills))
        kills = np.zeros(n, dtype=np.int64)
        out.append(_mixture(beliefs, particles.log_weights)[0])
    return ForwardPrediction(np.arange(h, t_star + 1), np.array(out))


# ---------------------------------------------------------------------------
# Exact enumeration oracle
# ---------------------------------------------------------------------------

MAX_PATHS = 10 ** 6
MAX_CELLS = 5 * 10 ** 7


def exact_filter_small(evidence: GameTrace, params: ModelParams, *,
                       use_observations: bool = True, use_kills: bool = True) -> np.ndarray:
    """Exact filtering marginals ``(T, N, u_max+1)`` by enumerating every state history.

    Only usable on small instances: ``M**T`` histories are tracked explicitly.
    """
    M = params.n_states
    T = evidence.T
    width = params.n_types * (params.u_max + 1)
    if M ** T > MAX_PATHS or M ** T * width > MAX_CELLS:
        raise ValueError(f"instance too large for enumeration (M^T={M ** T}, N*(Umax+1)={width})")
    kernels = _Kernels(params)
    ps = ParticleSet.initial(params, 1)
    log_w = np.zeros(1)
    states = ps.states
    beliefs = ps.beliefs
    kills_prev = np.zeros(params.n_types, dtype=np.int64)
    out = []
    for ep in evidence.epochs:
        # every history extended by every next state
        nxt = np.tile(np.arange(M), states.shape[0])
        parent = np.repeat(np.arange(states.shape[0]), M)
        if states[0] < 0:
            log_prior = kernels.log_eta[nxt]
        else:
            log_prior = kernels.log_pi[states[parent], nxt]
        keep = np.isfinite(log_prior) & np.isfinite(log_w[parent])
        nxt, parent, log_prior = nxt[keep], parent[keep], log_prior[keep]
        trans = kernels.transition(kills_prev if use_kills else np.zeros(params.n_types, dtype=int))
        beliefs = _propagate(beliefs[parent], nxt, trans)
        beliefs, log_incr = _observe(beliefs, ep, kernels, use_observations, use_kills)
        log_w = log_w[parent] + log_prior + log_incr
        states = nxt
        if not np.any(np.isfinite(log_w)):
            raise FilterError(ep.t)
        out.append(_mixture(beliefs, log_w)[0])
        kills_prev = ep.K
    return np.array(out).reshape(T, params.n_types, params.u_max + 1)


def total_variation(p: np.ndarray, q: np.ndarray) -> np.ndarray:
    return 0.5 * np.abs(np.asarray(p) - np.asarray(q)).sum(axis=-1)
