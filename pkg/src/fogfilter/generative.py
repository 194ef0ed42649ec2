"""Forward simulation of complete games from a parameter set.

Each game walks the strategy chain, draws production, advances the per-type
counts through binomial survival, and records kills, scouting effort and
beta-binomial observations. Ground-truth counts (and the exact number of
unobserved losses) are kept on every epoch so the traces can be used for
training and scoring.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .model import (
    RHO_MIN,
    ModelError,
    ModelParams,
    ObsRegressionCoeffs,
    StrategyParams,
    UnitTypeCatalog,
    link_obs_params,
)


@dataclass
class EpochRecord:
    """Evidence (and optionally ground truth) for one 30-second epoch.

    ``L`` holds the number of unobserved losses suffered between the previous
    epoch and this one; only synthetic traces carry it.
    """

    t: int
    P: np.ndarray | None
    K: np.ndarray
    O: np.ndarray
    E: float
    U: np.ndarray | None = None
    L: np.ndarray | None = None

    def __post_init__(self):
        self.t = int(self.t)
        self.E = float(self.E)
        self.K = np.asarray(self.K, dtype=np.int64)
        self.O = np.asarray(self.O, dtype=np.int64)
        for name in ("P", "U", "L"):
            v = getattr(self, name)
            if v is not None:
                setattr(self, name, np.asarray(v, dtype=np.int64))
        if not 0.0 <= self.E <= 1.0:
            raise ModelError(f"epoch {self.t}: effort {self.E} outside [0, 1]")
        if np.any(self.K < 0) or np.any(self.O < 0):
            raise ModelError(f"epoch {self.t}: negative counts")
        if self.U is not None:
            bad = np.flatnonzero(self.O > self.U)
            if bad.size:
                raise ModelError(f"epoch {self.t}: O > U for type index {int(bad[0])}")
            bad = np.flatnonzero(self.K > self.U)
            if bad.size:
                raise ModelError(f"epoch {self.t}: K > U for type index {int(bad[0])}")

    @property
    def n_types(self) -> int:
        return self.O.shape[0]

    def to_dict(self) -> dict:
        d = {"t": self.t}
        if self.P is not None:
            d["P"] = self.P.tolist()
        d["K"] = self.K.tolist()
        d["O"] = self.O.tolist()
        d["E"] = self.E
        if self.U is not None:
            d["U"] = self.U.tolist()
        if self.L is not None:
            d["L"] = self.L.tolist()
        return d

    def __eq__(self, other):
        if not isinstance(other, EpochRecord):
            return NotImplemented
        return self.to_dict() == other.to_dict()


@dataclass
class GameTrace:
    id: str
    epochs: list[EpochRecord] = field(default_factory=list)

    def __post_init__(self):
        for k, ep in enumerate(self.epochs, start=1):
            if ep.t != k:
                raise ModelError(f"game {self.id}: epochs must run 1..T contiguously (got t={ep.t} at position {k})")
        if self.epochs:
            n = self.epochs[0].n_types
            if any(ep.n_types != n for ep in self.epochs):
                raise ModelError(f"game {self.id}: inconsistent number of unit types")

    @property
    def T(self) -> int:
        return len(self.epochs)

    @property
    def has_truth(self) -> bool:
        return bool(self.epochs) and all(ep.U is not None for ep in self.epochs)

    def array(self, name: str) -> np.ndarray:
        """Stack one per-type field into a ``(T, N)`` array."""
        return np.stack([getattr(ep, name) for ep in self.epochs])

    @property
    def effort(self) -> np.ndarray:
        return np.array([ep.E for ep in self.epochs])

    def to_dict(self) -> dict:
        return {"id": self.id, "epochs": [ep.to_dict() for ep in self.epochs]}

    def without_truth(self) -> "GameTrace":
        return GameTrace(self.id, [EpochRecord(ep.t, None, ep.K, ep.O, ep.E) for ep in self.epochs])

    def truncated(self, horizon: int) -> "GameTrace":
        return GameTrace(self.id, self.epochs[:horizon])


@dataclass
class GenConfig:
    T: int = 13
    kill_rate: float = 0.01
    kill_start: int = 6
    effort_profile: str | Sequence[float] = "peaked"
    seed: int = 0

    def __post_init__(self):
        if self.T < 1:
            raise ModelError("T must be at least 1")
        if not 0.0 <= self.kill_rate < 1.0:
            raise ModelError("kill_rate must lie in [0, 1)")


# ---------------------------------------------------------------------------
# Sampling primitives
# ---------------------------------------------------------------------------


def sample_state_sequence(strategy: StrategyParams, T: int, rng: np.random.Generator) -> np.ndarray:
    states = np.empty(T, dtype=np.int64)
    m = strategy.n_states
    for t in range(T):
        p = strategy.eta if t == 0 else strategy.pi[states[t - 1]]
        states[t] = rng.choice(m, p=p)
    return states


def sample_production(state: int, strategy: StrategyParams, rng: np.random.Generator) -> np.ndarray:
    nu = strategy.nu[state]
    lam = strategy.lam[state]
    produce = rng.random(nu.shape[0]) < nu
    return np.where(produce, 1 + rng.poisson(lam), 0).astype(np.int64)


def step_counts(U_prev, K_prev, P_t, loss_rates, u_max: int, rng: np.random.Generator,
                return_losses: bool = False):
    """Advance true counts one epoch: binomial survival of the unkilled, plus production."""
    U_prev = np.asarray(U_prev, dtype=np.int64)
    K_prev = np.asarray(K_prev, dtype=np.int64)
    if np.any(K_prev > U_prev):
        raise ModelError("kills exceed the existing count")
    base = U_prev - K_prev
    survivors = rng.binomial(base, 1.0 - np.asarray(loss_rates, dtype=float))
    U = np.minimum(survivors + np.asarray(P_t, dtype=np.int64), u_max)
    if return_losses:
        return U, base - survivors
    return U


def sample_kills(U_t, config: GenConfig, rng: np.random.Generator, t: int | None = None) -> np.ndarray:
    U_t = np.asarray(U_t, dtype=np.int64)
    if config.kill_rate == 0.0 or (t is not None and t < config.kill_start):
        return np.zeros_like(U_t)
    return rng.binomial(U_t, config.kill_rate).astype(np.int64)


_FLAT = re.compile(r"^flat\(\s*([0-9.eE+-]+)\s*\)$")


def effort_schedule(profile, T: int) -> np.ndarray:
    """Per-epoch scouting effort for epochs ``1..T``.

    ``profile`` is ``"none"``, ``"peaked"``, ``"flat(x)"`` or an explicit
    sequence of ``T`` values. The peaked profile is a synthetic stand-in for
    typical human scouting: little effort early, a plateau over epochs 5-8,
    then a low background level.
    """
    if not isinstance(profile, str):
        values = np.asarray(profile, dtype=float)
        if values.shape != (T,):
            raise ModelError(f"explicit effort schedule needs {T} values")
        if np.any(values < 0) or np.any(values > 1):
            raise ModelError("effort values must lie in [0, 1]")
        return values
    name = profile.strip().lower()
    if name == "none":
        return np.zeros(T)
    m = _FLAT.match(name)
    if m:
        x = float(m.group(1))
        if not 0.0 <= x <= 1.0:
            raise ModelError("flat effort must lie in [0, 1]")
        return np.full(T, x)
    if name == "peaked":
        t = np.arange(1, T + 1)
        out = np.full(T, 0.1)
        out[t < 4] = 0.05
        out[t == 4] = 0.25
        out[(t >= 5) & (t <= 8)] = 0.5
        return out
    raise ModelError(f"unknown effort profile {profile!r}")


def sample_observation(U_t, coeffs: Sequence[ObsRegressionCoeffs], E_t: float,
                       rng: np.random.Generator) -> np.ndarray:
    """Beta-binomial draw per type: success probability from a Beta, then a binomial."""
    U_t = np.asarray(U_t, dtype=np.int64)
    out = np.zeros_like(U_t)
    for i, c in enumerate(coeffs):
        p = link_obs_params(c, E_t)
        if p.rho <= RHO_MIN:
            q = p.mu
        else:
            q = rng.beta(p.alpha, p.beta) if 0.0 < p.mu < 1.0 else p.mu
        out[i] = rng.binomial(U_t[i], q)
    return out


def generate_game(params: ModelParams, config: GenConfig, rng: np.random.Generator,
                  game_id: str = "game-0") -> GameTrace:
    strategy = params.strategy
    states = sample_state_sequence(strategy, config.T, rng)
    effort = effort_schedule(config.effort_profile, config.T)
    U = np.array(params.catalog.initial_counts, dtype=np.int64)
    K = np.zeros_like(U)
    epochs = []
    for t in range(1, config.T + 1):
        P = sample_production(states[t - 1], strategy, rng)
        U, L = step_counts(U, K, P, params.loss_rates, params.u_max, rng, return_losses=True)
        O = sample_observation(U, params.obs, effort[t - 1], rng)
        K = sample_kills(U, config, rng, t=t)
        epochs.append(EpochRecord(t=t, P=P, K=K, O=O, E=effort[t - 1], U=U, L=L))
    return GameTrace(game_id, epochs)


def game_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), int(index)])


def generate_dataset(params: ModelParams, config: GenConfig, count: int,
                     rng: np.random.Generator | None = None) -> list[GameTrace]:
    """Generate ``count`` games, game ``g`` drawn from its own stream keyed by (seed, g)."""
    if count < 0:
        raise ModelError("count must be nonnegative")
    seed = config.seed if rng is None else int(rng.integers(2**63 - 1))
    return [generate_game(params, config, game_rng(seed, g), game_id=f"game-{g}")
            for g in range(count)]


# ---------------------------------------------------------------------------
# A small built-in opening model used by demos, tests and the acceptance suite
# ---------------------------------------------------------------------------

DEMO_TYPES = ("probe", "zealot", "dragoon", "gateway",
              "robotics", "observatory", "support_bay", "shuttle", "reaver")
DEMO_TECH = ("robotics", "observatory", "support_bay")


def demo_params(u_max: int = 60) -> ModelParams:
    """A hand-built six-state opening model over nine unit types.

    States: 0 economic start, 1 gateway build-up, 2 dragoon army,
    3 robotics tech, 4 reaver-drop tech (support bay + shuttle), 5 reaver
    production / observatory standard line.
    """
    names = DEMO_TYPES
    catalog = UnitTypeCatalog(
        names=names,
        tech_flags=tuple(n in DEMO_TECH for n in names),
        initial_counts=tuple(4 if n == "probe" else 0 for n in names),
    )
    n = len(names)
    col = {name: i for i, name in enumerate(names)}
    m = 6
    nu = np.zeros((m, n))
    lam = np.zeros((m, n))

    def prod(s, name, p, rate):
        nu[s, col[name]] = p
        lam[s, col[name]] = rate

    for s in range(m):
        prod(s, "probe", 0.95, 0.6)
    prod(0, "gateway", 0.15, 0.0)
    prod(1, "gateway", 0.55, 0.3)
    prod(1, "zealot", 0.6, 0.8)
    prod(2, "dragoon", 0.8, 1.0)
    prod(2, "zealot", 0.3, 0.3)
    prod(2, "gateway", 0.2, 0.2)
    prod(3, "robotics", 0.6, 0.0)
    prod(3, "dragoon", 0.6, 0.5)
    prod(4, "support_bay", 0.7, 0.0)
    prod(4, "shuttle", 0.6, 0.0)
    prod(4, "dragoon", 0.4, 0.3)
    prod(5, "reaver", 0.6, 0.0)
    prod(5, "observatory", 0.25, 0.0)
    prod(5, "dragoon", 0.6, 0.6)

    pi = np.array([
        [0.70, 0.30, 0.00, 0.00, 0.00, 0.00],
        [0.00, 0.55, 0.45, 0.00, 0.00, 0.00],
        [0.00, 0.05, 0.70, 0.25, 0.00, 0.00],
        [0.00, 0.00, 0.30, 0.40, 0.20, 0.10],
        [0.00, 0.00, 0.10, 0.00, 0.40, 0.50],
        [0.00, 0.00, 0.30, 0.00, 0.00, 0.70],
    ])
    eta = np.array([1.0, 0, 0, 0, 0, 0])
    strategy = StrategyParams(eta=eta, pi=pi, nu=nu, lam=lam)

    obs = []
    for name in names:
        if name == "probe":
            obs.append(ObsRegressionCoeffs(a0=-3.0, a1=6.0, b=-0.8))
        elif name in ("zealot", "dragoon"):
            obs.append(ObsRegressionCoeffs(a0=-2.5, a1=6.0, b=-0.85))
        elif name == "gateway":
            obs.append(ObsRegressionCoeffs(a0=-2.5, a1=6.0, b=0.9))
        else:
            obs.append(ObsRegressionCoeffs(a0=-2.0, a1=5.0, b=-1.5))
    loss = np.full(n, 0.01)
    return ModelParams(catalog=catalog, strategy=strategy, loss_rates=loss,
                       obs=tuple(obs), u_max=u_max)
