"""Model parameters and the two count distributions the model is built on.

Production of each unit type is zero-inflated Poisson with a +1 shift on the
Poisson branch, and observation counts are beta-binomial in the
(mean, dispersion) parameterization with logistic links on scouting effort.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.special import expit, gammaln, xlog1py, xlogy

SCHEMA_VERSION = "1.0"

RHO_MIN = 1e-8
RHO_MAX = 1.0 - 1e-8
DEFAULT_U_MAX = 60


class ModelError(ValueError):
    """Raised for invalid parameters or arguments to model primitives."""


def logistic(x):
    return expit(x)


# ---------------------------------------------------------------------------
# Parameter containers
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class UnitTypeCatalog:
    names: tuple[str, ...]
    tech_flags: tuple[bool, ...]
    initial_counts: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "names", tuple(str(n) for n in self.names))
        object.__setattr__(self, "tech_flags", tuple(bool(f) for f in self.tech_flags))
        object.__setattr__(self, "initial_counts", tuple(int(c) for c in self.initial_counts))
        n = len(self.names)
        if n < 1:
            raise ModelError("catalog needs at least one unit type")
        if len(set(self.names)) != n:
            raise ModelError("unit-type names must be unique")
        if len(self.tech_flags) != n or len(self.initial_counts) != n:
            raise ModelError("tech_flags and initial_counts must have one entry per type")
        if any(c < 0 for c in self.initial_counts):
            raise ModelError("initial counts must be nonnegative")

    @property
    def n_types(self) -> int:
        return len(self.names)

    def index(self, name: str) -> int:
        return self.names.index(name)


@dataclass(frozen=True, eq=False)
class StrategyParams:
    """Strategy HMM parameters: initial distribution, transitions, ZIP production.

    ``nu[s, i]`` is the probability of producing at least one unit of type
    ``i`` in state ``s``; ``lam[s, i]`` is the Poisson rate for units beyond
    the first.
    """

    eta: np.ndarray
    pi: np.ndarray
    nu: np.ndarray
    lam: np.ndarray

    def __post_init__(self):
        eta = np.array(self.eta, dtype=float)
        pi = np.array(self.pi, dtype=float)
        nu = np.array(self.nu, dtype=float)
        lam = np.array(self.lam, dtype=float)
        if nu.ndim == 1:
            nu = nu[None, :]
        if lam.ndim == 1:
            lam = lam[None, :]
        pi = np.atleast_2d(pi)
        m = eta.shape[0]
        if eta.ndim != 1 or m < 1:
            raise ModelError("eta must be a nonempty vector")
        if pi.shape != (m, m):
            raise ModelError(f"pi must be {m}x{m}, got {pi.shape}")
        if nu.shape[0] != m or lam.shape != nu.shape:
            raise ModelError("nu and lambda must both be M x N")
        if np.any(eta < 0) or abs(eta.sum() - 1.0) > 1e-9:
            raise ModelError("eta must be a probability vector")
        if np.any(pi < 0) or np.any(np.abs(pi.sum(axis=1) - 1.0) > 1e-9):
            raise ModelError("rows of pi must be probability vectors")
        if np.any(nu < 0) or np.any(nu > 1) or not np.all(np.isfinite(nu)):
            raise ModelError("nu entries must lie in [0, 1]")
        if np.any(lam < 0) or not np.all(np.isfinite(lam)):
            raise ModelError("lambda entries must be finite and nonnegative")
        for name, arr in (("eta", eta), ("pi", pi), ("nu", nu), ("lam", lam)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def n_states(self) -> int:
        return self.eta.shape[0]

    @property
    def n_types(self) -> int:
        return self.nu.shape[1]


@dataclass(frozen=True)
class ObsDistParams:
    mu: float
    rho: float

    @property
    def alpha(self) -> float:
        return self.mu * (1.0 - self.rho) / self.rho

    @property
    def beta(self) -> float:
        return (1.0 - self.mu) * (1.0 - self.rho) / self.rho


@dataclass(frozen=True)
class ObsRegressionCoeffs:
    """Logit-scale coefficients: ``logit(mu) = a0 + a1*E`` and ``logit(rho) = b``."""

    a0: float = 0.0
    a1: float = 0.0
    b: float = 0.0

    def __post_init__(self):
        for v in (self.a0, self.a1, self.b):
            if not math.isfinite(v):
                raise ModelError("regression coefficients must be finite")


@dataclass(frozen=True, eq=False)
class ModelParams:
    catalog: UnitTypeCatalog
    strategy: StrategyParams
    loss_rates: np.ndarray
    obs: tuple[ObsRegressionCoeffs, ...]
    u_max: int = DEFAULT_U_MAX

    def __post_init__(self):
        loss = np.array(self.loss_rates, dtype=float)
        n = self.catalog.n_types
        if self.u_max < 1:
            raise ModelError("u_max must be a positive integer")
        if self.strategy.n_types != n:
            raise ModelError(f"strategy has {self.strategy.n_types} types, catalog has {n}")
        if loss.shape != (n,):
            raise ModelError("need one loss rate per type")
        if np.any(loss <= 0) or np.any(loss >= 1):
            raise ModelError("loss rates must lie strictly inside (0, 1)")
        if len(self.obs) != n:
            raise ModelError("need one set of observation coefficients per type")
        if max(self.catalog.initial_counts) > self.u_max:
            raise ModelError("initial counts exceed u_max")
        loss.setflags(write=False)
        object.__setattr__(self, "loss_rates", loss)
        object.__setattr__(self, "obs", tuple(self.obs))

    @property
    def n_types(self) -> int:
        return self.catalog.n_types

    @property
    def n_states(self) -> int:
        return self.strategy.n_states

    def replace(self, **changes) -> "ModelParams":
        kw = dict(catalog=self.catalog, strategy=self.strategy,
                  loss_rates=self.loss_rates, obs=self.obs, u_max=self.u_max)
        kw.update(changes)
        return ModelParams(**kw)

    def to_dict(self) -> dict:
        s = self.strategy
        return {
            "schema_version": SCHEMA_VERSION,
            "catalog": {
                "names": list(self.catalog.names),
                "tech_flags": list(self.catalog.tech_flags),
                "initial_counts": list(self.catalog.initial_counts),
            },
            "strategy": {
                "M": s.n_states,
                "eta": s.eta.tolist(),
                "pi": s.pi.tolist(),
                "nu": s.nu.tolist(),
                "lambda": s.lam.tolist(),
            },
            "loss_rates": self.loss_rates.tolist(),
            "obs": [{"a0": c.a0, "a1": c.a1, "b": c.b} for c in self.obs],
            "u_max": self.u_max,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelParams":
        check_schema_version(d.get("schema_version", SCHEMA_VERSION))
        cat = d["catalog"]
        st = d["strategy"]
        strategy = StrategyParams(eta=st["eta"], pi=st["pi"], nu=st["nu"], lam=st["lambda"])
        if "M" in st and int(st["M"]) != strategy.n_states:
            raise ModelError("strategy.M disagrees with eta length")
        return cls(
            catalog=UnitTypeCatalog(cat["names"], cat["tech_flags"], cat["initial_counts"]),
            strategy=strategy,
            loss_rates=d["loss_rates"],
            obs=tuple(ObsRegressionCoeffs(float(o["a0"]), float(o["a1"]), float(o["b"]))
                      for o in d["obs"]),
            u_max=int(d["u_max"]),
        )


def check_schema_version(version) -> None:
    major = str(version).split(".")[0]
    if major != SCHEMA_VERSION.split(".")[0]:
        raise ModelError(f"unsupported schema_version {version!r} (expected {SCHEMA_VERSION})")


# ---------------------------------------------------------------------------
# Zero-inflated Poisson
# ---------------------------------------------------------------------------


def _check_zip_args(nu, lam):
    nu = np.asarray(nu, dtype=float)
    lam = np.asarray(lam, dtype=float)
    if np.any(nu < 0) or np.any(nu > 1) or np.any(np.isnan(nu)):
        raise ModelError("nu must lie in [0, 1]")
    if np.any(lam < 0) or np.any(np.isnan(lam)):
        raise ModelError("lambda must be nonnegative")
    return nu, lam


def zip_logpmf(k, nu, lam):
    """Log of the zero-inflated, +1-shifted Poisson pmf (broadcasts)."""
    k = np.asarray(k)
    if np.any(k < 0):
        raise ModelError("k must be nonnegative")
    nu, lam = _check_zip_args(nu, lam)
    km1 = np.maximum(k - 1, 0).astype(float)
    with np.errstate(divide="ignore"):
        pos = np.log(nu) + xlogy(km1, lam) - lam - gammaln(km1 + 1.0)
        zero = np.log1p(-nu)
    return np.where(k == 0, zero, pos)


def zip_pmf(k, nu, lam):
    """Probability of producing ``k`` units: ``1-nu`` at zero, ``nu*Pois(k-1; lam)`` above."""
    out = np.exp(zip_logpmf(k, nu, lam))
    return float(out) if np.ndim(out) == 0 else out


def zip_truncated_pmf(nu, lam, u_max: int) -> np.ndarray:
    """ZIP pmf on ``{0..u_max}`` with all mass above ``u_max`` folded into ``u_max``.

    ``nu`` and ``lam`` broadcast; the support is appended as the last axis.
    """
    nu, lam = _check_zip_args(nu, lam)
    nu, lam = np.broadcast_arrays(nu, lam)
    k = np.arange(u_max + 1)
    pmf = np.exp(zip_logpmf(k, nu[..., None], lam[..., None]))
    pmf[..., -1] = np.maximum(1.0 - pmf[..., :-1].sum(axis=-1), 0.0)
    return pmf


# ---------------------------------------------------------------------------
# Beta-binomial
# ---------------------------------------------------------------------------


def _log_binom_coef(u, o):
    return gammaln(u + 1.0) - gammaln(o + 1.0) - gammaln(u - o + 1.0)


_PHI_SWITCH = 1e4


def _log_rising(x, n):
    """``log(x (x+1) ... (x+n-1))`` for integer-valued ``n`` (broadcasts)."""
    x, n = np.broadcast_arrays(x, n)
    top = int(n.max()) if n.size else 0
    j = np.arange(top)
    terms = np.where(j < n[..., None], np.log(x[..., None] + j), 0.0)
    return terms.sum(axis=-1)


def betabin_logpmf(o, u, mu, rho):
    """Log beta-binomial pmf of ``o`` successes out of ``u`` (broadcasts).

    Entries with ``o > u`` get ``-inf``. Dispersion at or below ``RHO_MIN``
    falls back to the binomial limit.
    """
    o = np.asarray(o, dtype=float)
    u = np.asarray(u, dtype=float)
    mu = np.asarray(mu, dtype=float)
    rho = np.asarray(rho, dtype=float)
    if np.any(o < 0) or np.any(u < 0):
        raise ModelError("counts must be nonnegative")
    if np.any(mu < 0) or np.any(mu > 1) or np.any(rho < 0) or np.any(rho >= 1):
        raise ModelError("need mu in [0, 1] and rho in [0, 1)")
    o, u, mu, rho = np.broadcast_arrays(o, u, mu, rho)
    valid = o <= u
    oo = np.where(valid, o, 0.0)
    rest = np.where(valid, u - o, 0.0)
    with np.errstate(divide="ignore", invalid="ignore"):
        log_c = _log_binom_coef(oo + rest, oo)

        # binomial branch; xlogy handles 0*log(0)
        binom = log_c + xlogy(oo, mu) + xlog1py(rest, -mu)

        phi = (1.0 - rho) / np.maximum(rho, RHO_MIN)
        a = mu * phi
        b = (1.0 - mu) * phi
        interior = (mu > 0) & (mu < 1)
        a_s = np.where(interior, a, 1.0)
        b_s = np.where(interior, b, 1.0)
        bb = (log_c + gammaln(oo + a_s) + gammaln(rest + b_s) - gammaln(oo + rest + phi)
              - gammaln(a_s) - gammaln(b_s) + gammaln(phi))
        big = interior & (phi > _PHI_SWITCH)
        if np.any(big):
            # log-gamma differences cancel badly for huge shapes; sum the
            # rising factorials directly instead
            bb = np.where(big, log_c + _log_rising(a_s, oo) + _log_rising(b_s, rest)
                          - _log_rising(phi, oo + rest), bb)
        # mu on the boundary makes the beta prior a point mass
        bb = np.where(interior, bb, binom)

    out = np.where(rho <= RHO_MIN, binom, bb)
    return np.where(valid, out, -np.inf)


def betabin_pmf(o, u, params: ObsDistParams):
    """Beta-binomial probability of seeing ``o`` of ``u`` existing units."""
    if np.any(np.asarray(o) > np.asarray(u)):
        raise ModelError("observed count exceeds the true count")
    out = np.exp(betabin_logpmf(o, u, params.mu, params.rho))
    return float(out) if np.ndim(out) == 0 else out


def link_obs_params(coeffs: ObsRegressionCoeffs, effort: float) -> ObsDistParams:
    """Map scouting effort to beta-binomial (mean, dispersion)."""
    if not 0.0 <= effort <= 1.0:
        raise ModelError(f"effort must lie in [0, 1], got {effort}")
    mu = float(logistic(coeffs.a0 + coeffs.a1 * effort))
    rho = float(np.clip(logistic(coeffs.b), RHO_MIN, RHO_MAX))
    return ObsDistParams(mu=mu, rho=rho)


def observation_loglik(o: int, coeffs: ObsRegressionCoeffs, effort: float, u_max: int) -> np.ndarray:
    """``log P(O=o | U=u, E)`` for every ``u`` in ``{0..u_max}``; ``-inf`` below ``o``."""
    p = link_obs_params(coeffs, effort)
    return betabin_logpmf(o, np.arange(u_max + 1), p.mu, p.rho)


def default_catalog(names: Sequence[str], tech: Sequence[str] = (), initial: dict | None = None
                    ) -> UnitTypeCatalog:
    initial = initial or {}
    return UnitTypeCatalog(
        names=tuple(names),
        tech_flags=tuple(n in tech for n in names),
        initial_counts=tuple(int(initial.get(n, 0)) for n in names),
    )
