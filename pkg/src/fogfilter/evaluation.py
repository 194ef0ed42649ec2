"""Error metrics, cross-validation and the experiment drivers.

Count types are scored with relative expected absolute error
``E|U - u| / (u + 1)``; tech types with expected 0/1 error on presence.
Experiments return :class:`ErrorCurve` objects keyed by ``(type, variant)``
and can be flattened into tidy rows for CSV export.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np
from scipy import stats

from .baseline import BaselineTables, baseline_existence, baseline_predict, fit_baseline, seen_so_far
from .generative import GameTrace
from .inference import predict_forward, rbpf_filter
from .model import ModelParams, UnitTypeCatalog
from .training import EMConfig, em_fit, fit_model, heldout_loglik

Z95 = 1.959963984540054


def thread_count() -> int:
    """Worker threads for per-game evaluation, capped by ``FOGFILTER_THREADS``."""
    try:
        return max(1, int(os.environ.get("FOGFILTER_THREADS", "1")))
    except ValueError:
        return 1


def _map(fn: Callable, items: Sequence):
    n = thread_count()
    if n == 1 or len(items) < 2:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=n) as pool:
        return list(pool.map(fn, items))


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------


def rel_abs_error(belief, true_count) -> np.ndarray | float:
    """Relative expected absolute error of a count belief (broadcasts over leading axes)."""
    belief = np.asarray(belief, dtype=float)
    u = np.asarray(true_count, dtype=float)
    k = np.arange(belief.shape[-1])
    err = (belief * np.abs(k - u[..., None])).sum(axis=-1) / (u + 1.0)
    return float(err) if np.ndim(err) == 0 else err


def zero_one_error(belief, truly_present) -> np.ndarray | float:
    """Expected 0/1 error of the presence call implied by a count belief."""
    belief = np.asarray(belief, dtype=float)
    p0 = belief[..., 0]
    err = np.where(np.asarray(truly_present, dtype=bool), p0, 1.0 - p0)
    return float(err) if np.ndim(err) == 0 else err


def type_error(belief, true_count, tech: bool):
    if tech:
        return zero_one_error(belief, np.asarray(true_count) > 0)
    return rel_abs_error(belief, true_count)


@dataclass
class ErrorCurve:
    """Mean error per step with a normal-approximation 95% half-width."""

    mean: np.ndarray
    half_width: np.ndarray
    n: int

    def __post_init__(self):
        if self.n <= 0:
            raise ValueError("an error curve needs at least one game")

    @classmethod
    def from_samples(cls, errors) -> "ErrorCurve":
        """``errors`` is ``(games, steps)``."""
        errors = np.atleast_2d(np.asarray(errors, dtype=float))
        n = errors.shape[0]
        mean = errors.mean(axis=0)
        if n > 1:
            hw = Z95 * errors.std(axis=0, ddof=1) / np.sqrt(n)
        else:
            hw = np.zeros_like(mean)
        return cls(mean, hw, n)


@dataclass
class ExperimentConfig:
    folds: int = 5
    m_sweep: tuple[int, ...] = (20, 25, 30, 35, 40)
    R: int = 1000
    runs_per_game: int = 30
    effort_profile: str = "peaked"
    seed: int = 0
    suppress_kills: bool = False

    def __post_init__(self):
        if self.folds < 2:
            raise ValueError("need at least two folds")
        self.m_sweep = tuple(int(m) for m in self.m_sweep)


def kfold_split(dataset: Sequence, folds: int, seed: int = 0):
    """Shuffle once under ``seed`` and cut into ``folds`` near-equal test sets."""
    n = len(dataset)
    if folds < 2:
        raise ValueError("need at least two folds")
    if folds > n:
        raise ValueError(f"{folds} folds requested for {n} games")
    order = np.random.default_rng(seed).permutation(n)
    parts = np.array_split(order, folds)
    out = []
    for k in range(folds):
        test_idx = set(parts[k].tolist())
        train = [dataset[i] for i in range(n) if i not in test_idx]
        test = [dataset[i] for i in sorted(test_idx)]
        out.append((train, test))
    return out


def _run_rng(seed: int, *keys: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), *[int(k) for k in keys]])


# ---------------------------------------------------------------------------
# Filtering experiment
# ---------------------------------------------------------------------------

VARIANTS = ("model", "model_no_obs", "baseline")


def _filter_game_errors(game: GameTrace, game_index: int, params: ModelParams,
                        tables: BaselineTables | None, config: ExperimentConfig,
                        types: Sequence[int]):
    U = game.array("U")
    T = game.T
    tech = params.catalog.tech_flags
    evidence = game.without_truth()
    out = {}
    for v, (use_obs, use_kills) in enumerate(((True, True), (False, not config.suppress_kills))):
        acc = np.zeros((len(types), T))
        for r in range(config.runs_per_game):
            rng = _run_rng(config.seed, game_index, r, v)
            res = rbpf_filter(evidence, params, config.R, rng,
                              use_observations=use_obs, use_kills=use_kills)
            for j, i in enumerate(types):
                acc[j] += type_error(res.marginals[:, i], U[:, i], tech[i])
        out[VARIANTS[v]] = acc / config.runs_per_game
    if tables is not None:
        seen = seen_so_far(game)
        base = np.zeros((len(types), T))
        for t in range(1, min(T, tables.T) + 1):
            pred = baseline_predict(tables, seen[t - 1], t)
            pex = baseline_existence(tables, seen[t - 1], t)
            for j, i in enumerate(types):
                u = U[t - 1, i]
                if tech[i]:
                    base[j, t - 1] = (1.0 - pex[i]) if u > 0 else pex[i]
                else:
                    base[j, t - 1] = abs(pred[i] - u) / (u + 1.0)
        out["baseline"] = base
    return out


def filtering_errors(test_games: Sequence[GameTrace], params: ModelParams,
                     tables: BaselineTables | None, config: ExperimentConfig,
                     types: Sequence[int] | None = None, offset: int = 0):
    """Per-game error arrays ``{variant: (games, types, T)}``."""
    if config.runs_per_game < 1:
        raise ValueError("runs_per_game must be positive")
    types = list(range(params.n_types)) if types is None else list(types)
    per_game = _map(lambda gi: _filter_game_errors(gi[1], offset + gi[0], params, tables,
                                                    config, types),
                    list(enumerate(test_games)))
    return {v: np.stack([g[v] for g in per_game]) for v in per_game[0]}


def _curves(errors: dict, names: Sequence[str], types: Sequence[int]):
    curves = {}
    for v, arr in errors.items():
        for j, i in enumerate(types):
            curves[(names[i], v)] = ErrorCurve.from_samples(arr[:, j, :])
    return curves


def run_filtering_experiment(test_games: Sequence[GameTrace], params: ModelParams,
                             tables: BaselineTables | None, config: ExperimentConfig,
                             types: Sequence[int] | None = None) -> dict:
    """Filtering error curves per ``(type name, variant)`` on one test set.

    Variants are ``model`` (all evidence), ``model_no_obs`` (O and E
    suppressed, kills kept unless ``config.suppress_kills``) and ``baseline``
    when tables are supplied.
    """
    if not test_games:
        raise ValueError("no test games")
    types = list(range(params.n_types)) if types is None else list(types)
    errors = filtering_errors(test_games, params, tables, config, types)
    return _curves(errors, params.catalog.names, types)


def cross_validate_filtering(dataset: Sequence[GameTrace], catalog: UnitTypeCatalog,
                             em_config: EMConfig, config: ExperimentConfig, u_max: int,
                             types: Sequence[int] | None = None) -> dict:
    """Train model and baseline per fold, then pool per-game errors across folds."""
    types = list(range(catalog.n_types)) if types is None else list(types)
    pooled: dict[str, list] = {}
    offset = 0
    for k, (train, test) in enumerate(kfold_split(dataset, config.folds, config.seed)):
        params, _ = fit_model(train, catalog, em_config, u_max,
                              rng=np.random.default_rng([em_config.seed, k]))
        tables = fit_baseline(train)
        errs = filtering_errors(test, params, tables, config, types, offset=offset)
        offset += len(test)
        for v, arr in errs.items():
            pooled.setdefault(v, []).append(arr)
    errors = {v: np.concatenate(a) for v, a in pooled.items()}
    return _curves(errors, catalog.names, types)


# ---------------------------------------------------------------------------
# Evidence-horizon experiment
# ---------------------------------------------------------------------------


@dataclass
class HorizonResult:
    """Error at the final epoch given evidence through each horizon ``0..T``."""

    type_name: str
    horizons: np.ndarray
    curve: ErrorCurve
    per_game: np.ndarray
    n_games: int

    def trend(self):
        """Spearman correlation of mean error against horizon, and its p-value."""
        res = stats.spearmanr(self.horizons, self.curve.mean)
        return float(res.statistic), float(res.pvalue)


def _horizon_game(game: GameTrace, game_index: int, params: ModelParams, config: ExperimentConfig,
                  target: int) -> np.ndarray:
    T = game.T
    tech = params.catalog.tech_flags[target]
    evidence = game.without_truth()
    acc = np.zeros(T + 1)
    for r in range(config.runs_per_game):
        rng = _run_rng(config.seed, game_index, r, target)
        res = rbpf_filter(evidence, params, config.R, rng, keep_snapshots=True)
        for h, snap in enumerate(res.snapshots):
            pred = predict_forward(snap, params, T, rng)
            acc[h] += type_error(pred.marginals[-1, target], 0, tech)
    return acc / config.runs_per_game


def absent_games(dataset: Sequence[GameTrace], target: int) -> list[GameTrace]:
    return [g for g in dataset if not np.any(g.array("U")[:, target] > 0)]


def run_horizon_experiment(test_games: Sequence[GameTrace], params: ModelParams,
                           config: ExperimentConfig, target_types: Sequence[int]) -> dict:
    """Final-epoch error against evidence horizon on games where the target never appears."""
    if config.runs_per_game < 1:
        raise ValueError("runs_per_game must be positive")
    out = {}
    for target in target_types:
        games = absent_games(test_games, target)
        if not games:
            raise ValueError(f"no test games without {params.catalog.names[target]!r}")
        T = min(g.T for g in games)
        games = [g.truncated(T) for g in games]
        per_game = np.stack(_map(lambda gi: _horizon_game(gi[1], gi[0], params, config, target),
                                 list(enumerate(games))))
        name = params.catalog.names[target]
        out[name] = HorizonResult(name, np.arange(T + 1), ErrorCurve.from_samples(per_game),
                                  per_game, len(games))
    return out


# ---------------------------------------------------------------------------
# Case study
# ---------------------------------------------------------------------------


@dataclass
class CaseStudyCurve:
    """Existence probability per type for epochs ``checkpoint..T``, averaged over runs."""

    checkpoint: int
    epochs: np.ndarray
    mean: np.ndarray          # (epochs, N)
    half_width: np.ndarray    # (epochs, N)
    runs: int


def run_case_study(trace: GameTrace, params: ModelParams, checkpoints: Sequence[int],
                   config: ExperimentConfig, T: int | None = None) -> list[CaseStudyCurve]:
    """Filter to each checkpoint and predict presence of every type for all later epochs."""
    if config.runs_per_game < 1:
        raise ValueError("need at least one run")
    T = trace.T if T is None else T
    evidence = trace.without_truth()
    curves = []
    for h in checkpoints:
        if not 0 <= h <= trace.T or h > T:
            raise ValueError(f"checkpoint {h} outside the trace")
        runs = []
        for r in range(config.runs_per_game):
            rng = _run_rng(config.seed, h, r)
            res = rbpf_filter(evidence, params, config.R, rng, horizon=h)
            runs.append(predict_forward(res.particles, params, T, rng).existence)
        runs = np.array(runs)
        curve = ErrorCurve.from_samples(runs.reshape(len(runs), -1))
        shape = runs.shape[1:]
        curves.append(CaseStudyCurve(h, np.arange(h, T + 1), curve.mean.reshape(shape),
                                     curve.half_width.reshape(shape), len(runs)))
    return curves


# ---------------------------------------------------------------------------
# Tidy export
# ---------------------------------------------------------------------------

CSV_FIELDS = ("experiment", "type", "epoch", "horizon", "variant", "mean", "ci", "n")


def filtering_rows(curves: dict, experiment: str = "filtering") -> list[dict]:
    rows = []
    for (name, variant), c in curves.items():
        for t, (m, hw) in enumerate(zip(c.mean, c.half_width), start=1):
            rows.append({"experiment": experiment, "type": name, "epoch": t, "horizon": "",
                         "variant": variant, "mean": float(m), "ci": float(hw), "n": c.n})
    return rows


def horizon_rows(results: dict, experiment: str = "horizon") -> list[dict]:
    rows = []
    for name, res in results.items():
        T = int(res.horizons[-1])
        for h, m, hw in zip(res.horizons, res.curve.mean, res.curve.half_width):
            rows.append({"experiment": experiment, "type": name, "epoch": T, "horizon": int(h),
                         "variant": "model", "mean": float(m), "ci": float(hw), "n": res.n_games})
    return rows


def case_study_rows(curves: Sequence[CaseStudyCurve], names: Sequence[str]) -> list[dict]:
    rows = []
    for c in curves:
        for k, t in enumerate(c.epochs):
            for i, name in enumerate(names):
                rows.append({"experiment": "case_study", "type": name, "epoch": int(t),
                             "horizon": c.checkpoint, "variant": "existence",
                             "mean": float(c.mean[k, i]), "ci": float(c.half_width[k, i]),
                             "n": c.runs})
    return rows


# ---------------------------------------------------------------------------
# Model selection over the number of strategy states
# ---------------------------------------------------------------------------


@dataclass
class SelectionResult:
    m_values: tuple[int, ...]
    fold_logliks: np.ndarray          # (len(m_values), folds)
    mean: np.ndarray = field(init=False)
    half_width: np.ndarray = field(init=False)

    def __post_init__(self):
        k = self.fold_logliks.shape[1]
        self.mean = self.fold_logliks.mean(axis=1)
        finite = np.all(np.isfinite(self.fold_logliks), axis=1)
        sd = np.zeros(len(self.m_values))
        if k > 1:
            sd[finite] = self.fold_logliks[finite].std(axis=1, ddof=1)
        # an M that cannot explain some held-out game has no meaningful spread
        sd[~finite] = np.inf
        self.half_width = Z95 * sd / np.sqrt(k)

    @property
    def best(self) -> int:
        return self.m_values[int(np.argmax(self.mean))]


def select_m(dataset: Sequence[GameTrace], m_values: Sequence[int], folds: int,
             em_config: EMConfig, seed: int = 0) -> SelectionResult:
    """Cross-validated average held-out production log-likelihood for each M."""
    splits = kfold_split(dataset, folds, seed)
    ll = np.zeros((len(m_values), folds))
    for a, m in enumerate(m_values):
        cfg = replace(em_config, M=int(m))
        for k, (train, test) in enumerate(splits):
            strategy, _ = em_fit(train, cfg, np.random.default_rng([cfg.seed, m, k]))
            ll[a, k] = heldout_loglik(test, strategy)
    return SelectionResult(tuple(int(m) for m in m_values), ll)
