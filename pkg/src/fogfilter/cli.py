"""Command-line entry point.

Every subcommand takes an optional ``--config`` JSON file whose keys mirror
the long flag names (dashes replaced by underscores). Flags override the
file. The merged settings are written next to the main output as
``<output>.config.json`` so each run can be reproduced from that file alone.

Exit codes: 0 success, 1 data or runtime error, 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .baseline import fit_baseline, tables_to_rows
from .evaluation import (
    CSV_FIELDS,
    ExperimentConfig,
    case_study_rows,
    cross_validate_filtering,
    filtering_rows,
    horizon_rows,
    kfold_split,
    run_case_study,
    run_filtering_experiment,
    run_horizon_experiment,
    select_m,
)
from .generative import GenConfig, demo_params, generate_dataset
from .inference import FilterError, rbpf_filter
from .io import (
    TraceFormatError,
    load_params,
    parse_trace_file,
    save_params,
    write_csv,
    write_json,
    write_trace_file,
)
from .model import DEFAULT_U_MAX, ModelError, UnitTypeCatalog
from .training import EMConfig, TrainingError, fit_model

log = logging.getLogger("fogfilter")


class UsageError(Exception):
    pass


# name: (type, default, help). Paths are strings; "in:" / "out:" prefixes in
# the help mark which ones are validated as inputs or outputs.
_COMMON = {
    "seed": (int, 0, "random seed"),
}

COMMANDS: dict[str, dict[str, tuple]] = {
    "gen": {
        "params": (str, None, "in: model parameter JSON (default: built-in demo model)"),
        "out": (str, None, "out: trace JSONL to write"),
        "params_out": (str, None, "out: also write the generating model parameters JSON"),
        "count": (int, 100, "number of games"),
        "T": (int, 13, "epochs per game"),
        "kill_rate": (float, 0.01, "per-unit per-epoch kill probability"),
        "kill_start": (int, 6, "first epoch with kills"),
        "effort": (str, "peaked", "effort profile: none, peaked, flat(x)"),
        "u_max": (int, DEFAULT_U_MAX, "count cap for the demo model"),
    },
    "train": {
        "data": (str, None, "in: training trace JSONL"),
        "out": (str, None, "out: fitted model parameter JSON"),
        "report": (str, None, "out: fit report JSON (default: <out>.report.json)"),
        "catalog": (str, None, "in: JSON with a catalog (or a parameter file to borrow it from)"),
        "M": (int, 30, "number of strategy states"),
        "max_iters": (int, 200, "EM iteration cap"),
        "tol": (float, 1e-6, "relative log-likelihood tolerance"),
        "restarts": (int, 5, "EM restarts"),
        "u_max": (int, DEFAULT_U_MAX, "count cap"),
        "heldout": (str, None, "in: optional held-out trace JSONL"),
    },
    "filter": {
        "params": (str, None, "in: model parameter JSON"),
        "data": (str, None, "in: evidence trace JSONL"),
        "out": (str, None, "out: .csv or .json filter output"),
        "R": (int, 1000, "particles"),
        "full_marginals": (bool, False, "include full count marginals"),
        "no_obs": (bool, False, "ignore observations and effort"),
        "no_kills": (bool, False, "ignore kills"),
        "resample": (bool, False, "enable systematic resampling (off in the reference method)"),
    },
    "baseline": {
        "data": (str, None, "in: trace JSONL with true counts"),
        "out": (str, None, "out: baseline tables CSV"),
        "catalog": (str, None, "in: JSON with a catalog for type names"),
    },
    "eval": {
        "data": (str, None, "in: trace JSONL with true counts"),
        "out": (str, None, "out: tidy metrics CSV"),
        "params": (str, None, "in: fixed model parameters (skips per-fold training)"),
        "train_data": (str, None, "in: baseline training traces when --params is given"),
        "catalog": (str, None, "in: catalog JSON for per-fold training"),
        "experiment": (str, "filtering", "filtering, horizon or all"),
        "targets": (str, "", "comma-separated type names for the horizon experiment"),
        "folds": (int, 5, "cross-validation folds"),
        "M": (int, 30, "strategy states for per-fold training"),
        "max_iters": (int, 200, "EM iteration cap"),
        "restarts": (int, 5, "EM restarts"),
        "u_max": (int, DEFAULT_U_MAX, "count cap"),
        "R": (int, 1000, "particles"),
        "runs": (int, 30, "filter runs per game"),
        "suppress_kills": (bool, False, "no-observation variant also drops kills"),
    },
    "predict": {
        "params": (str, None, "in: model parameter JSON"),
        "data": (str, None, "in: evidence trace JSONL"),
        "out": (str, None, "out: existence-probability CSV"),
        "game": (str, None, "game id (default: first game)"),
        "checkpoints": (str, "6,10", "comma-separated evidence horizons"),
        "until": (int, None, "last epoch to predict (default: trace length)"),
        "R": (int, 1000, "particles"),
        "runs": (int, 30, "independent filter runs"),
    },
    "select-m": {
        "data": (str, None, "in: training trace JSONL"),
        "out": (str, None, "out: held-out log-likelihood CSV"),
        "m": (str, "20,25,30,35,40", "comma-separated M values"),
        "folds": (int, 5, "cross-validation folds"),
        "max_iters": (int, 200, "EM iteration cap"),
        "tol": (float, 1e-6, "relative log-likelihood tolerance"),
        "restarts": (int, 5, "EM restarts"),
    },
}

_REQUIRED = {
    "gen": ("out",),
    "train": ("data", "out"),
    "filter": ("params", "data", "out"),
    "baseline": ("data", "out"),
    "eval": ("data", "out"),
    "predict": ("params", "data", "out"),
    "select-m": ("data", "out"),
}


def _options(cmd: str) -> dict[str, tuple]:
    return {**COMMANDS[cmd], **_COMMON}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fogfilter", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")
    for cmd in COMMANDS:
        p = sub.add_parser(cmd)
        p.add_argument("--config", help="JSON file of settings for this command")
        for key, (typ, default, help_) in _options(cmd).items():
            flag = "--" + key.replace("_", "-")
            if typ is bool:
                p.add_argument(flag, dest=key, action="store_const", const=True, default=None,
                               help=help_)
            else:
                p.add_argument(flag, dest=key, type=typ, default=None,
                               help=f"{help_} (default: {default})")
    return parser


def resolve_settings(cmd: str, args: argparse.Namespace) -> dict:
    """Merge defaults, the config file and explicit flags (in that order)."""
    opts = _options(cmd)
    settings = {k: v[1] for k, v in opts.items()}
    if args.config:
        path = Path(args.config)
        if not path.is_file():
            raise UsageError(f"config file not found: {path}")
        try:
            cfg = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise UsageError(f"config file is not valid JSON: {exc}") from None
        if not isinstance(cfg, dict):
            raise UsageError("config file must hold a JSON object")
        cfg.pop("command", None)
        unknown = sorted(set(cfg) - set(opts))
        if unknown:
            raise UsageError(f"unknown config keys for {cmd!r}: {', '.join(unknown)}")
        for k, v in cfg.items():
            typ = opts[k][0]
            settings[k] = None if v is None else (bool(v) if typ is bool else typ(v))
    for k in opts:
        v = getattr(args, k, None)
        if v is not None:
            settings[k] = v
    missing = [k for k in _REQUIRED[cmd] if not settings.get(k)]
    if missing:
        raise UsageError(f"{cmd}: missing required setting(s): {', '.join('--' + m.replace('_', '-') for m in missing)}")
    _validate_paths(cmd, settings)
    return settings


def _validate_paths(cmd: str, settings: dict) -> None:
    for key, (typ, _, help_) in _options(cmd).items():
        value = settings.get(key)
        if not value or typ is not str:
            continue
        if help_.startswith("in:") and not Path(value).is_file():
            raise UsageError(f"--{key.replace('_', '-')}: file not found: {value}")
        if help_.startswith("out:") and not Path(value).resolve().parent.is_dir():
            raise UsageError(f"--{key.replace('_', '-')}: directory does not exist: {value}")


def _int_list(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise UsageError(f"expected comma-separated integers, got {text!r}") from None


def _load_catalog(path: str | None, n_types: int) -> UnitTypeCatalog:
    if path is None:
        return UnitTypeCatalog(tuple(f"type{i}" for i in range(n_types)),
                               (False,) * n_types, (0,) * n_types)
    d = json.loads(Path(path).read_text())
    d = d.get("catalog", d)
    cat = UnitTypeCatalog(d["names"], d.get("tech_flags", [False] * len(d["names"])),
                          d.get("initial_counts", [0] * len(d["names"])))
    if cat.n_types != n_types:
        raise ModelError(f"catalog has {cat.n_types} types but the data has {n_types}")
    return cat


def _n_types(games) -> int:
    if not games:
        raise ModelError("no games in the input file")
    return games[0].n_types if hasattr(games[0], "n_types") else games[0].epochs[0].n_types


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def cmd_gen(s: dict) -> list[str]:
    params = load_params(s["params"]) if s["params"] else demo_params(s["u_max"])
    cfg = GenConfig(T=s["T"], kill_rate=s["kill_rate"], kill_start=s["kill_start"],
                    effort_profile=s["effort"], seed=s["seed"])
    games = generate_dataset(params, cfg, s["count"])
    write_trace_file(s["out"], games)
    if s["params_out"]:
        save_params(s["params_out"], params)
        return [s["out"], s["params_out"]]
    return [s["out"]]


def cmd_train(s: dict) -> list[str]:
    games = parse_trace_file(s["data"])
    catalog = _load_catalog(s["catalog"], _n_types(games))
    em = EMConfig(M=s["M"], max_iters=s["max_iters"], loglik_tol=s["tol"],
                  restarts=s["restarts"], seed=s["seed"])
    heldout = parse_trace_file(s["heldout"]) if s["heldout"] else None
    params, report = fit_model(games, catalog, em, s["u_max"], heldout=heldout,
                               rng=np.random.default_rng(s["seed"]))
    save_params(s["out"], params)
    report_path = s["report"] or s["out"] + ".report.json"
    write_json(report_path, report.to_dict())
    return [s["out"], report_path]


def cmd_filter(s: dict) -> list[str]:
    params = load_params(s["params"])
    games = parse_trace_file(s["data"])
    names = params.catalog.names
    records = []
    rows = []
    for g, game in enumerate(games):
        res = rbpf_filter(game.without_truth(), params, s["R"], np.random.default_rng([s["seed"], g]),
                          use_observations=not s["no_obs"], use_kills=not s["no_kills"],
                          resample=s["resample"])
        means = res.mean_counts()
        for t in range(res.T):
            for i, name in enumerate(names):
                row = {"game": game.id, "epoch": t + 1, "type": name,
                       "mean": float(means[t, i]), "existence": float(res.existence[t, i]),
                       "ess": float(res.ess[t]), "loglik": float(res.loglik[t])}
                if s["full_marginals"]:
                    row["marginal"] = " ".join(repr(float(x)) for x in res.marginals[t, i])
                rows.append(row)
        rec = {"id": game.id, "loglik": res.loglik.tolist(), "ess": res.ess.tolist(),
               "mean": means.tolist(), "existence": res.existence.tolist()}
        if s["full_marginals"]:
            rec["marginals"] = res.marginals.tolist()
        records.append(rec)
    if s["out"].endswith(".json"):
        write_json(s["out"], {"types": list(names), "games": records})
    else:
        fields = ["game", "epoch", "type", "mean", "existence", "ess", "loglik"]
        if s["full_marginals"]:
            fields.append("marginal")
        write_csv(s["out"], rows, fields)
    return [s["out"]]


def cmd_baseline(s: dict) -> list[str]:
    games = parse_trace_file(s["data"])
    catalog = _load_catalog(s["catalog"], _n_types(games))
    tables = fit_baseline(games)
    write_csv(s["out"], tables_to_rows(tables, catalog.names))
    return [s["out"]]


def cmd_eval(s: dict) -> list[str]:
    games = parse_trace_file(s["data"])
    config = ExperimentConfig(folds=s["folds"], R=s["R"], runs_per_game=s["runs"],
                              seed=s["seed"], suppress_kills=s["suppress_kills"])
    which = s["experiment"]
    if which not in ("filtering", "horizon", "all"):
        raise UsageError(f"unknown experiment {which!r}")
    rows = []
    if s["params"]:
        params = load_params(s["params"])
        catalog = params.catalog
        train = parse_trace_file(s["train_data"]) if s["train_data"] else None
        tables = fit_baseline(train) if train else None
        if which in ("filtering", "all"):
            rows += filtering_rows(run_filtering_experiment(games, params, tables, config))
    else:
        catalog = _load_catalog(s["catalog"], _n_types(games))
        em = EMConfig(M=s["M"], max_iters=s["max_iters"], restarts=s["restarts"], seed=s["seed"])
        if which in ("filtering", "all"):
            rows += filtering_rows(cross_validate_filtering(games, catalog, em, config, s["u_max"]))
        params = None
    if which in ("horizon", "all"):
        names = [x.strip() for x in s["targets"].split(",") if x.strip()]
        if not names:
            raise UsageError("the horizon experiment needs --targets")
        targets = [catalog.index(n) for n in names]
        if params is not None:
            rows += horizon_rows(run_horizon_experiment(games, params, config, targets))
        else:
            for k, (train, test) in enumerate(kfold_split(games, config.folds, config.seed)):
                fold_params, _ = fit_model(train, catalog, em, s["u_max"],
                                           rng=np.random.default_rng([s["seed"], k]))
                qualifying = [t for t in targets
                              if any(not np.any(g.array("U")[:, t] > 0) for g in test)]
                if qualifying:
                    rows += horizon_rows(run_horizon_experiment(test, fold_params, config, qualifying),
                                         experiment=f"horizon_fold{k}")
    write_csv(s["out"], rows, CSV_FIELDS)
    return [s["out"]]


def cmd_predict(s: dict) -> list[str]:
    params = load_params(s["params"])
    games = parse_trace_file(s["data"])
    if not games:
        raise ModelError("no games in the input file")
    if s["game"] is None:
        game = games[0]
    else:
        match = [g for g in games if g.id == s["game"]]
        if not match:
            raise ModelError(f"no game with id {s['game']!r}")
        game = match[0]
    config = ExperimentConfig(R=s["R"], runs_per_game=s["runs"], seed=s["seed"])
    curves = run_case_study(game, params, _int_list(s["checkpoints"]), config, T=s["until"])
    write_csv(s["out"], case_study_rows(curves, params.catalog.names), CSV_FIELDS)
    return [s["out"]]


def cmd_select_m(s: dict) -> list[str]:
    games = parse_trace_file(s["data"])
    em = EMConfig(M=1, max_iters=s["max_iters"], loglik_tol=s["tol"], restarts=s["restarts"],
                  seed=s["seed"])
    res = select_m(games, _int_list(s["m"]), s["folds"], em, seed=s["seed"])
    rows = [{"M": m, "mean_heldout_loglik": float(mu), "ci": float(hw), "folds": s["folds"],
             "selected": m == res.best}
            for m, mu, hw in zip(res.m_values, res.mean, res.half_width)]
    write_csv(s["out"], rows)
    return [s["out"]]


HANDLERS = {
    "gen": cmd_gen,
    "train": cmd_train,
    "filter": cmd_filter,
    "baseline": cmd_baseline,
    "eval": cmd_eval,
    "predict": cmd_predict,
    "select-m": cmd_select_m,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    argv = sys.argv[1:] if argv is None else list(argv)
    if not argv:
        parser.print_usage(sys.stderr)
        return 2
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if args.command is None:
        parser.print_usage(sys.stderr)
        return 2
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        settings = resolve_settings(args.command, args)
    except UsageError as exc:
        print(f"fogfilter {args.command}: {exc}", file=sys.stderr)
        return 2
    try:
        outputs = HANDLERS[args.command](settings)
    except UsageError as exc:
        print(f"fogfilter {args.command}: {exc}", file=sys.stderr)
        return 2
    except (ModelError, TrainingError, FilterError, TraceFormatError, ValueError, KeyError,
            OSError) as exc:
        print(f"fogfilter {args.command}: error: {exc}", file=sys.stderr)
        return 1
    effective = {"command": args.command, **settings}
    write_json(outputs[0] + ".config.json", effective)
    return 0


if __name__ == "__main__":
    sys.exit(main())
