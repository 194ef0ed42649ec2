"""Readers and writers for the on-disk formats.

* traces: JSON Lines, one game per line,
  ``{"schema_version", "id", "epochs": [{"t", "P", "K", "O", "E", "U"?, "L"?}]}``
* model parameters: one JSON document (see :meth:`ModelParams.to_dict`)
* metrics and tables: CSV with a header row
"""

from __future__ import annotations

import csv
import json
from pathlib import Path
from typing import Iterable, Sequence

from .generative import EpochRecord, GameTrace
from .model import SCHEMA_VERSION, ModelError, ModelParams, check_schema_version


class TraceFormatError(ValueError):
    def __init__(self, path, line: int, message: str):
        self.path = str(path)
        self.line = line
        super().__init__(f"{path}:{line}: {message}")


_REQUIRED = ("t", "K", "O", "E")


def trace_from_dict(d: dict) -> GameTrace:
    if not isinstance(d, dict):
        raise ModelError("each line must be a JSON object")
    check_schema_version(d.get("schema_version", SCHEMA_VERSION))
    if "id" not in d or "epochs" not in d:
        raise ModelError("game needs 'id' and 'epochs'")
    epochs = []
    for e in d["epochs"]:
        missing = [k for k in _REQUIRED if k not in e]
        if missing:
            raise ModelError(f"epoch {e.get('t', '?')} is missing {', '.join(missing)}")
        epochs.append(EpochRecord(t=e["t"], P=e.get("P"), K=e["K"], O=e["O"], E=e["E"],
                                  U=e.get("U"), L=e.get("L")))
    return GameTrace(str(d["id"]), epochs)


def trace_to_dict(trace: GameTrace) -> dict:
    return {"schema_version": SCHEMA_VERSION, **trace.to_dict()}


def parse_trace_file(path) -> list[GameTrace]:
    """Read and validate a JSONL trace file; errors name the offending line."""
    path = Path(path)
    games = []
    with path.open() as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                games.append(trace_from_dict(json.loads(line)))
            except json.JSONDecodeError as exc:
                raise TraceFormatError(path, lineno, f"invalid JSON ({exc.msg})") from None
            except (ModelError, KeyError, TypeError, ValueError) as exc:
                raise TraceFormatError(path, lineno, str(exc)) from None
    return games


def write_trace_file(path, traces: Iterable[GameTrace]) -> None:
    with Path(path).open("w") as fh:
        for tr in traces:
            fh.write(json.dumps(trace_to_dict(tr), separators=(",", ":")))
            fh.write("\n")


def load_params(path) -> ModelParams:
    with Path(path).open() as fh:
        return ModelParams.from_dict(json.load(fh))


def save_params(path, params: ModelParams) -> None:
    write_json(path, params.to_dict())


def write_json(path, obj) -> None:
    with Path(path).open("w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def write_csv(path, rows: Sequence[dict], fields: Sequence[str] | None = None) -> None:
    fields = list(fields) if fields is not None else (list(rows[0]) if rows else [])
    with Path(path).open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: _fmt(r.get(k, "")) for k in fields})


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return v
