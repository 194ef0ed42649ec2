"""Two-average baseline predictor.

For each type and epoch it keeps the mean count over all training games and
over the games in which the type ever appeared. Once a type has been scouted
the second table is used, otherwise the first.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .generative import GameTrace


@dataclass(frozen=True, eq=False)
class BaselineTables:
    """Arrays are ``(N, T)``: type by epoch (epoch ``t`` in column ``t-1``).

    ``present_fallback[i]`` marks types never present in training, whose
    present-conditional rows are copies of the all-games rows.
    """

    avg_all: np.ndarray
    avg_present: np.ndarray
    presence_count: np.ndarray
    exist_all: np.ndarray
    exist_present: np.ndarray
    present_fallback: np.ndarray

    @property
    def T(self) -> int:
        return self.avg_all.shape[1]


def fit_baseline(dataset: Sequence[GameTrace]) -> BaselineTables:
    if not dataset:
        raise ValueError("cannot fit the baseline on an empty dataset")
    T = min(g.T for g in dataset)
    U = np.stack([g.array("U")[:T] for g in dataset]).astype(float)   # (G, T, N)
    present = (U > 0).any(axis=1)                                      # (G, N)
    count = present.sum(axis=0)
    avg_all = U.mean(axis=0).T
    exist_all = (U > 0).mean(axis=0).T
    with np.errstate(invalid="ignore"):
        sums = np.einsum("gtn,gn->nt", U, present)
        hits = np.einsum("gtn,gn->nt", (U > 0).astype(float), present)
        avg_present = sums / count[:, None]
        exist_present = hits / count[:, None]
    fallback = count == 0
    avg_present[fallback] = avg_all[fallback]
    exist_present[fallback] = exist_all[fallback]
    return BaselineTables(avg_all, avg_present, count, exist_all, exist_present, fallback)


def _row(tables: BaselineTables, t: int) -> int:
    if not 1 <= t <= tables.T:
        raise IndexError(f"epoch {t} outside baseline table range 1..{tables.T}")
    return t - 1


def baseline_predict(tables: BaselineTables, seen, t: int) -> np.ndarray:
    """Predicted counts at epoch ``t`` given which types have been scouted by ``t``."""
    col = _row(tables, t)
    seen = np.asarray(seen, dtype=bool)
    return np.where(seen, tables.avg_present[:, col], tables.avg_all[:, col])


def baseline_existence(tables: BaselineTables, seen, t: int) -> np.ndarray:
    """Presence probability at ``t``: fraction of the relevant games with a nonzero count."""
    col = _row(tables, t)
    seen = np.asarray(seen, dtype=bool)
    return np.where(seen, tables.exist_present[:, col], tables.exist_all[:, col])


def seen_so_far(trace: GameTrace) -> np.ndarray:
    """``(T, N)`` boolean: has at least one unit of the type been observed by epoch t."""
    return np.cumsum(trace.array("O") > 0, axis=0) > 0


def tables_to_rows(tables: BaselineTables, names: Sequence[str]) -> list[dict]:
    rows = []
    for i, name in enumerate(names):
        for t in range(1, tables.T + 1):
            rows.append({
                "type": name,
                "epoch": t,
                "avg_all": float(tables.avg_all[i, t - 1]),
                "avg_present": float(tables.avg_present[i, t - 1]),
                "presence_count": int(tables.presence_count[i]),
                "present_fallback": bool(tables.present_fallback[i]),
            })
    return rows
