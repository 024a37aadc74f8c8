"""Uplift ranking metrics: normalized Qini/uplift-curve areas and LIFT@h.

Records are ranked by descending uplift score with ties broken by original
position. Curve points are evaluated at every prefix size ``n = 0..N``:

    Qini    Q(n) = Y_T(n) - Y_C(n) * N_T(n) / N_C(n)       (second term 0 if N_C(n) = 0)
    uplift  U(n) = (Y_T(n) / N_T(n) - Y_C(n) / N_C(n)) * n  (an empty arm has mean 0)

The area under each curve (trapezoid rule) minus the area under the chord
from the origin to the curve's end point is divided by ``N**2``, i.e. the
curve is integrated over the targeted population fraction with per-capita
heights. Values are therefore in outcome units and comparable across sample
sizes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import EmptyDatasetError, MissingArmError, NumericError


@dataclass(frozen=True)
class ScoredEvalSet:
    score: np.ndarray
    treated: np.ndarray
    outcome: np.ndarray

    def __post_init__(self):
        score = np.asarray(self.score, dtype=np.float64).reshape(-1)
        treated = np.asarray(self.treated).astype(bool).reshape(-1)
        outcome = np.asarray(self.outcome, dtype=np.float64).reshape(-1)
        if score.size == 0:
            raise EmptyDatasetError("evaluation set is empty")
        if not (score.size == treated.size == outcome.size):
            raise ValueError("score, treated and outcome must have equal length")
        if not (np.all(np.isfinite(score)) and np.all(np.isfinite(outcome))):
            raise NumericError("evaluation set contains non-finite values")
        object.__setattr__(self, "score", score)
        object.__setattr__(self, "treated", treated)
        object.__setattr__(self, "outcome", outcome)

    def __len__(self) -> int:
        return self.score.size

    def require_both_arms(self, label: str = "evaluation set") -> None:
        if not self.treated.any() or self.treated.all():
            arm = "treated" if not self.treated.any() else "control"
            raise MissingArmError(f"{label} has no {arm} records")


@dataclass(frozen=True)
class UpliftReport:
    qini: float
    auuc: float
    lift_at_h: float
    h: float = 30.0

    def as_dict(self) -> dict[str, float]:
        return {"qini": self.qini, "auuc": self.auuc, f"lift@{self.h:g}": self.lift_at_h}


def ranking(score: np.ndarray) -> np.ndarray:
    """Descending by score; equal scores keep their original order."""
    return np.argsort(-score, kind="stable")


def _prefix_sums(es: ScoredEvalSet):
    order = ranking(es.score)
    w = es.treated[order]
    y = es.outcome[order]
    zero = np.zeros(1)
    n_t = np.concatenate([zero, np.cumsum(w)])
    n_c = np.concatenate([zero, np.cumsum(~w)])
    y_t = np.concatenate([zero, np.cumsum(np.where(w, y, 0.0))])
    y_c = np.concatenate([zero, np.cumsum(np.where(w, 0.0, y))])
    return n_t, n_c, y_t, y_c


def qini_curve(es: ScoredEvalSet) -> np.ndarray:
    n_t, n_c, y_t, y_c = _prefix_sums(es)
    scaled = np.divide(y_c * n_t, n_c, out=np.zeros_like(y_c), where=n_c > 0)
    return y_t - scaled


def uplift_curve(es: ScoredEvalSet) -> np.ndarray:
    n_t, n_c, y_t, y_c = _prefix_sums(es)
    mean_t = np.divide(y_t, n_t, out=np.zeros_like(y_t), where=n_t > 0)
    mean_c = np.divide(y_c, n_c, out=np.zeros_like(y_c), where=n_c > 0)
    return (mean_t - mean_c) * np.arange(n_t.size)


def normalized_area(curve: np.ndarray) -> float:
    n = curve.size - 1
    area = float(np.sum(curve[:-1] + curve[1:]) / 2.0)
    chord = n * curve[-1] / 2.0
    return float((area - chord) / (n * n))


def qini_auc(es: ScoredEvalSet) -> float:
    es.require_both_arms()
    return normalized_area(qini_curve(es))


def uplift_auc(es: ScoredEvalSet) -> float:
    es.require_both_arms()
    return normalized_area(uplift_curve(es))


def top_count(n: int, h: float) -> int:
    # round away float noise so that e.g. 30% of 10 is exactly 3
    return max(1, math.ceil(round(h * n, 9) / 100.0))


def lift_at_h(es: ScoredEvalSet, h: float = 30.0) -> float:
    if not 0 < h <= 100:
        raise ValueError(f"h must be a percentage in (0, 100], got {h}")
    top = ranking(es.score)[:top_count(len(es), h)]
    w, y = es.treated[top], es.outcome[top]
    if not w.any() or w.all():
        arm = "treated" if not w.any() else "control"
        raise MissingArmError(f"top {h:g}% prefix has no {arm} records")
    return float(y[w].mean() - y[~w].mean())


def auuc_avg(per_treatment: Sequence[ScoredEvalSet]) -> float:
    if not per_treatment:
        raise EmptyDatasetError("no per-treatment evaluation sets")
    values = []
    for k, es in enumerate(per_treatment, start=1):
        es.require_both_arms(f"treatment {k} evaluation set")
        values.append(uplift_auc(es))
    return float(np.mean(values))


def uplift_report(es: ScoredEvalSet, h: float = 30.0) -> UpliftReport:
    return UpliftReport(qini_auc(es), uplift_auc(es), lift_at_h(es, h), h)


def per_treatment_sets(scores: np.ndarray, arm: np.ndarray, outcome: np.ndarray) -> list[ScoredEvalSet]:
    """Split a multi-arm population into treatment-k-vs-control sets scored by ``y^k - y^0``."""
    scores = np.atleast_2d(scores)
    arm = np.asarray(arm).astype(np.int64)
    sets = []
    for k in range(1, scores.shape[1]):
        rows = np.flatnonzero((arm == 0) | (arm == k))
        if not np.any(arm[rows] == k) or not np.any(arm[rows] == 0):
            raise MissingArmError(f"treatment {k}: evaluation population lacks treated or control records")
        sets.append(ScoredEvalSet(scores[rows, k] - scores[rows, 0], arm[rows] == k, outcome[rows]))
    return sets


def write_report(values: dict[str, float], path: str | Path) -> None:
    lines = [f"{key}={float(value)!r}" for key, value in values.items()]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_report(path: str | Path) -> dict[str, float]:
    out = {}
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if line.strip():
            key, _, value = line.partition("=")
            out[key] = float(value)
    return out


def write_curves(es: ScoredEvalSet, path: str | Path) -> None:
    q, u = qini_curve(es), uplift_curve(es)
    n = len(es)
    rows = ["n,fraction,qini,uplift"]
    rows += [f"{i},{i / n!r},{q[i]!r},{u[i]!r}" for i in range(n + 1)]
    Path(path).write_text("\n".join(rows) + "\n", encoding="utf-8")
