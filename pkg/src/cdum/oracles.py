"""Slow reference implementations used to cross-check the production paths.

Nothing here shares code with :mod:`cdum.metrics`: the ranking is rebuilt
with ``sorted`` and every prefix statistic is recounted from scratch.
"""

from __future__ import annotations

import math

import numpy as np


def _ranked(score, treated, outcome):
    idx = sorted(range(len(score)), key=lambda i: (-float(score[i]), i))
    return [bool(treated[i]) for i in idx], [float(outcome[i]) for i in idx]


def brute_force_curves(score, treated, outcome) -> tuple[list[float], list[float]]:
    """Qini and uplift curve points for every prefix size ``0..N``."""
    w, y = _ranked(score, treated, outcome)
    qini, upl = [], []
    for n in range(len(w) + 1):
        w_n, y_n = np.array(w[:n], dtype=bool), np.array(y[:n], dtype=float)
        nt, nc = int(w_n.sum()), int((~w_n).sum())
        yt, yc = float(y_n[w_n].sum()), float(y_n[~w_n].sum())
        qini.append(yt - (yc * nt / nc if nc > 0 else 0.0))
        mt = yt / nt if nt > 0 else 0.0
        mc = yc / nc if nc > 0 else 0.0
        upl.append((mt - mc) * n)
    return qini, upl


def brute_force_area(curve: list[float]) -> float:
    n = len(curve) - 1
    area = 0.0
    for i in range(n):
        area += 0.5 * (curve[i] + curve[i + 1])
    chord = 0.0
    for i in range(n):
        # chord height at i and i+1 from (0, 0) to (n, curve[n])
        chord += 0.5 * (curve[n] * i / n + curve[n] * (i + 1) / n)
    return (area - chord) / (n * n)


def brute_force_metrics(score, treated, outcome, h: float = 30.0) -> dict[str, float]:
    qini, upl = brute_force_curves(score, treated, outcome)
    w, y = _ranked(score, treated, outcome)
    k = math.ceil(round(h * len(w) / 100.0, 9))
    top = list(zip(w[:k], y[:k]))
    yt = [v for t, v in top if t]
    yc = [v for t, v in top if not t]
    lift = (sum(yt) / len(yt) - sum(yc) / len(yc)) if yt and yc else float("nan")
    return {"qini": brute_force_area(qini), "auuc": brute_force_area(upl), "lift": lift}


def central_difference(fn, x: np.ndarray, step: float = 1e-6) -> np.ndarray:
    """Gradient of scalar ``fn`` at ``x`` by central differences."""
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat, g = x.reshape(-1), grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        plus = fn(x)
        flat[i] = orig - step
        minus = fn(x)
        flat[i] = orig
        g[i] = (plus - minus) / (2 * step)
    return grad
