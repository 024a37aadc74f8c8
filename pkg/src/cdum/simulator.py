"""Request-level recommendation pipeline simulation and retention metrics.

Per request: retrieve a candidate pool, decide which duration treatments
are enabled, turn the enabled quota deltas into per-category slate quotas,
fill the slate from the pool, and draw long/short plays from the ground
truth in :mod:`cdum.world`. Per day: users return according to that day's
usage.

Every random draw has a fixed shape that does not depend on the policy or
on who is active, so runs with the same seed share their randomness across
policies (common random numbers) and differ only through decisions.
"""

from __future__ import annotations

import csv
import re
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .decision import DecisionConfig, assign_treatments, compose_shares, decision_scores, quota_counts
from .data import OfflineDataset
from .encoding import CATEGORICAL, FeatureSchema, FeatureSpec, PaddedSequence
from .errors import ConfigError, ParseError, SchemaError, UndefinedMetricError
from .fic import LONG, SHORT, RequestBatch, RequestInstance, labels_from_counts
from .world import (DEVICES, Population, SimConfig, draw_mood, fill_slate, long_play_probability,
                    return_probability, sample_categories)

POLICIES = ("cdum", "offline_only", "always_on", "always_off", "random", "assigned")


@dataclass(frozen=True)
class Policy:
    name: str
    arm: int = 0
    p: float = 0.5

    def __post_init__(self):
        if self.name not in POLICIES:
            raise ConfigError(f"unknown policy {self.name!r}")

    @classmethod
    def parse(cls, text: str) -> "Policy":
        """Accepts ``cdum``, ``offline_only``, ``always_off``, ``always_on(k)``/``always_on:k``,
        ``random(p)``/``random:p``."""
        m = re.fullmatch(r"\s*(\w+)\s*(?:[(:]\s*([0-9.eE+-]+)\s*\)?)?\s*", text)
        if not m:
            raise ConfigError(f"cannot parse policy {text!r}")
        name, arg = m.group(1), m.group(2)
        if name == "always_on":
            if arg is None:
                raise ConfigError("always_on needs a treatment index, e.g. always_on(1)")
            return cls(name, arm=int(arg))
        if name == "random":
            return cls(name, p=0.5 if arg is None else float(arg))
        if arg is not None:
            raise ConfigError(f"policy {name!r} takes no argument")
        return cls(name)

    @property
    def uses_models(self) -> bool:
        return self.name in ("cdum", "offline_only")

    def __str__(self) -> str:
        if self.name == "always_on":
            return f"always_on({self.arm})"
        if self.name == "random":
            return f"random({self.p:g})"
        return self.name


@dataclass
class SimLog:
    """Request records (one row per served request) plus per-user daily activity."""

    active: np.ndarray  # (U, D) bool
    user: np.ndarray
    day: np.ndarray
    request: np.ndarray
    enabled: np.ndarray  # (n, K) bool
    exposures: np.ndarray  # (n, K)
    long_plays: np.ndarray  # (n, K)
    usage: np.ndarray  # (n,) seconds
    scores: np.ndarray  # (n, K); NaN for policies without a decision score
    total_usage: np.ndarray  # (U,) seconds
    history: np.ndarray | None = field(default=None, repr=False)
    hour: np.ndarray | None = field(default=None, repr=False)
    device: np.ndarray | None = field(default=None, repr=False)

    @property
    def short_plays(self) -> np.ndarray:
        return self.exposures - self.long_plays

    @property
    def bitmask(self) -> np.ndarray:
        k = self.enabled.shape[1]
        return (self.enabled.astype(np.int64) << np.arange(k)).sum(axis=1)

    def __len__(self) -> int:
        return self.user.size

    def identical(self, other: "SimLog") -> bool:
        pairs = [(self.active, other.active), (self.user, other.user), (self.day, other.day),
                 (self.request, other.request), (self.enabled, other.enabled),
                 (self.exposures, other.exposures), (self.long_plays, other.long_plays),
                 (self.usage, other.usage), (self.total_usage, other.total_usage)]
        if not all(a.shape == b.shape and np.array_equal(a, b) for a, b in pairs):
            return False
        return np.array_equal(self.scores, other.scores, equal_nan=True)

    def export_lines(self) -> list[str]:
        k = self.enabled.shape[1]
        header = (["user", "day", "request", "enabled_mask"] + [f"exposed_{j + 1}" for j in range(k)]
                  + [f"long_{j + 1}" for j in range(k)] + [f"short_{j + 1}" for j in range(k)]
                  + ["usage_seconds"])
        lines = [",".join(header)]
        short = self.short_plays
        mask = self.bitmask
        for i in range(len(self)):
            fields = [str(self.user[i]), str(self.day[i]), str(self.request[i]), str(mask[i])]
            fields += [str(v) for v in self.exposures[i]]
            fields += [str(v) for v in self.long_plays[i]]
            fields += [str(v) for v in short[i]]
            fields.append(repr(float(self.usage[i])))
            lines.append(",".join(fields))
        return lines

    def export(self, path: str | Path) -> None:
        with Path(path).open("w", encoding="utf-8", newline="\n") as fh:
            fh.write("\n".join(self.export_lines()) + "\n")


def _streams(seed: int, day: int, req: int) -> np.random.Generator:
    return np.random.default_rng([seed, day, req])


def simulate(policy: Policy | str, cfg: SimConfig, cpm_model=None, fic_model=None, *,
             population: Population | None = None, user_features: np.ndarray | None = None,
             decision: DecisionConfig = DecisionConfig(), assignment: np.ndarray | None = None,
             requests_per_day: Sequence[int] | None = None, always_active: bool = False,
             keep_features: bool = False) -> SimLog:
    """Run ``policy`` over ``cfg.day_count`` days for the whole population.

    ``cdum`` and ``offline_only`` need ``cpm_model`` (anything with
    ``predict_all``) and per-user ``user_features``; ``cdum`` also needs
    ``fic_model`` (anything with ``predict(batch, low, high)``).
    ``assignment`` gives each user a fixed arm for the ``assigned`` policy.
    """
    if isinstance(policy, str):
        policy = Policy.parse(policy)
    k = cfg.category_count
    pop = population or Population.draw(cfg)
    n_users = len(pop)
    if policy.name == "always_on" and not 1 <= policy.arm <= k:
        raise ConfigError(f"always_on treatment must be in [1, {k}], got {policy.arm}")
    if policy.name == "random" and not 0 <= policy.p <= 1:
        raise ConfigError("random policy probability must lie in [0, 1]")
    if policy.name == "assigned" and (assignment is None or len(assignment) != n_users):
        raise ConfigError("assigned policy needs one arm per user")
    prefs = None
    if policy.uses_models:
        if cpm_model is None or user_features is None:
            raise ConfigError(f"policy {policy} needs a preference model and user features")
        prefs = cpm_model.predict_all(user_features)
        if prefs.shape != (n_users, k + 1):
            raise ConfigError(f"preference scores have shape {prefs.shape}, expected {(n_users, k + 1)}")
        if policy.name == "cdum" and fic_model is None:
            raise ConfigError("policy cdum needs an interest model")
    per_day = list(requests_per_day) if requests_per_day is not None else [cfg.requests_per_day] * cfg.day_count
    n_days = len(per_day)
    base = np.asarray(cfg.base_shares, dtype=float)
    deltas = np.asarray(cfg.quota_deltas, dtype=float)
    long_sec = np.asarray(cfg.long_play_seconds, dtype=float)
    specs = cfg.sequence_specs()
    users = np.arange(n_users)
    pool_base = np.broadcast_to(base, (n_users, k))

    active = np.ones(n_users, dtype=bool)
    active_days = np.zeros((n_users, n_days), dtype=bool)
    total = np.zeros(n_users)
    rec: dict[str, list] = {name: [] for name in ("user", "day", "request", "enabled", "exposures", "long",
                                                   "usage", "scores", "history", "hour")}
    for d in range(n_days):
        if always_active:
            active[:] = True
        active_days[:, d] = active
        mood = draw_mood(pop, cfg, _streams(cfg.seed, d, 1_000_001))
        day_usage = np.zeros(n_users)
        for r in range(per_day[d]):
            rng = _streams(cfg.seed, d, r)
            hist_u = rng.random((n_users, cfg.history_length))
            hour_jitter = rng.integers(0, 3, size=n_users)
            pool_u = rng.random((n_users, cfg.candidate_pool))
            play_u = rng.random((n_users, cfg.candidate_pool))
            policy_u = rng.random((n_users, k))

            history = sample_categories(mood, hist_u) if cfg.history_length else np.zeros((n_users, 0), np.int64)
            hour = (pop.base_hour + 3 * r + hour_jitter) % 24
            scores = np.full((n_users, k), np.nan)
            if policy.name == "cdum":
                batch = RequestBatch([
                    PaddedSequence(history if history.shape[1] else np.zeros((n_users, 1), np.int64),
                                   np.full(n_users, history.shape[1])),
                    PaddedSequence(hour[:, None], np.ones(n_users, np.int64)),
                    PaddedSequence(pop.device[:, None], np.ones(n_users, np.int64)),
                ])
                interests = fic_model.predict(batch, decision.clamp_low, decision.clamp_high)
                scores = decision_scores(prefs, interests)
                enabled = assign_treatments(scores, decision).enabled
            elif policy.name == "offline_only":
                scores = decision_scores(prefs, np.ones((n_users, k)))
                enabled = assign_treatments(scores, decision).enabled
            elif policy.name == "always_on":
                enabled = np.zeros((n_users, k), dtype=bool)
                enabled[:, policy.arm - 1] = True
            elif policy.name == "random":
                enabled = policy_u < policy.p
            elif policy.name == "assigned":
                enabled = np.asarray(assignment)[:, None] == np.arange(1, k + 1)[None, :]
            else:
                enabled = np.zeros((n_users, k), dtype=bool)

            pool_cat = sample_categories(pool_base, pool_u)
            quotas = quota_counts(compose_shares(base, deltas, enabled), cfg.slate_size)
            chosen = fill_slate(pool_cat, quotas, cfg.slate_size)
            onehot = pool_cat[:, :, None] == np.arange(k)[None, None, :]
            exposures = (chosen[:, :, None] & onehot).sum(axis=1)
            p_long = long_play_probability(mood, exposures / cfg.slate_size, cfg)
            p_slot = np.take_along_axis(p_long, pool_cat, axis=1)
            long_slot = chosen & (play_u < p_slot)
            long_counts = (long_slot[:, :, None] & onehot).sum(axis=1)
            secs = np.where(long_slot, long_sec[pool_cat], cfg.short_play_seconds)
            usage = np.where(chosen, secs, 0.0).sum(axis=1)

            served = active
            day_usage += np.where(served, usage, 0.0)
            rec["user"].append(users[served])
            rec["day"].append(np.full(served.sum(), d))
            rec["request"].append(np.full(served.sum(), r))
            rec["enabled"].append(enabled[served])
            rec["exposures"].append(exposures[served])
            rec["long"].append(long_counts[served])
            rec["usage"].append(usage[served])
            rec["scores"].append(scores[served])
            if keep_features:
                rec["history"].append(history[served])
                rec["hour"].append(hour[served])
        total += day_usage
        ret_u = _streams(cfg.seed, d, 1_000_002).random(n_users)
        active = np.where(active, ret_u < return_probability(day_usage, cfg), ret_u < cfg.reactivation)

    def cat(name, width=None, dtype=float):
        if rec[name]:
            return np.concatenate(rec[name])
        return np.zeros((0,) if width is None else (0, width), dtype=dtype)

    log = SimLog(active_days, cat("user", dtype=np.int64), cat("day", dtype=np.int64),
                 cat("request", dtype=np.int64), cat("enabled", k, bool), cat("exposures", k, np.int64),
                 cat("long", k, np.int64), cat("usage"), cat("scores", k), total)
    if keep_features:
        log.history = cat("history", cfg.history_length, np.int64)
        log.hour = cat("hour", dtype=np.int64)
        log.device = pop.device[log.user]
    return log


def lt_metrics(log: SimLog, window: int = 7) -> tuple[float, float]:
    """Enter and Slide LT over the trailing ``window`` days of the run."""
    if window < 1:
        raise ValueError("window must be >= 1")
    active = log.active
    n_days = active.shape[1]
    if n_days < 1:
        raise UndefinedMetricError("log spans no days")
    start = max(n_days - window, 0)
    dau_sum = float(active[:, start:].sum())
    ever = int(active.any(axis=1).sum())
    in_window = int(active[:, start:].any(axis=1).sum())
    if ever == 0 or in_window == 0:
        raise UndefinedMetricError("no active users in the evaluation period")
    return dau_sum / ever, dau_sum / in_window


# -- datasets derived from the ground truth ---------------------------------

def observe_users(cfg: SimConfig, population: Population | None = None, warmup_days: int = 7,
                  seed: int | None = None) -> np.ndarray:
    """Offline user features from a warm-up period under the default mix.

    Columns: per-category long-play rate (K), mean daily usage in minutes,
    fraction of active days, device token.
    """
    pop = population or Population.draw(cfg)
    warm = replace(cfg, day_count=warmup_days, seed=cfg.seed + 7919 if seed is None else seed)
    log = simulate(Policy("always_off"), warm, population=pop)
    n, k = len(pop), cfg.category_count
    exposed = np.zeros((n, k))
    longs = np.zeros((n, k))
    np.add.at(exposed, log.user, log.exposures)
    np.add.at(longs, log.user, log.long_plays)
    rate = np.divide(longs, exposed, out=np.full((n, k), 0.5), where=exposed > 0)
    usage_min = log.total_usage / warmup_days / 60.0
    return np.column_stack([rate, usage_min, log.active.mean(axis=1), pop.device])


def world_schema(cfg: SimConfig) -> FeatureSchema:
    """Feature schema for datasets built from the simulated world."""
    k = cfg.category_count
    offline = tuple(FeatureSpec(f"long_rate_{j + 1}") for j in range(k)) + (
        FeatureSpec("usage_minutes"), FeatureSpec("active_fraction"), FeatureSpec("device", CATEGORICAL, DEVICES))
    treatment = (FeatureSpec("treatment", CATEGORICAL, k + 1), FeatureSpec("quota_delta"),
                 FeatureSpec("target_category"))
    return FeatureSchema(offline, treatment)


def world_canonical_treatments(cfg: SimConfig) -> np.ndarray:
    k = cfg.category_count
    canon = np.zeros((k + 1, 3))
    canon[:, 0] = np.arange(k + 1)
    canon[1:, 1] = cfg.quota_deltas
    canon[1:, 2] = np.arange(1, k + 1) / k
    return canon


def world_rct(cfg: SimConfig, population: Population | None = None, features: np.ndarray | None = None,
              rct_days: int | None = None, seed: int | None = None) -> OfflineDataset:
    """Randomized trial on the simulated world.

    Each user is assigned one arm uniformly over ``0..K`` for ``rct_days``;
    the response is mean daily usage in minutes.
    """
    pop = population or Population.draw(cfg)
    if features is None:
        features = observe_users(cfg, pop)
    days = rct_days or cfg.day_count
    seed = cfg.seed + 104729 if seed is None else seed
    arm = np.random.default_rng([seed, 5]).integers(cfg.category_count + 1, size=len(pop))
    log = simulate(Policy("assigned"), replace(cfg, day_count=days, seed=seed), population=pop, assignment=arm)
    canon = world_canonical_treatments(cfg)
    y = log.total_usage / days / 60.0
    return OfflineDataset(features, canon[arm], y, world_schema(cfg), canon)


def request_log(cfg: SimConfig, day_pattern: Sequence[int], population: Population | None = None,
                seed: int | None = None) -> SimLog:
    """Requests served under the default mix, every user active every day."""
    run = replace(cfg, day_count=max(len(day_pattern), 1), seed=cfg.seed + 15485863 if seed is None else seed)
    return simulate(Policy("always_off"), run, population=population, requests_per_day=day_pattern,
                    always_active=True, keep_features=True)


def log_to_batch(log: SimLog, cfg: SimConfig) -> RequestBatch:
    n = len(log)
    hist = log.history if log.history.shape[1] else np.zeros((n, 1), np.int64)
    return RequestBatch([PaddedSequence(hist, np.full(n, log.history.shape[1])),
                         PaddedSequence(log.hour[:, None], np.ones(n, np.int64)),
                         PaddedSequence(log.device[:, None], np.ones(n, np.int64))],
                        labels_from_counts(log.long_plays, log.short_plays))


def log_to_requests(log: SimLog) -> list[RequestInstance]:
    out = []
    for i in range(len(log)):
        exposures = []
        for j in range(log.exposures.shape[1]):
            exposures += [(j + 1, LONG)] * int(log.long_plays[i, j])
            exposures += [(j + 1, SHORT)] * int(log.short_plays[i, j])
        out.append(RequestInstance([[int(v) for v in log.history[i]], [int(log.hour[i])], [int(log.device[i])]],
                                   exposures))
    return out


def write_requests(log: SimLog, path: str | Path) -> None:
    """Request table: ids, space-separated history tokens, hour, device, long/short counts."""
    k = log.exposures.shape[1]
    header = (["user", "day", "request", "history", "hour", "device"] + [f"long_{j + 1}" for j in range(k)]
              + [f"short_{j + 1}" for j in range(k)])
    short = log.short_plays
    lines = [",".join(header)]
    for i in range(len(log)):
        fields = [str(log.user[i]), str(log.day[i]), str(log.request[i]), " ".join(map(str, log.history[i])),
                  str(log.hour[i]), str(log.device[i])]
        fields += [str(v) for v in log.long_plays[i]] + [str(v) for v in short[i]]
        lines.append(",".join(fields))
    with Path(path).open("w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def read_requests(path: str | Path, cfg: SimConfig) -> RequestBatch:
    """Inverse of :func:`write_requests`, with labels from the play counts."""
    k = cfg.category_count
    specs = cfg.sequence_specs()
    hist, hour, device, long_, short = [], [], [], [], []
    with Path(path).open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        need = ["history", "hour", "device"] + [f"long_{j + 1}" for j in range(k)] + [f"short_{j + 1}" for j in range(k)]
        missing = [c for c in need if c not in (reader.fieldnames or [])]
        if missing:
            raise SchemaError(f"{path}: missing column(s) {missing}")
        for lineno, row in enumerate(reader, start=2):
            try:
                hist.append([int(v) for v in row["history"].split()])
                hour.append([int(row["hour"])])
                device.append([int(row["device"])])
                long_.append([int(row[f"long_{j + 1}"]) for j in range(k)])
                short.append([int(row[f"short_{j + 1}"]) for j in range(k)])
            except (TypeError, ValueError) as exc:
                raise ParseError(f"bad request record ({exc})", line=lineno) from None
    seqs = [PaddedSequence.from_lists(hist, specs[0]), PaddedSequence.from_lists(hour, specs[1]),
            PaddedSequence.from_lists(device, specs[2])]
    return RequestBatch(seqs, labels_from_counts(np.array(long_).reshape(-1, k), np.array(short).reshape(-1, k)))
