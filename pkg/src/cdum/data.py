"""Offline datasets: synthetic multi-treatment RCTs, CSV ingestion, 8:1:1 splits."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .encoding import FeatureSchema
from .errors import ConfigError, EmptyDatasetError, ParseError, SchemaError


@dataclass(frozen=True)
class OfflineInstance:
    x: np.ndarray
    t: np.ndarray
    y: float

    @property
    def treatment(self) -> int:
        return int(self.t[0])


@dataclass
class OfflineDataset:
    """Column-stacked ``(x, t, y)`` records; ``t[:, 0]`` holds the treatment index."""

    x: np.ndarray
    t: np.ndarray
    y: np.ndarray
    schema: FeatureSchema
    canonical_treatments: np.ndarray | None = None

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64)
        self.t = np.asarray(self.t, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.float64).reshape(-1)
        n = self.x.shape[0]
        if self.t.shape[0] != n or self.y.shape[0] != n:
            raise SchemaError("x, t and y must have the same number of rows")
        if self.x.shape[1] != len(self.schema.offline) or self.t.shape[1] != len(self.schema.treatment):
            raise SchemaError(
                f"feature widths {self.x.shape[1]}/{self.t.shape[1]} do not match schema "
                f"{len(self.schema.offline)}/{len(self.schema.treatment)}"
            )
        if self.canonical_treatments is None:
            self.canonical_treatments = default_canonical_treatments(self.schema)

    def __len__(self) -> int:
        return self.x.shape[0]

    def __getitem__(self, i: int) -> OfflineInstance:
        return OfflineInstance(self.x[i], self.t[i], float(self.y[i]))

    @property
    def treatment(self) -> np.ndarray:
        return self.t[:, 0].astype(np.int64)

    def take(self, idx) -> "OfflineDataset":
        idx = np.asarray(idx)
        idx = idx.astype(np.intp) if idx.size == 0 else idx
        return OfflineDataset(self.x[idx], self.t[idx], self.y[idx], self.schema,
                              self.canonical_treatments)


def default_canonical_treatments(schema: FeatureSchema) -> np.ndarray:
    """Index-only treatment vectors: row ``k`` is ``[k, 0, ..., 0]``."""
    k1 = schema.treatment_count + 1
    canon = np.zeros((k1, len(schema.treatment)))
    canon[:, 0] = np.arange(k1)
    return canon


@dataclass
class SynthSpec:
    """Parameters of the synthetic RCT generator.

    ``effect_scale`` sets the mean absolute treatment effect relative to the
    standard deviation of the control response, noise included.
    """

    user_count: int = 10_000
    feature_count: int = 8
    treatment_count: int = 2
    cluster_count: int = 3
    noise: float = 1.0
    effect_scale: float = 0.3
    effect_sparsity: int = 3
    effect_interactions: int = 0
    assignment: Sequence[float] | None = None
    constant_effects: Sequence[float] | None = None
    seed: int = 0

    def __post_init__(self):
        if self.noise < 0:
            raise ConfigError("noise must be non-negative")
        if self.feature_count < 4:
            raise ConfigError("feature_count must be at least 4")
        if self.effect_interactions < 0:
            raise ConfigError("effect_interactions must be >= 0")
        probs = self.assignment_probs
        if probs.shape != (self.treatment_count + 1,) or np.any(probs < 0) or abs(probs.sum() - 1) > 1e-9:
            raise ConfigError("assignment probabilities must be K+1 non-negative values summing to 1")

    @property
    def assignment_probs(self) -> np.ndarray:
        if self.assignment is None:
            return np.full(self.treatment_count + 1, 1.0 / (self.treatment_count + 1))
        return np.asarray(self.assignment, dtype=float)


@dataclass
class SynthWorld:
    """The fixed response surface behind a :class:`SynthSpec`."""

    spec: SynthSpec
    cluster_means: np.ndarray
    effect_intercepts: np.ndarray
    effect_weights: np.ndarray
    base_weights: np.ndarray = field(repr=False)
    # (K, P, 2) feature pairs and (K, P) weights of pairwise interaction terms
    interaction_pairs: np.ndarray | None = field(default=None, repr=False)
    interaction_weights: np.ndarray | None = field(default=None, repr=False)

    @classmethod
    def from_spec(cls, spec: SynthSpec) -> "SynthWorld":
        rng = np.random.default_rng([spec.seed, 101])
        f, k = spec.feature_count, spec.treatment_count
        means = rng.normal(0.0, 1.0, size=(spec.cluster_count, f))
        base_w = rng.normal(0.0, 1.0, size=4)
        weights = np.zeros((k, f))
        intercepts = np.zeros(k)
        for j in range(k):
            support = rng.choice(f, size=min(spec.effect_sparsity, f), replace=False)
            weights[j, support] = rng.normal(0.0, 1.0, size=support.size)
            intercepts[j] = rng.normal(0.0, 0.3)
        world = cls(spec, means, intercepts, weights, base_w)
        if spec.effect_interactions:
            irng = np.random.default_rng([spec.seed, 104])
            p = spec.effect_interactions
            world.interaction_pairs = np.array([[irng.choice(f, size=2, replace=False) for _ in range(p)]
                                                for _ in range(k)])
            world.interaction_weights = irng.normal(0.0, 1.0, size=(k, p))
        if spec.constant_effects is None:
            ref = world.sample_features(np.random.default_rng([spec.seed, 102]), 20_000)
            sigma_y = np.sqrt(world.base_response(ref).var() + spec.noise ** 2)
            target = spec.effect_scale * sigma_y
            raw = world._raw_effects(ref)
            scale = target / np.maximum(np.abs(raw).mean(axis=0), 1e-12)
            world.effect_weights *= scale[:, None]
            world.effect_intercepts *= scale
            if world.interaction_weights is not None:
                world.interaction_weights *= scale[:, None]
        return world

    def sample_features(self, rng: np.random.Generator, n: int) -> np.ndarray:
        cluster = rng.integers(self.spec.cluster_count, size=n)
        return self.cluster_means[cluster] + rng.normal(0.0, 1.0, size=(n, self.spec.feature_count))

    def base_response(self, x: np.ndarray) -> np.ndarray:
        w = self.base_weights
        return (3.0 + w[0] * np.sin(x[:, 0]) + w[1] * x[:, 1] * x[:, 2] * 0.5
                + w[2] * np.abs(x[:, 3]) + w[3] * np.tanh(x[:, 0] + x[:, 1]))

    def _raw_effects(self, x: np.ndarray) -> np.ndarray:
        tau = self.effect_intercepts[None, :] + x @ self.effect_weights.T
        if self.interaction_weights is not None:
            pairs = self.interaction_pairs
            prod = x[:, pairs[..., 0]] * x[:, pairs[..., 1]]  # (N, K, P)
            tau = tau + np.einsum("nkp,kp->nk", prod, self.interaction_weights)
        return tau

    def effects(self, x: np.ndarray) -> np.ndarray:
        """True ``tau_k(x)`` for ``k = 1..K`` as an ``(N, K)`` array."""
        if self.spec.constant_effects is not None:
            c = np.asarray(self.spec.constant_effects, dtype=float)
            return np.broadcast_to(c, (x.shape[0], c.size)).copy()
        return self._raw_effects(x)

    def canonical_treatments(self) -> np.ndarray:
        k = self.spec.treatment_count
        canon = np.zeros((k + 1, 3))
        canon[:, 0] = np.arange(k + 1)
        canon[1:, 1] = 0.2
        canon[1:, 2] = np.arange(1, k + 1) / k
        return canon

    def schema(self) -> FeatureSchema:
        return FeatureSchema.continuous(self.spec.feature_count, self.spec.treatment_count,
                                        n_treatment_attrs=2)


@dataclass
class GroundTruth:
    tau: np.ndarray  # (N, K)
    mu: np.ndarray  # (N,)


def generate_synth(spec: SynthSpec) -> tuple[OfflineDataset, GroundTruth]:
    world = SynthWorld.from_spec(spec)
    rng = np.random.default_rng([spec.seed, 103])
    n = spec.user_count
    x = world.sample_features(rng, n)
    arm = rng.choice(spec.treatment_count + 1, size=n, p=spec.assignment_probs)
    noise = rng.normal(0.0, 1.0, size=n) * spec.noise
    mu = world.base_response(x)
    tau = world.effects(x)
    effect = np.where(arm > 0, tau[np.arange(n), np.maximum(arm - 1, 0)], 0.0)
    canon = world.canonical_treatments()
    t = canon[arm]
    ds = OfflineDataset(x, t, mu + effect + noise, world.schema(), canon)
    return ds, GroundTruth(tau, mu)


@dataclass(frozen=True)
class DatasetSplit:
    train: np.ndarray
    validation: np.ndarray
    test: np.ndarray


def split_811(n_instances: int, seed: int) -> DatasetSplit:
    """Seeded shuffle then 80/10/10; rounding remainders go to train."""
    if n_instances < 10:
        raise EmptyDatasetError(f"need at least 10 instances to split 8:1:1, got {n_instances}")
    perm = np.random.default_rng(seed).permutation(n_instances)
    n_eval = n_instances // 10
    n_train = n_instances - 2 * n_eval
    return DatasetSplit(np.sort(perm[:n_train]), np.sort(perm[n_train:n_train + n_eval]),
                        np.sort(perm[n_train + n_eval:]))


CRITEO_FEATURES = [f"f{j}" for j in range(12)]


def load_csv(path: str | Path, schema_name: str = "generic") -> OfflineDataset:
    """Read an offline dataset.

    ``criteo_uplift`` expects columns ``f0..f11``, ``treatment`` and ``visit``
    (other columns are ignored). ``generic`` reads ``x*`` feature columns,
    ``t0`` (treatment index), optional ``t1..`` attributes and ``y``.
    """
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError("file is empty", line=1) from None
        header = [h.strip() for h in header]
        if schema_name == "criteo_uplift":
            x_cols, t_cols, y_col = CRITEO_FEATURES, ["treatment"], "visit"
        elif schema_name == "generic":
            x_cols = [h for h in header if h.startswith("x")]
            t_cols = ["t0"] + sorted((h for h in header if h.startswith("t") and h[1:].isdigit() and h != "t0"),
                                     key=lambda h: int(h[1:]))
            y_col = "y"
        else:
            raise SchemaError(f"unknown schema {schema_name!r}")
        missing = [c for c in x_cols + t_cols + [y_col] if c not in header]
        if missing or not x_cols:
            raise SchemaError(f"{path}: missing column(s) {missing or ['x*']}")
        pos = {h: i for i, h in enumerate(header)}
        cols = [pos[c] for c in x_cols + t_cols + [y_col]]
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise ParseError(f"expected {len(header)} fields, got {len(row)}", line=lineno)
            try:
                values = [float(row[c]) for c in cols]
            except ValueError as exc:
                raise ParseError(f"non-numeric value ({exc})", line=lineno) from None
            if not all(math.isfinite(v) for v in values):
                raise ParseError("non-finite value", line=lineno)
            rows.append(values)
    if not rows:
        raise EmptyDatasetError(f"{path}: no data rows")
    data = np.asarray(rows)
    nx, nt = len(x_cols), len(t_cols)
    x, t, y = data[:, :nx], data[:, nx:nx + nt], data[:, -1]
    arms = t[:, 0]
    if np.any(arms != np.round(arms)) or np.any(arms < 0):
        bad = int(np.flatnonzero((arms != np.round(arms)) | (arms < 0))[0])
        raise ParseError("treatment index must be a non-negative integer", line=bad + 2)
    k = max(int(arms.max()), 1)
    schema = FeatureSchema.continuous(nx, k, n_treatment_attrs=nt - 1)
    canon = np.zeros((k + 1, nt))
    canon[:, 0] = np.arange(k + 1)
    for arm in range(k + 1):
        rows_k = np.flatnonzero(arms == arm)
        if rows_k.size:
            canon[arm, 1:] = t[rows_k[0], 1:]
    return OfflineDataset(x, t, y, schema, canon)


def write_csv(ds: OfflineDataset, path: str | Path) -> None:
    """Write in the ``generic`` layout read by :func:`load_csv`."""
    nx, nt = ds.x.shape[1], ds.t.shape[1]
    header = [f"x{j}" for j in range(nx)] + [f"t{j}" for j in range(nt)] + ["y"]
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in np.column_stack([ds.x, ds.t, ds.y]):
            w.writerow([repr(float(v)) for v in row])


def schema_path(path: str | Path) -> Path:
    path = Path(path)
    return path.with_name(path.stem + ".schema.json")


def write_dataset(ds: OfflineDataset, path: str | Path) -> None:
    """CSV plus a ``.schema.json`` sidecar holding feature kinds and canonical treatments."""
    write_csv(ds, path)
    doc = {"schema": ds.schema.to_dict(),
           "canonical_treatments": None if ds.canonical_treatments is None else ds.canonical_treatments.tolist()}
    schema_path(path).write_text(json.dumps(doc, indent=1) + "\n", encoding="utf-8")


def read_dataset(path: str | Path, schema_name: str = "generic") -> OfflineDataset:
    """:func:`load_csv`, then apply the schema sidecar when one exists."""
    ds = load_csv(path, schema_name)
    side = schema_path(path)
    if schema_name != "generic" or not side.exists():
        return ds
    doc = json.loads(side.read_text(encoding="utf-8"))
    schema = FeatureSchema.from_dict(doc["schema"])
    if len(schema.offline) != ds.x.shape[1] or len(schema.treatment) != ds.t.shape[1]:
        raise SchemaError(f"{side}: declares {len(schema.offline)}+{len(schema.treatment)} columns, file has "
                          f"{ds.x.shape[1]}+{ds.t.shape[1]}")
    canon = doc.get("canonical_treatments")
    return OfflineDataset(ds.x, ds.t, ds.y, schema, None if canon is None else np.asarray(canon, dtype=float))


def write_ground_truth(truth: GroundTruth, path: str | Path) -> None:
    k = truth.tau.shape[1]
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["mu"] + [f"tau{j + 1}" for j in range(k)])
        for mu, tau in zip(truth.mu, truth.tau):
            w.writerow([repr(float(mu))] + [repr(float(v)) for v in tau])


def read_ground_truth(path: str | Path) -> GroundTruth:
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    return GroundTruth(tau=data[:, 1:], mu=data[:, 0])


def generate_requests(cfg, day_pattern: Sequence[int], population=None, seed: int | None = None) -> list:
    """Request instances with exposure logs drawn from the simulated world.

    ``day_pattern[d]`` is the number of requests each user makes on day ``d``.
    """
    from .simulator import log_to_requests, request_log
    if sum(day_pattern) == 0:
        return []
    return log_to_requests(request_log(cfg, day_pattern, population, seed))
