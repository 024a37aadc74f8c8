"""Online real-time interest network.

A request is a set of token sequences (recently interacted video duration
categories plus context tokens such as hour of day and device). Sequences
are mean-pooled and concatenated, then a multi-gate mixture of experts
emits one interest score per duration category. Training targets are the
add-one smoothed long/short play ratios of the request's exposures.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .checkpoint import check_param_shapes
from .encoding import PaddedSequence, SequenceSpec, encode_requests, init_tables, mean_pool_backward
from .errors import CategoryError, ConfigError, DimensionError, EmptyDatasetError
from .nn import AffineLayer, Params, affine_backward, affine_forward, huber
from .training import History, TrainConfig, fit_minibatch

LONG, SHORT = "long", "short"
CLAMP_LOW, CLAMP_HIGH = 0.1, 10.0


@dataclass
class RequestInstance:
    sequences: list[list[int]]
    exposures: list[tuple[int, str]] = field(default_factory=list)


def build_request_labels(request: RequestInstance, k: int) -> np.ndarray:
    """``r_k = (long_k + 1) / (short_k + 1)`` per duration category ``1..K``."""
    long_ = np.zeros(k)
    short = np.zeros(k)
    for cat, kind in request.exposures:
        if not 1 <= cat <= k:
            raise CategoryError(f"duration category {cat} outside [1, {k}]")
        if kind == LONG:
            long_[cat - 1] += 1
        elif kind == SHORT:
            short[cat - 1] += 1
        else:
            raise CategoryError(f"play kind must be 'long' or 'short', got {kind!r}")
    return (long_ + 1.0) / (short + 1.0)


def labels_from_counts(long_counts: np.ndarray, short_counts: np.ndarray) -> np.ndarray:
    return (np.asarray(long_counts, dtype=float) + 1.0) / (np.asarray(short_counts, dtype=float) + 1.0)


@dataclass
class RequestBatch:
    sequences: list[PaddedSequence]
    labels: np.ndarray | None = None

    def __len__(self) -> int:
        return self.sequences[0].tokens.shape[0]

    def take(self, idx) -> "RequestBatch":
        idx = np.asarray(idx)
        idx = idx.astype(np.intp) if idx.size == 0 else idx
        return RequestBatch([s.take(idx) for s in self.sequences],
                            None if self.labels is None else self.labels[idx])

    @classmethod
    def from_requests(cls, requests: Sequence[RequestInstance], specs: Sequence[SequenceSpec],
                      k: int | None = None) -> "RequestBatch":
        for r in requests:
            if len(r.sequences) != len(specs):
                raise DimensionError(f"request has {len(r.sequences)} sequences, schema {len(specs)}")
        seqs = [PaddedSequence.from_lists([r.sequences[j] for r in requests], spec)
                for j, spec in enumerate(specs)]
        labels = None
        if k is not None:
            labels = np.array([build_request_labels(r, k) for r in requests]).reshape(len(requests), k)
        return cls(seqs, labels)


@dataclass
class FicConfig:
    task_count: int
    expert_count: int = 3
    embedding_dim: int = 32
    hidden_dim: int = 64
    expert_dim: int = 32
    tower_hidden_dim: int = 64

    def __post_init__(self):
        if self.task_count < 1 or self.expert_count < 1:
            raise ConfigError("task_count and expert_count must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)


class FicModel:
    kind = "fic"

    def __init__(self, sequences: Sequence[SequenceSpec], config: FicConfig, params: Params):
        self.sequences = tuple(sequences)
        self.config = config
        self.params = params

    @classmethod
    def init(cls, sequences: Sequence[SequenceSpec], config: FicConfig, rng: np.random.Generator,
             zero: bool = False) -> "FicModel":
        c = config
        params: Params = {}
        for j, table in enumerate(init_tables(sequences, c.embedding_dim, rng)):
            params[f"emb_s.{j}"] = table
        width = len(sequences) * c.embedding_dim
        make = (lambda i, o, a: AffineLayer.zeros(i, o, a)) if zero else \
            (lambda i, o, a: AffineLayer.init(i, o, a, rng))
        for m in range(c.expert_count):
            make(width, c.hidden_dim, "relu").register(params, f"expert{m}.hidden")
            make(c.hidden_dim, c.expert_dim, "relu").register(params, f"expert{m}.out")
        for k in range(c.task_count):
            make(width, c.expert_count, "softmax").register(params, f"gate{k}")
            make(c.expert_dim, c.tower_hidden_dim, "relu").register(params, f"tower{k}.hidden")
            make(c.tower_hidden_dim, 1, "none").register(params, f"tower{k}.head")
        return cls(sequences, config, params)

    def layer(self, name: str, activation: str) -> AffineLayer:
        return AffineLayer(self.params[f"{name}.W"], self.params[f"{name}.b"], activation)

    @property
    def tables(self) -> list[np.ndarray]:
        return [self.params[f"emb_s.{j}"] for j in range(len(self.sequences))]

    def forward(self, batch: RequestBatch):
        c = self.config
        e = encode_requests(batch.sequences, self.tables)
        cache = {"batch": batch, "e": e, "exp_h": [], "gates": [], "towers": []}
        fs = []
        for m in range(c.expert_count):
            h = affine_forward(e, self.layer(f"expert{m}.hidden", "relu"))
            cache["exp_h"].append(h)
            fs.append(affine_forward(h, self.layer(f"expert{m}.out", "relu")))
        f = np.stack(fs, axis=1)
        cache["f"] = f
        out = np.empty((e.shape[0], c.task_count))
        for k in range(c.task_count):
            g = affine_forward(e, self.layer(f"gate{k}", "softmax"))
            mixed = np.einsum("nm,nmd->nd", g, f)
            a = affine_forward(mixed, self.layer(f"tower{k}.hidden", "relu"))
            out[:, k] = affine_forward(a, self.layer(f"tower{k}.head", "none"))[:, 0]
            cache["gates"].append(g)
            cache["towers"].append((mixed, a))
        return out, cache

    def backward(self, cache: dict, d_out: np.ndarray) -> Params:
        c = self.config
        e, f = cache["e"], cache["f"]
        grads: Params = {}
        d_e = np.zeros_like(e)
        d_f = np.zeros_like(f)
        for k in range(c.task_count):
            g = cache["gates"][k]
            mixed, a = cache["towers"][k]
            d_a, gw, gb = affine_backward(a, self.layer(f"tower{k}.head", "none"), d_out[:, k:k + 1])
            grads[f"tower{k}.head.W"], grads[f"tower{k}.head.b"] = gw, gb
            d_mixed, gw, gb = affine_backward(mixed, self.layer(f"tower{k}.hidden", "relu"), d_a, output=a)
            grads[f"tower{k}.hidden.W"], grads[f"tower{k}.hidden.b"] = gw, gb
            d_f += g[:, :, None] * d_mixed[:, None, :]
            d_g = np.einsum("nd,nmd->nm", d_mixed, f)
            d_in, gw, gb = affine_backward(e, self.layer(f"gate{k}", "softmax"), d_g, output=g)
            grads[f"gate{k}.W"], grads[f"gate{k}.b"] = gw, gb
            d_e += d_in
        for m in range(c.expert_count):
            h = cache["exp_h"][m]
            d_h, gw, gb = affine_backward(h, self.layer(f"expert{m}.out", "relu"), d_f[:, m, :], output=f[:, m, :])
            grads[f"expert{m}.out.W"], grads[f"expert{m}.out.b"] = gw, gb
            d_in, gw, gb = affine_backward(e, self.layer(f"expert{m}.hidden", "relu"), d_h, output=h)
            grads[f"expert{m}.hidden.W"], grads[f"expert{m}.hidden.b"] = gw, gb
            d_e += d_in
        d = c.embedding_dim
        for j, (seq, table) in enumerate(zip(cache["batch"].sequences, self.tables)):
            grads[f"emb_s.{j}"] = mean_pool_backward(seq, table, d_e[:, j * d:(j + 1) * d])
        return grads

    def predict_raw(self, batch: RequestBatch) -> np.ndarray:
        return self.forward(batch)[0]

    def predict(self, batch: RequestBatch, low: float = CLAMP_LOW, high: float = CLAMP_HIGH) -> np.ndarray:
        return np.clip(self.predict_raw(batch), low, high)

    def to_dict(self) -> dict:
        return {"config": self.config.to_dict(), "sequences": [s.to_dict() for s in self.sequences]}

    @classmethod
    def from_dict(cls, meta: dict, params: Params) -> "FicModel":
        seqs = [SequenceSpec(**s) for s in meta["sequences"]]
        config = FicConfig(**meta["config"])
        check_param_shapes(cls.init(seqs, config, np.random.default_rng(0)).params, params)
        return cls(seqs, config, params)


class ConstantInterest:
    """Stand-in interest model returning the same score for every task and request."""

    def __init__(self, value: float, task_count: int):
        self.value = float(value)
        self.config = FicConfig(task_count=task_count)

    def predict(self, batch: RequestBatch, low: float = CLAMP_LOW, high: float = CLAMP_HIGH) -> np.ndarray:
        return np.clip(np.full((len(batch), self.config.task_count), self.value), low, high)


def clamp_interest(raw, low: float = CLAMP_LOW, high: float = CLAMP_HIGH) -> np.ndarray:
    return np.clip(np.asarray(raw, dtype=float), low, high)


def fic_loss(model: FicModel, batch: RequestBatch, delta: float = 1.0) -> tuple[float, Params, np.ndarray]:
    """Sum over tasks of the batch-mean Huber loss, its gradients, and per-task losses."""
    pred, cache = model.forward(batch)
    loss, d = huber(pred - batch.labels, delta)
    n = len(batch)
    per_task = loss.mean(axis=0)
    return float(per_task.sum()), model.backward(cache, d / n), per_task


def fic_forward(request: RequestInstance, model: FicModel) -> np.ndarray:
    return model.predict_raw(RequestBatch.from_requests([request], model.sequences))[0]


def fic_predict(request: RequestInstance, model, low: float = CLAMP_LOW, high: float = CLAMP_HIGH) -> np.ndarray:
    return clamp_interest(fic_forward(request, model), low, high)


def fic_fit(train: RequestBatch, val: RequestBatch, sequences: Sequence[SequenceSpec], config: FicConfig,
            train_cfg: TrainConfig | None = None, seed: int = 0) -> tuple[FicModel, History]:
    train_cfg = train_cfg or TrainConfig()
    if len(train) == 0 or len(val) == 0:
        raise EmptyDatasetError("FIC needs non-empty train and validation request sets")
    if train.labels is None or val.labels is None:
        raise EmptyDatasetError("FIC training requests carry no labels")
    rng = np.random.default_rng(seed)
    model = FicModel.init(sequences, config, rng)
    # start each task at its mean label so early epochs fit shape, not offset
    for k in range(config.task_count):
        model.params[f"tower{k}.head.b"][:] = train.labels[:, k].mean()
    hist = fit_minibatch(
        model.params,
        lambda idx, delta: fic_loss(model, train.take(idx), delta)[:2],
        lambda delta: float(huber(model.predict_raw(val) - val.labels, delta)[0].mean(axis=0).sum()),
        len(train), train_cfg, rng)
    return model, hist
