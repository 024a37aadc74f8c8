"""Feature schemas, max-abs normalization and embedding/pooling.

Continuous features are embedded as ``normalized_value * row`` (one learned
row per feature) and categorical features by table lookup, so both kinds
end up as a ``d``-vector per feature. Offline features are concatenated,
treatment features mean-pooled, and each online token sequence is
mean-pooled before concatenation.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import DimensionError, EmptyDatasetError, NumericError, SchemaError, VocabularyError

CONTINUOUS = "continuous"
CATEGORICAL = "categorical"


@dataclass(frozen=True)
class FeatureSpec:
    name: str
    kind: str = CONTINUOUS
    vocab_size: int = 1

    def __post_init__(self):
        if self.kind not in (CONTINUOUS, CATEGORICAL):
            raise SchemaError(f"feature {self.name!r}: unknown kind {self.kind!r}")
        if self.vocab_size < 1:
            raise SchemaError(f"feature {self.name!r}: vocab_size must be >= 1")

    @property
    def table_rows(self) -> int:
        return self.vocab_size if self.kind == CATEGORICAL else 1

    def to_dict(self) -> dict:
        return {"name": self.name, "kind": self.kind, "vocab_size": self.vocab_size}


@dataclass(frozen=True)
class SequenceSpec:
    name: str
    vocab_size: int
    max_len: int

    def __post_init__(self):
        if self.vocab_size < 1 or self.max_len < 0:
            raise SchemaError(f"sequence {self.name!r}: invalid vocab_size/max_len")

    def to_dict(self) -> dict:
        return {"name": self.name, "vocab_size": self.vocab_size, "max_len": self.max_len}


@dataclass(frozen=True)
class FeatureSchema:
    """Offline features ``x[0..f_x]``, treatment features ``t[0..f_t]``, online sequences.

    ``t[0]`` is always the categorical treatment index with ``K + 1`` values.
    """

    offline: tuple[FeatureSpec, ...]
    treatment: tuple[FeatureSpec, ...]
    sequences: tuple[SequenceSpec, ...] = ()

    def __post_init__(self):
        if not self.offline or not self.treatment:
            raise SchemaError("schema needs at least one offline and one treatment feature")
        if self.treatment[0].kind != CATEGORICAL:
            raise SchemaError("t[0] must be the categorical treatment index")

    @property
    def f_x(self) -> int:
        return len(self.offline) - 1

    @property
    def f_t(self) -> int:
        return len(self.treatment) - 1

    @property
    def f_s(self) -> int:
        return len(self.sequences) - 1

    @property
    def treatment_count(self) -> int:
        return self.treatment[0].vocab_size - 1

    def to_dict(self) -> dict:
        return {
            "offline": [f.to_dict() for f in self.offline],
            "treatment": [f.to_dict() for f in self.treatment],
            "sequences": [s.to_dict() for s in self.sequences],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FeatureSchema":
        return cls(
            offline=tuple(FeatureSpec(**f) for f in d["offline"]),
            treatment=tuple(FeatureSpec(**f) for f in d["treatment"]),
            sequences=tuple(SequenceSpec(**s) for s in d.get("sequences", ())),
        )

    @classmethod
    def continuous(cls, n_offline: int, treatment_count: int,
                   n_treatment_attrs: int = 0) -> "FeatureSchema":
        """All-continuous offline block plus index and continuous treatment attributes."""
        return cls(
            offline=tuple(FeatureSpec(f"x{j}") for j in range(n_offline)),
            treatment=(FeatureSpec("treatment", CATEGORICAL, treatment_count + 1),)
            + tuple(FeatureSpec(f"t{j + 1}") for j in range(n_treatment_attrs)),
        )


def _continuous_mask(specs: Sequence[FeatureSpec]) -> np.ndarray:
    return np.array([s.kind == CONTINUOUS for s in specs], dtype=bool)


@dataclass(frozen=True)
class Normalizer:
    """Per-column max-abs scales; categorical columns carry scale 0 and pass through."""

    x_max_abs: np.ndarray
    t_max_abs: np.ndarray
    x_continuous: np.ndarray
    t_continuous: np.ndarray

    @staticmethod
    def _apply(values: np.ndarray, max_abs: np.ndarray, continuous: np.ndarray) -> np.ndarray:
        values = np.asarray(values, dtype=np.float64)
        out = values.copy()
        scale = np.where(max_abs > 0, max_abs, 1.0)
        cols = continuous & (max_abs > 0)
        out[..., cols] = values[..., cols] / scale[cols]
        out[..., continuous & (max_abs == 0)] = 0.0
        return out

    def apply_x(self, x: np.ndarray) -> np.ndarray:
        return self._apply(x, self.x_max_abs, self.x_continuous)

    def apply_t(self, t: np.ndarray) -> np.ndarray:
        return self._apply(t, self.t_max_abs, self.t_continuous)

    def to_dict(self) -> dict:
        return {"x_max_abs": self.x_max_abs.tolist(), "t_max_abs": self.t_max_abs.tolist()}

    @classmethod
    def from_dict(cls, d: dict, schema: FeatureSchema) -> "Normalizer":
        return cls(np.asarray(d["x_max_abs"], dtype=float), np.asarray(d["t_max_abs"], dtype=float),
                   _continuous_mask(schema.offline), _continuous_mask(schema.treatment))


def fit_normalizer(x: np.ndarray, t: np.ndarray, schema: FeatureSchema) -> Normalizer:
    """Fit max-abs scales on training rows only."""
    x = np.asarray(x, dtype=np.float64)
    t = np.asarray(t, dtype=np.float64)
    if x.shape[0] == 0:
        raise EmptyDatasetError("cannot fit a normalizer on zero instances")
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(t))):
        raise NumericError("non-finite feature values in normalizer input")
    xc, tc = _continuous_mask(schema.offline), _continuous_mask(schema.treatment)
    x_max = np.where(xc, np.abs(x).max(axis=0), 0.0)
    t_max = np.where(tc, np.abs(t).max(axis=0), 0.0)
    return Normalizer(x_max, t_max, xc, tc)


def init_tables(specs: Sequence[FeatureSpec | SequenceSpec], dim: int,
                rng: np.random.Generator) -> list[np.ndarray]:
    tables = []
    for s in specs:
        rows = s.table_rows if isinstance(s, FeatureSpec) else s.vocab_size
        limit = np.sqrt(6.0 / (rows + dim))
        tables.append(rng.uniform(-limit, limit, size=(rows, dim)))
    return tables


def _tokens(column: np.ndarray, spec: FeatureSpec) -> np.ndarray:
    tok = np.asarray(column)
    as_int = tok.astype(np.int64)
    if np.any(as_int != tok) or np.any(as_int < 0) or np.any(as_int >= spec.vocab_size):
        bad = tok[(as_int != tok) | (as_int < 0) | (as_int >= spec.vocab_size)]
        raise VocabularyError(
            f"feature {spec.name!r}: token {bad.flat[0]!r} outside vocabulary of size {spec.vocab_size}"
        )
    return as_int


def embed_block(values: np.ndarray, specs: Sequence[FeatureSpec],
                tables: Sequence[np.ndarray]) -> np.ndarray:
    """Embed a normalized ``(N, F)`` block into ``(N, F, d)``."""
    values = np.asarray(values, dtype=np.float64)
    if values.ndim != 2 or values.shape[1] != len(specs):
        raise DimensionError(f"expected (N, {len(specs)}) feature block, got {values.shape}")
    n, d = values.shape[0], tables[0].shape[1]
    out = np.empty((n, len(specs), d))
    for j, (spec, table) in enumerate(zip(specs, tables)):
        if spec.kind == CATEGORICAL:
            out[:, j, :] = table[_tokens(values[:, j], spec)]
        else:
            out[:, j, :] = values[:, j:j + 1] * table[0]
    return out


def embed_block_backward(values: np.ndarray, specs: Sequence[FeatureSpec],
                         tables: Sequence[np.ndarray], grad: np.ndarray) -> list[np.ndarray]:
    """Table gradients given d(loss)/d(embeddings) of shape ``(N, F, d)``."""
    grads = []
    for j, (spec, table) in enumerate(zip(specs, tables)):
        if spec.kind == CATEGORICAL:
            g = np.zeros_like(table)
            np.add.at(g, values[:, j].astype(np.int64), grad[:, j, :])
        else:
            g = (values[:, j] @ grad[:, j, :]).reshape(1, -1)
        grads.append(g)
    return grads


def embed_offline(x_norm: np.ndarray, t_norm: np.ndarray, schema: FeatureSchema,
                  x_tables: Sequence[np.ndarray], t_tables: Sequence[np.ndarray]):
    """Per-feature embeddings ``(e_x list, e_t list)`` for one normalized instance."""
    ex = embed_block(np.atleast_2d(x_norm), schema.offline, x_tables)[0]
    et = embed_block(np.atleast_2d(t_norm), schema.treatment, t_tables)[0]
    return list(ex), list(et)


def pool_and_concat(e_x: Sequence[np.ndarray], e_t: Sequence[np.ndarray]):
    """Concatenate offline embeddings in order; mean-pool treatment embeddings."""
    if len(e_x) == 0 or len(e_t) == 0:
        raise DimensionError("embedding lists must be non-empty")
    return np.concatenate([np.asarray(e) for e in e_x]), np.mean(np.stack(e_t), axis=0)


@dataclass
class PaddedSequence:
    """A batch of variable-length token sequences, right-padded with zeros."""

    tokens: np.ndarray  # (N, L) int64
    lengths: np.ndarray  # (N,) int64

    @classmethod
    def from_lists(cls, seqs: Sequence[Sequence[int]], spec: SequenceSpec) -> "PaddedSequence":
        n = len(seqs)
        width = max([len(s) for s in seqs], default=0)
        tokens = np.zeros((n, max(width, 1)), dtype=np.int64)
        lengths = np.zeros(n, dtype=np.int64)
        for i, s in enumerate(seqs):
            if len(s):
                arr = np.asarray(s, dtype=np.int64)
                if arr.min() < 0 or arr.max() >= spec.vocab_size:
                    bad = arr[(arr < 0) | (arr >= spec.vocab_size)][0]
                    raise VocabularyError(
                        f"sequence {spec.name!r}: token {bad} outside vocabulary of size {spec.vocab_size}"
                    )
                tokens[i, :len(s)] = arr
            lengths[i] = len(s)
        return cls(tokens, lengths)

    def take(self, idx: np.ndarray) -> "PaddedSequence":
        return PaddedSequence(self.tokens[idx], self.lengths[idx])

    @property
    def mask(self) -> np.ndarray:
        return np.arange(self.tokens.shape[1])[None, :] < self.lengths[:, None]


def mean_pool(seq: PaddedSequence, table: np.ndarray) -> np.ndarray:
    """Mean of token embeddings per row; empty rows pool to zero."""
    mask = seq.mask
    summed = np.einsum("nl,nld->nd", mask.astype(np.float64), table[seq.tokens])
    return summed / np.maximum(seq.lengths, 1)[:, None]


def mean_pool_backward(seq: PaddedSequence, table: np.ndarray, grad: np.ndarray) -> np.ndarray:
    mask = seq.mask
    per_token = (grad / np.maximum(seq.lengths, 1)[:, None])[:, None, :] * mask[:, :, None]
    g = np.zeros_like(table)
    np.add.at(g, seq.tokens[mask], per_token[mask])
    return g


def encode_requests(seqs: Sequence[PaddedSequence], tables: Sequence[np.ndarray]) -> np.ndarray:
    """Pool each online sequence and concatenate: ``(N, (f_s + 1) * d_s)``."""
    return np.concatenate([mean_pool(s, t) for s, t in zip(seqs, tables)], axis=1)


def encode_request(sequences: Sequence[Sequence[int]], specs: Sequence[SequenceSpec],
                   tables: Sequence[np.ndarray]) -> np.ndarray:
    """Single-request form of :func:`encode_requests`."""
    if len(sequences) != len(specs):
        raise DimensionError(f"expected {len(specs)} sequences, got {len(sequences)}")
    padded = [PaddedSequence.from_lists([s], spec) for s, spec in zip(sequences, specs)]
    return encode_requests(padded, tables)[0]
