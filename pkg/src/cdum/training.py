"""Minibatch Adam loop with reduce-on-plateau shared by every network here."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from typing import Callable, Mapping

import numpy as np

from .errors import ConfigError, EmptyDatasetError, NumericError
from .nn import OptimizerState, Params, adam_step, lr_reduce_on_plateau

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 4096
    epochs: int = 20
    lr_factor: float = 0.6
    lr_patience: int = 2
    huber_delta: float = 1.0
    # per-epoch override of huber_delta; the last entry repeats
    delta_schedule: list[float] | None = None
    keep_best: bool = False

    def __post_init__(self):
        if self.learning_rate <= 0 or self.batch_size < 1 or self.epochs < 0:
            raise ConfigError("learning_rate must be > 0, batch_size >= 1 and epochs >= 0")
        if not 0 < self.lr_factor < 1 or self.lr_patience < 0:
            raise ConfigError("lr_factor must lie in (0, 1) and lr_patience be >= 0")
        if self.huber_delta <= 0 or any(d <= 0 for d in self.delta_schedule or []):
            raise ConfigError("Huber delta must be positive")

    def delta_at(self, epoch: int) -> float:
        if not self.delta_schedule:
            return self.huber_delta
        return self.delta_schedule[min(epoch, len(self.delta_schedule) - 1)]

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class History:
    val_loss: list[float] = field(default_factory=list)
    train_loss: list[float] = field(default_factory=list)
    learning_rate: list[float] = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)


def fit_minibatch(params: Params,
                  loss_and_grads: Callable[[np.ndarray, float], tuple[float, Mapping[str, np.ndarray]]],
                  val_loss: Callable[[float], float],
                  n_train: int, cfg: TrainConfig, rng: np.random.Generator) -> History:
    """Train ``params`` in place.

    ``loss_and_grads(idx, delta)`` evaluates a batch of training rows and
    ``val_loss(delta)`` the whole validation split. ``val_loss[0]`` in the
    returned history is measured before the first update.
    """
    if n_train == 0:
        raise EmptyDatasetError("training split is empty")
    state = OptimizerState(learning_rate=cfg.learning_rate, reduction_factor=cfg.lr_factor,
                           patience=cfg.lr_patience)
    hist = History()
    hist.val_loss.append(val_loss(cfg.delta_at(0)))
    hist.learning_rate.append(state.learning_rate)
    best = (hist.val_loss[0], {k: v.copy() for k, v in params.items()}) if cfg.keep_best else None
    batch = min(cfg.batch_size, n_train)
    for epoch in range(cfg.epochs):
        delta = cfg.delta_at(epoch)
        order = rng.permutation(n_train)
        total, seen = 0.0, 0
        for start in range(0, n_train, batch):
            idx = order[start:start + batch]
            loss, grads = loss_and_grads(idx, delta)
            if not np.isfinite(loss):
                raise NumericError(f"non-finite training loss at epoch {epoch}")
            adam_step(params, grads, state)
            total += loss * idx.size
            seen += idx.size
        v = val_loss(delta)
        if not np.isfinite(v):
            raise NumericError(f"non-finite validation loss at epoch {epoch}")
        lr_reduce_on_plateau(state, v)
        hist.train_loss.append(total / seen)
        hist.val_loss.append(v)
        hist.learning_rate.append(state.learning_rate)
        log.debug("epoch %d train %.6f val %.6f lr %.2e", epoch + 1, total / seen, v, state.learning_rate)
        if best is not None and v < best[0]:
            best = (v, {k: p.copy() for k, p in params.items()})
    if best is not None:
        for k, p in best[1].items():
            params[k][...] = p
    return hist
