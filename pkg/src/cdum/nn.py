"""Dense-network substrate: affine layers, activations, Huber loss, Adam.

Everything is float64 and row-major: a batch is a ``(batch, features)``
array and a layer computes ``activation(x @ W + b)``. Gradients are derived
by hand per architecture, so this module only supplies the per-layer pieces
plus a finite-difference checker to validate the assembled graphs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from .errors import DimensionError, NumericError

ACTIVATIONS = ("none", "relu", "sigmoid", "softmax")

Params = dict[str, np.ndarray]


def as_matrix(data, name: str = "matrix") -> np.ndarray:
    """Coerce ``data`` to a finite 2-D float64 array."""
    arr = np.asarray(data, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr.reshape(1, -1)
    if arr.ndim != 2:
        raise DimensionError(f"{name}: expected 2-D data, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"{name}: contains non-finite entries")
    return arr


def sigmoid(z: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def softmax(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def activate(z: np.ndarray, activation: str) -> np.ndarray:
    if activation == "none":
        return z
    if activation == "relu":
        return np.maximum(z, 0.0)
    if activation == "sigmoid":
        return sigmoid(z)
    if activation == "softmax":
        return softmax(z)
    raise ValueError(f"unknown activation {activation!r}")


def activation_backward(upstream: np.ndarray, output: np.ndarray, activation: str,
                        pre: np.ndarray | None = None) -> np.ndarray:
    """Map d(loss)/d(output) to d(loss)/d(pre-activation)."""
    if activation == "none":
        return upstream
    if activation == "relu":
        mask = (pre > 0.0) if pre is not None else (output > 0.0)
        return upstream * mask
    if activation == "sigmoid":
        return upstream * output * (1.0 - output)
    if activation == "softmax":
        inner = np.sum(upstream * output, axis=1, keepdims=True)
        return output * (upstream - inner)
    raise ValueError(f"unknown activation {activation!r}")


@dataclass
class AffineLayer:
    weight: np.ndarray
    bias: np.ndarray
    activation: str = "none"

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.weight.ndim != 2 or self.bias.shape != (1, self.weight.shape[1]):
            raise DimensionError(
                f"bias shape {self.bias.shape} inconsistent with weight shape {self.weight.shape}"
            )

    @property
    def fan_in(self) -> int:
        return self.weight.shape[0]

    @property
    def fan_out(self) -> int:
        return self.weight.shape[1]

    @classmethod
    def init(cls, fan_in: int, fan_out: int, activation: str,
             rng: np.random.Generator) -> "AffineLayer":
        """Glorot-uniform weights, zero bias."""
        limit = math.sqrt(6.0 / (fan_in + fan_out))
        weight = rng.uniform(-limit, limit, size=(fan_in, fan_out))
        return cls(weight, np.zeros((1, fan_out)), activation)

    @classmethod
    def zeros(cls, fan_in: int, fan_out: int, activation: str) -> "AffineLayer":
        return cls(np.zeros((fan_in, fan_out)), np.zeros((1, fan_out)), activation)

    def register(self, params: Params, prefix: str) -> None:
        params[f"{prefix}.W"] = self.weight
        params[f"{prefix}.b"] = self.bias


def affine_forward(x: np.ndarray, layer: AffineLayer) -> np.ndarray:
    if x.ndim != 2 or x.shape[1] != layer.fan_in:
        raise DimensionError(
            f"input shape {x.shape} incompatible with weight shape {layer.weight.shape}"
        )
    return activate(x @ layer.weight + layer.bias, layer.activation)


def affine_backward(x: np.ndarray, layer: AffineLayer, upstream: np.ndarray,
                    output: np.ndarray | None = None):
    """Return ``(input_grad, weight_grad, bias_grad)`` for one layer.

    ``output`` is the cached forward result; it is recomputed when omitted.
    ReLU masks are taken from the pre-activation so a unit sitting exactly at
    zero passes no gradient.
    """
    if x.ndim != 2 or x.shape[1] != layer.fan_in:
        raise DimensionError(
            f"input shape {x.shape} incompatible with weight shape {layer.weight.shape}"
        )
    if upstream.shape != (x.shape[0], layer.fan_out):
        raise DimensionError(
            f"upstream shape {upstream.shape} does not match output shape "
            f"{(x.shape[0], layer.fan_out)}"
        )
    pre = None
    if output is None or layer.activation == "relu":
        pre = x @ layer.weight + layer.bias
        if output is None:
            output = activate(pre, layer.activation)
    dpre = activation_backward(upstream, output, layer.activation, pre)
    return dpre @ layer.weight.T, x.T @ dpre, dpre.sum(axis=0, keepdims=True)


@dataclass(frozen=True)
class HuberConfig:
    delta: float = 1.0

    def __post_init__(self):
        if not self.delta > 0:
            raise ValueError(f"huber delta must be positive, got {self.delta}")


def huber(residual: np.ndarray, delta: float) -> tuple[np.ndarray, np.ndarray]:
    """Elementwise Huber loss and its derivative w.r.t. the residual."""
    a = np.abs(residual)
    quad = a <= delta
    loss = np.where(quad, 0.5 * residual * residual, 0.5 * delta * delta + delta * (a - delta))
    grad = np.where(quad, residual, delta * np.sign(residual))
    return loss, grad


def huber_loss(pred: float, target: float, cfg: HuberConfig = HuberConfig()) -> tuple[float, float]:
    if not (math.isfinite(pred) and math.isfinite(target)):
        raise NumericError(f"non-finite huber input: pred={pred}, target={target}")
    loss, grad = huber(np.array([pred - target]), cfg.delta)
    return float(loss[0]), float(grad[0])


@dataclass
class OptimizerState:
    """Adam moments plus reduce-on-plateau bookkeeping."""

    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    reduction_factor: float = 0.6
    patience: int = 2
    min_improvement: float = 1e-9
    first_moments: Params = field(default_factory=dict)
    second_moments: Params = field(default_factory=dict)
    step_count: int = 0
    best_validation_loss: float = math.inf
    stale_evaluations: int = 0

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if not 0 < self.reduction_factor < 1:
            raise ValueError("reduction_factor must lie in (0, 1)")


def adam_step(params: Params, grads: Mapping[str, np.ndarray], state: OptimizerState) -> None:
    """Apply one bias-corrected Adam update to ``params`` in place."""
    for name, g in grads.items():
        if name not in params:
            raise KeyError(f"gradient for unknown parameter {name!r}")
        if g.shape != params[name].shape:
            raise DimensionError(
                f"{name}: gradient shape {g.shape} != parameter shape {params[name].shape}"
            )
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient in parameter block {name!r}")
    state.step_count += 1
    t = state.step_count
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for name, g in grads.items():
        m = state.first_moments.get(name)
        if m is None:
            m = state.first_moments[name] = np.zeros_like(g)
            state.second_moments[name] = np.zeros_like(g)
        v = state.second_moments[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        params[name] -= state.learning_rate * (m / c1) / (np.sqrt(v / c2) + state.eps)


def lr_reduce_on_plateau(state: OptimizerState, validation_loss: float) -> OptimizerState:
    if validation_loss < state.best_validation_loss - state.min_improvement:
        state.best_validation_loss = validation_loss
        state.stale_evaluations = 0
        return state
    state.stale_evaluations += 1
    if state.stale_evaluations >= state.patience:
        state.learning_rate *= state.reduction_factor
        state.stale_evaluations = 0
    return state


def gradient_check(loss_and_grads: Callable[[], tuple[float, Mapping[str, np.ndarray]]],
                   params: Params, probe_count: int, rng: np.random.Generator,
                   step: float = 1e-4) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``loss_and_grads`` must read the current values of ``params``; probed
    entries are perturbed in place and restored. A probe whose central
    difference at ``step`` and ``step / 2`` disagree is straddling a ReLU kink
    and is replaced by a fresh draw (at most ``4 * probe_count`` draws).
    """
    _, grads = loss_and_grads()
    grads = {k: np.array(v, copy=True) for k, v in grads.items()}
    names = [n for n in params if params[n].size > 0]
    sizes = np.array([params[n].size for n in names], dtype=float)
    worst = 0.0
    accepted = 0
    for _ in range(4 * probe_count):
        if accepted >= probe_count:
            break
        name = names[rng.choice(len(names), p=sizes / sizes.sum())]
        flat = params[name].reshape(-1)
        idx = int(rng.integers(flat.size))
        numeric = _central_difference(loss_and_grads, flat, idx, step)
        half = _central_difference(loss_and_grads, flat, idx, step / 2)
        if abs(numeric - half) > 1e-6 * max(abs(numeric), abs(half), 1e-3):
            continue
        analytic = float(grads[name].reshape(-1)[idx]) if name in grads else 0.0
        rel = abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-8)
        worst = max(worst, rel)
        accepted += 1
    return worst


def _central_difference(fn, flat: np.ndarray, idx: int, step: float) -> float:
    original = flat[idx]
    flat[idx] = original + step
    plus = fn()[0]
    flat[idx] = original - step
    minus = fn()[0]
    flat[idx] = original
    return (plus - minus) / (2.0 * step)
