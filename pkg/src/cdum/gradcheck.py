"""Full-graph finite-difference checks on small networks."""

from __future__ import annotations

import numpy as np

from .baselines import MetaLearner
from .cpm import CpmConfig, CpmModel
from .data import default_canonical_treatments
from .encoding import CATEGORICAL, FeatureSchema, FeatureSpec, PaddedSequence, SequenceSpec, fit_normalizer
from .fic import FicConfig, FicModel, RequestBatch
from .nn import gradient_check, huber

TOLERANCE = 1e-4
KINK_MARGIN = 1e-3


def clear_relu_kinks(params, relu_inputs, margin: float = 2 * KINK_MARGIN) -> None:
    """Shift ReLU biases to a well-conditioned probe point.

    Afterwards no batch pre-activation lies within ``margin`` of zero and
    every unit is active on at least half of the rows, which keeps
    gradient entries well above finite-difference roundoff.
    ``relu_inputs()`` runs a forward pass and returns ``{layer_name: input}``
    for every ReLU layer, in forward order; layers are fixed one at a time.
    """
    for name in list(relu_inputs()):
        x = relu_inputs()[name]
        z = x @ params[f"{name}.W"] + params[f"{name}.b"]
        for j in range(z.shape[1]):
            col = z[:, j]
            median = np.sort(col)[(col.size - 1) // 2]
            base = max(0.0, 0.1 - median)
            for shift in base + np.linspace(0.0, 0.5, 201):
                if np.all(np.abs(col + shift) > margin):
                    params[f"{name}.b"][0, j] += shift
                    break


def mini_cpm(seed: int = 0, use_indicator: bool = True, use_guidance: bool = True, batch: int = 12):
    """f_x=5, f_t=2, K=2, M=2, d=4 network with a random batch."""
    rng = np.random.default_rng(seed)
    schema = FeatureSchema(
        offline=tuple(FeatureSpec(f"x{j}") for j in range(5)) + (FeatureSpec("device", CATEGORICAL, 3),),
        treatment=(FeatureSpec("treatment", CATEGORICAL, 3), FeatureSpec("t1"), FeatureSpec("t2")),
    )
    cfg = CpmConfig(treatment_count=2, expert_count=2, embedding_dim=4, hidden_dim=6, view_dim=5,
                    tower_hidden_dim=6, use_indicator=use_indicator, use_guidance=use_guidance)
    x = np.column_stack([rng.normal(size=(batch, 5)), rng.integers(3, size=batch)])
    arm = np.arange(batch) % 3
    canon = default_canonical_treatments(schema)
    canon[1:, 1] = [0.2, 0.3]
    canon[1:, 2] = [0.5, 1.0]
    t = canon[arm]
    norm = fit_normalizer(x, t, schema)
    model = CpmModel.init(schema, cfg, norm, canon, rng)
    for name, p in model.params.items():
        if name.endswith(".b"):
            p += rng.normal(0.0, 0.1, size=p.shape)
    xn, tn = norm.apply_x(x), norm.apply_t(t)
    clear_relu_kinks(model.params, lambda: _cpm_relu_inputs(model, xn, tn))
    # mostly quadratic-branch residuals, with a couple beyond delta
    y = model.forward(xn, tn)[0] + rng.normal(0.0, 0.6, size=batch)
    return model, xn, tn, y


def _cpm_relu_inputs(model: CpmModel, xn, tn) -> dict:
    _, cache = model.forward(xn, tn)
    out = {}
    for v in ("gui", "ind"):
        if f"{v}_h" in cache:
            out[f"{v}.hidden"] = cache["et_star"]
    for m in range(model.config.expert_count):
        out[f"expert{m}.hidden"] = cache["ex_star"]
    for k, (rows, *_) in cache["towers"].items():
        out[f"tower{k}.hidden"] = cache["mixed"][rows]
    return out


def cpm_loss_closure(model: CpmModel, xn, tn, y, delta: float = 1.0):
    def fn():
        pred, cache = model.forward(xn, tn)
        loss, d = huber(pred - y, delta)
        return float(loss.mean()), model.backward(cache, d / y.size)
    return fn


def mini_fic(seed: int = 0, batch: int = 10):
    rng = np.random.default_rng(seed)
    specs = (SequenceSpec("history", 4, 6), SequenceSpec("hour", 24, 1), SequenceSpec("device", 3, 1))
    cfg = FicConfig(task_count=3, expert_count=2, embedding_dim=4, hidden_dim=6, expert_dim=5, tower_hidden_dim=6)
    lengths = rng.integers(0, 7, size=batch)
    hist = [list(rng.integers(4, size=n)) for n in lengths]
    seqs = [PaddedSequence.from_lists(hist, specs[0]),
            PaddedSequence.from_lists([[int(v)] for v in rng.integers(24, size=batch)], specs[1]),
            PaddedSequence.from_lists([[int(v)] for v in rng.integers(3, size=batch)], specs[2])]
    model = FicModel.init(specs, cfg, rng)
    for name, p in model.params.items():
        if name.endswith(".b"):
            p += rng.normal(0.0, 0.1, size=p.shape)
    batch = RequestBatch(seqs, None)
    clear_relu_kinks(model.params, lambda: _fic_relu_inputs(model, batch))
    batch.labels = model.forward(batch)[0] + rng.normal(0.0, 0.6, size=(len(batch), 3))
    return model, batch


def _fic_relu_inputs(model: FicModel, batch: RequestBatch) -> dict:
    _, cache = model.forward(batch)
    out = {}
    for m in range(model.config.expert_count):
        out[f"expert{m}.hidden"] = cache["e"]
        out[f"expert{m}.out"] = cache["exp_h"][m]
    for k, (mixed, _) in enumerate(cache["towers"]):
        out[f"tower{k}.hidden"] = mixed
    return out


def fic_loss_closure(model: FicModel, batch: RequestBatch, delta: float = 1.0):
    def fn():
        pred, cache = model.forward(batch)
        loss, d = huber(pred - batch.labels, delta)
        return float(loss.mean(axis=0).sum()), model.backward(cache, d / len(batch))
    return fn


def run_all(probe_count: int = 300, seed: int = 0) -> dict[str, float]:
    """Max relative error for each mini graph."""
    results = {}
    for label, kw in (("cpm", {}), ("cpm_no_indicator", {"use_indicator": False}),
                      ("cpm_no_guidance", {"use_guidance": False})):
        model, xn, tn, y = mini_cpm(seed, **kw)
        results[label] = gradient_check(cpm_loss_closure(model, xn, tn, y), model.params, probe_count,
                                        np.random.default_rng(seed + 1))
    model, batch = mini_fic(seed)
    results["fic"] = gradient_check(fic_loss_closure(model, batch), model.params, probe_count,
                                    np.random.default_rng(seed + 2))
    for variant in ("S", "T"):
        cpm, xn, tn, y = mini_cpm(seed)
        ml = MetaLearner.init(variant, cpm.schema, cpm.config, cpm.normalizer, cpm.canonical_treatments,
                              np.random.default_rng(seed + 3))
        arm = None if variant == "S" else 1

        def fn(ml=ml, arm=arm):
            pred, cache = ml.forward(xn, tn, arm)
            loss, d = huber(pred - y, 1.0)
            return float(loss.mean()), ml.backward(cache, d / y.size)
        params = ml.params if variant == "S" else {k: v for k, v in ml.params.items() if k.startswith("arm1.")}
        results[f"{variant.lower()}_learner"] = gradient_check(fn, params, probe_count // 2,
                                                               np.random.default_rng(seed + 4))
    return results
