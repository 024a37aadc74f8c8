"""Offline multi-treatment preference network.

Layout of one forward pass::

    x -> per-feature embeddings -> concat ---------> experts f_1..f_M
    t -> per-feature embeddings -> mean -> guidance -> shared softmax gate
                                        -> indicator  (mask)
    mixed = sum_m gate_m * f_m
    y_k   = head_k(indicator * view_k(hidden_k(mixed)))

Each instance only reaches the tower of the treatment it received, so the
other towers get exactly zero gradient from it. Predictions for all
treatments are obtained by sweeping canonical treatment vectors through the
same network.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .data import OfflineDataset, OfflineInstance
from .encoding import (FeatureSchema, Normalizer, embed_block, embed_block_backward,
                       fit_normalizer, init_tables)
from .checkpoint import check_param_shapes
from .errors import ConfigError, EmptyDatasetError, NumericError, TreatmentIndexError
from .nn import AffineLayer, Params, affine_backward, affine_forward, huber
from .training import History, TrainConfig, fit_minibatch


@dataclass
class CpmConfig:
    treatment_count: int
    expert_count: int = 3
    embedding_dim: int = 32
    hidden_dim: int = 64
    view_dim: int = 32
    tower_hidden_dim: int = 64
    use_indicator: bool = True
    use_guidance: bool = True

    def __post_init__(self):
        if self.treatment_count < 1 or self.expert_count < 1:
            raise ConfigError("treatment_count and expert_count must be >= 1")
        if min(self.embedding_dim, self.hidden_dim, self.view_dim, self.tower_hidden_dim) < 1:
            raise ConfigError("all CPM dimensions must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)


class CpmModel:
    kind = "cpm"

    def __init__(self, schema: FeatureSchema, config: CpmConfig, normalizer: Normalizer,
                 canonical_treatments: np.ndarray, params: Params):
        if schema.treatment_count != config.treatment_count:
            raise ConfigError(
                f"schema has {schema.treatment_count} treatments, config {config.treatment_count}"
            )
        self.schema = schema
        self.config = config
        self.normalizer = normalizer
        self.canonical_treatments = np.asarray(canonical_treatments, dtype=np.float64)
        self.params = params

    @classmethod
    def init(cls, schema: FeatureSchema, config: CpmConfig, normalizer: Normalizer,
             canonical_treatments: np.ndarray, rng: np.random.Generator) -> "CpmModel":
        c = config
        d = c.embedding_dim
        params: Params = {}
        for j, table in enumerate(init_tables(schema.offline, d, rng)):
            params[f"emb_x.{j}"] = table
        for j, table in enumerate(init_tables(schema.treatment, d, rng)):
            params[f"emb_t.{j}"] = table
        x_width = len(schema.offline) * d
        views = (["gui"] if c.use_guidance else []) + (["ind"] if c.use_indicator else [])
        for v in views:
            AffineLayer.init(d, c.hidden_dim, "relu", rng).register(params, f"{v}.hidden")
            AffineLayer.init(c.hidden_dim, c.view_dim, "sigmoid", rng).register(params, f"{v}.out")
        for m in range(c.expert_count):
            AffineLayer.init(x_width, c.hidden_dim, "relu", rng).register(params, f"expert{m}.hidden")
            AffineLayer.init(c.hidden_dim, c.view_dim, "sigmoid", rng).register(params, f"expert{m}.out")
        gate_in = c.view_dim if c.use_guidance else x_width
        AffineLayer.init(gate_in, c.expert_count, "softmax", rng).register(params, "gate")
        for k in range(c.treatment_count + 1):
            AffineLayer.init(c.view_dim, c.tower_hidden_dim, "relu", rng).register(params, f"tower{k}.hidden")
            AffineLayer.init(c.tower_hidden_dim, c.view_dim, "sigmoid", rng).register(params, f"tower{k}.view")
            AffineLayer.init(c.view_dim, 1, "none", rng).register(params, f"tower{k}.head")
        return cls(schema, config, normalizer, canonical_treatments, params)

    # -- parameter views -------------------------------------------------

    def layer(self, name: str, activation: str) -> AffineLayer:
        return AffineLayer(self.params[f"{name}.W"], self.params[f"{name}.b"], activation)

    @property
    def x_tables(self) -> list[np.ndarray]:
        return [self.params[f"emb_x.{j}"] for j in range(len(self.schema.offline))]

    @property
    def t_tables(self) -> list[np.ndarray]:
        return [self.params[f"emb_t.{j}"] for j in range(len(self.schema.treatment))]

    def tower_params(self, k: int) -> list[str]:
        """Names of parameters used only by tower ``k``."""
        return [f"tower{k}.{part}.{wb}" for part in ("hidden", "view", "head") for wb in "Wb"]

    # -- forward pieces ---------------------------------------------------

    def encode(self, xn: np.ndarray, tn: np.ndarray):
        ex = embed_block(xn, self.schema.offline, self.x_tables)
        et = embed_block(tn, self.schema.treatment, self.t_tables)
        return ex.reshape(ex.shape[0], -1), et.mean(axis=1)

    def _view(self, name: str, et_star: np.ndarray):
        h = affine_forward(et_star, self.layer(f"{name}.hidden", "relu"))
        return h, affine_forward(h, self.layer(f"{name}.out", "sigmoid"))

    def treatment_views(self, et_star: np.ndarray):
        """Guidance and indicator vectors (``None`` for an ablated view)."""
        gui = self._view("gui", et_star)[1] if self.config.use_guidance else None
        ind = self._view("ind", et_star)[1] if self.config.use_indicator else None
        return gui, ind

    def experts(self, ex_star: np.ndarray):
        hs, fs = [], []
        for m in range(self.config.expert_count):
            h = affine_forward(ex_star, self.layer(f"expert{m}.hidden", "relu"))
            hs.append(h)
            fs.append(affine_forward(h, self.layer(f"expert{m}.out", "sigmoid")))
        return hs, np.stack(fs, axis=1)

    def gate(self, gate_in: np.ndarray) -> np.ndarray:
        return affine_forward(gate_in, self.layer("gate", "softmax"))

    def tower(self, k: int, mixed: np.ndarray, ind: np.ndarray | None):
        a = affine_forward(mixed, self.layer(f"tower{k}.hidden", "relu"))
        v = affine_forward(a, self.layer(f"tower{k}.view", "sigmoid"))
        masked = v * ind if ind is not None else v
        y = affine_forward(masked, self.layer(f"tower{k}.head", "none"))[:, 0]
        return a, v, masked, y

    def forward(self, xn: np.ndarray, tn: np.ndarray):
        """Prediction at each row's own tower plus a cache for :meth:`backward`."""
        k_max = self.config.treatment_count
        arm = tn[:, 0]
        if np.any(arm != np.round(arm)) or np.any(arm < 0) or np.any(arm > k_max):
            bad = arm[(arm != np.round(arm)) | (arm < 0) | (arm > k_max)][0]
            raise TreatmentIndexError(f"treatment index {bad} outside [0, {k_max}]")
        arm = arm.astype(np.int64)
        ex_star, et_star = self.encode(xn, tn)
        cache = {"xn": xn, "tn": tn, "arm": arm, "ex_star": ex_star, "et_star": et_star}
        if self.config.use_guidance:
            cache["gui_h"], cache["gui"] = self._view("gui", et_star)
        if self.config.use_indicator:
            cache["ind_h"], cache["ind"] = self._view("ind", et_star)
        cache["exp_h"], cache["f"] = self.experts(ex_star)
        cache["gate_in"] = cache["gui"] if self.config.use_guidance else ex_star
        g = self.gate(cache["gate_in"])
        mixed = np.einsum("nm,nmd->nd", g, cache["f"])
        cache["g"], cache["mixed"] = g, mixed
        y = np.empty(xn.shape[0])
        towers = {}
        for k in range(k_max + 1):
            rows = np.flatnonzero(arm == k)
            if rows.size == 0:
                continue
            ind = cache["ind"][rows] if self.config.use_indicator else None
            a, v, masked, yk = self.tower(k, mixed[rows], ind)
            towers[k] = (rows, a, v, masked)
            y[rows] = yk
        cache["towers"] = towers
        return y, cache

    def backward(self, cache: dict, dy: np.ndarray) -> Params:
        c = self.config
        n = dy.shape[0]
        grads: Params = {k: np.zeros_like(v) for k, v in self.params.items()}
        d_mixed = np.zeros_like(cache["mixed"])
        d_ind = np.zeros((n, c.view_dim)) if c.use_indicator else None
        for k, (rows, a, v, masked) in cache["towers"].items():
            dyk = dy[rows][:, None]
            head = self.layer(f"tower{k}.head", "none")
            d_masked, gw, gb = affine_backward(masked, head, dyk, output=None)
            grads[f"tower{k}.head.W"] += gw
            grads[f"tower{k}.head.b"] += gb
            if c.use_indicator:
                d_ind[rows] = d_masked * v
                d_v = d_masked * cache["ind"][rows]
            else:
                d_v = d_masked
            d_a, gw, gb = affine_backward(a, self.layer(f"tower{k}.view", "sigmoid"), d_v, output=v)
            grads[f"tower{k}.view.W"] += gw
            grads[f"tower{k}.view.b"] += gb
            d_mix_rows, gw, gb = affine_backward(cache["mixed"][rows], self.layer(f"tower{k}.hidden", "relu"),
                                                 d_a, output=a)
            grads[f"tower{k}.hidden.W"] += gw
            grads[f"tower{k}.hidden.b"] += gb
            d_mixed[rows] = d_mix_rows

        f, g = cache["f"], cache["g"]
        d_g = np.einsum("nd,nmd->nm", d_mixed, f)
        d_gate_in, gw, gb = affine_backward(cache["gate_in"], self.layer("gate", "softmax"), d_g, output=g)
        grads["gate.W"] += gw
        grads["gate.b"] += gb

        ex_star = cache["ex_star"]
        d_ex = np.zeros_like(ex_star)
        if not c.use_guidance:
            d_ex += d_gate_in
        for m in range(c.expert_count):
            d_fm = g[:, m:m + 1] * d_mixed
            d_h, gw, gb = affine_backward(cache["exp_h"][m], self.layer(f"expert{m}.out", "sigmoid"),
                                          d_fm, output=f[:, m, :])
            grads[f"expert{m}.out.W"] += gw
            grads[f"expert{m}.out.b"] += gb
            d_in, gw, gb = affine_backward(ex_star, self.layer(f"expert{m}.hidden", "relu"), d_h,
                                           output=cache["exp_h"][m])
            grads[f"expert{m}.hidden.W"] += gw
            grads[f"expert{m}.hidden.b"] += gb
            d_ex += d_in

        et_star = cache["et_star"]
        d_et = np.zeros_like(et_star)
        for name, d_out in (("gui", d_gate_in if c.use_guidance else None), ("ind", d_ind)):
            if d_out is None:
                continue
            h = cache[f"{name}_h"]
            d_h, gw, gb = affine_backward(h, self.layer(f"{name}.out", "sigmoid"), d_out, output=cache[name])
            grads[f"{name}.out.W"] += gw
            grads[f"{name}.out.b"] += gb
            d_in, gw, gb = affine_backward(et_star, self.layer(f"{name}.hidden", "relu"), d_h, output=h)
            grads[f"{name}.hidden.W"] += gw
            grads[f"{name}.hidden.b"] += gb
            d_et += d_in

        n_x, n_t = len(self.schema.offline), len(self.schema.treatment)
        d_ex3 = d_ex.reshape(n, n_x, -1)
        for j, gj in enumerate(embed_block_backward(cache["xn"], self.schema.offline, self.x_tables, d_ex3)):
            grads[f"emb_x.{j}"] += gj
        d_et3 = np.repeat((d_et / n_t)[:, None, :], n_t, axis=1)
        for j, gj in enumerate(embed_block_backward(cache["tn"], self.schema.treatment, self.t_tables, d_et3)):
            grads[f"emb_t.{j}"] += gj
        return grads

    # -- public API ---------------------------------------------------------

    def normalize(self, x: np.ndarray, t: np.ndarray):
        return self.normalizer.apply_x(x), self.normalizer.apply_t(t)

    def predict_own(self, x: np.ndarray, t: np.ndarray) -> np.ndarray:
        """Prediction at the tower of each row's recorded treatment."""
        xn, tn = self.normalize(np.atleast_2d(x), np.atleast_2d(t))
        return self.forward(xn, tn)[0]

    def predict_all(self, x: np.ndarray) -> np.ndarray:
        """``(N, K + 1)`` preference scores from a canonical treatment sweep."""
        xn = self.normalizer.apply_x(np.atleast_2d(x))
        n = xn.shape[0]
        ex_star = embed_block(xn, self.schema.offline, self.x_tables).reshape(n, -1)
        _, f = self.experts(ex_star)
        tn_all = self.normalizer.apply_t(self.canonical_treatments)
        et_all = embed_block(tn_all, self.schema.treatment, self.t_tables).mean(axis=1)
        gui_all, ind_all = self.treatment_views(et_all)
        out = np.empty((n, self.config.treatment_count + 1))
        if not self.config.use_guidance:
            g_user = self.gate(ex_star)
            mixed_user = np.einsum("nm,nmd->nd", g_user, f)
        for k in range(self.config.treatment_count + 1):
            if self.config.use_guidance:
                g = self.gate(gui_all[k:k + 1])
                mixed = np.einsum("m,nmd->nd", g[0], f)
            else:
                mixed = mixed_user
            ind = None if ind_all is None else np.broadcast_to(ind_all[k], (n, ind_all.shape[1]))
            out[:, k] = self.tower(k, mixed, ind)[3]
        return out

    def to_dict(self) -> dict:
        return {
            "config": self.config.to_dict(),
            "schema": self.schema.to_dict(),
            "normalizer": self.normalizer.to_dict(),
            "canonical_treatments": self.canonical_treatments.tolist(),
        }

    @classmethod
    def from_dict(cls, meta: dict, params: Params) -> "CpmModel":
        schema = FeatureSchema.from_dict(meta["schema"])
        config = CpmConfig(**meta["config"])
        normalizer = Normalizer.from_dict(meta["normalizer"], schema)
        canon = np.asarray(meta["canonical_treatments"], dtype=np.float64)
        template = cls.init(schema, config, normalizer, canon, np.random.default_rng(0)).params
        check_param_shapes(template, params)
        return cls(schema, config, normalizer, canon, params)


def extract_treatment_views(et_star: np.ndarray, model: CpmModel):
    return model.treatment_views(np.atleast_2d(et_star))


def cpm_forward(instance: OfflineInstance, model: CpmModel) -> float:
    return float(model.predict_own(instance.x, instance.t)[0])


def cpm_loss_and_grads(batch: OfflineDataset, model: CpmModel, delta: float = 1.0):
    """Mean Huber loss over the batch at each row's own tower, and its gradients."""
    if len(batch) == 0:
        raise EmptyDatasetError("empty batch")
    xn, tn = model.normalize(batch.x, batch.t)
    return _loss_and_grads(model, xn, tn, batch.y, delta)


def _loss_and_grads(model: CpmModel, xn, tn, y, delta):
    pred, cache = model.forward(xn, tn)
    loss, dloss = huber(pred - y, delta)
    total = float(loss.mean())
    if not np.isfinite(total):
        raise NumericError("non-finite CPM loss")
    return total, model.backward(cache, dloss / y.shape[0])


def _huber_mean(model: CpmModel, xn, tn, y, delta) -> float:
    pred = model.forward(xn, tn)[0]
    return float(huber(pred - y, delta)[0].mean())


def arm_mean(ds: OfflineDataset, k: int) -> float:
    rows = ds.treatment == k
    return float(ds.y[rows].mean() if rows.any() else ds.y.mean())


def cpm_fit(train: OfflineDataset, val: OfflineDataset, config: CpmConfig,
            train_cfg: TrainConfig | None = None, seed: int = 0) -> tuple[CpmModel, History]:
    train_cfg = train_cfg or TrainConfig()
    if len(train) == 0 or len(val) == 0:
        raise EmptyDatasetError("CPM needs non-empty train and validation splits")
    rng = np.random.default_rng(seed)
    normalizer = fit_normalizer(train.x, train.t, train.schema)
    model = CpmModel.init(train.schema, config, normalizer, train.canonical_treatments, rng)
    # start each head at its arm's mean response so the sigmoid views need not saturate to reach it
    for k in range(config.treatment_count + 1):
        model.params[f"tower{k}.head.b"][:] = arm_mean(train, k)
    xn, tn = model.normalize(train.x, train.t)
    vxn, vtn = model.normalize(val.x, val.t)
    hist = fit_minibatch(
        model.params,
        lambda idx, delta: _loss_and_grads(model, xn[idx], tn[idx], train.y[idx], delta),
        lambda delta: _huber_mean(model, vxn, vtn, val.y, delta),
        len(train), train_cfg, rng,
    )
    return model, hist


def cpm_predict_all(x: np.ndarray, model: CpmModel) -> np.ndarray:
    return model.predict_all(x)
