"""S-learner and T-learner baselines sharing the CPM embedding front end."""

from __future__ import annotations

import numpy as np

from .checkpoint import check_param_shapes
from .cpm import CpmConfig, arm_mean
from .data import OfflineDataset
from .encoding import FeatureSchema, Normalizer, embed_block, embed_block_backward, fit_normalizer, init_tables
from .errors import ConfigError, EmptyDatasetError, MissingArmError
from .nn import AffineLayer, Params, affine_backward, affine_forward, huber
from .training import History, TrainConfig, fit_minibatch

_LAYERS = (("h1", "relu"), ("h2", "relu"), ("head", "none"))


def _init_mlp(params: Params, prefix: str, schema: FeatureSchema, cfg: CpmConfig,
              with_treatment: bool, rng: np.random.Generator) -> None:
    d = cfg.embedding_dim
    for j, table in enumerate(init_tables(schema.offline, d, rng)):
        params[f"{prefix}emb_x.{j}"] = table
    width = len(schema.offline) * d
    if with_treatment:
        for j, table in enumerate(init_tables(schema.treatment, d, rng)):
            params[f"{prefix}emb_t.{j}"] = table
        width += d
    AffineLayer.init(width, cfg.hidden_dim, "relu", rng).register(params, f"{prefix}h1")
    AffineLayer.init(cfg.hidden_dim, cfg.tower_hidden_dim, "relu", rng).register(params, f"{prefix}h2")
    AffineLayer.init(cfg.tower_hidden_dim, 1, "none", rng).register(params, f"{prefix}head")


class MetaLearner:
    """``variant="S"``: one MLP on [x-embeddings, pooled treatment embedding].
    ``variant="T"``: one independent MLP per treatment arm.
    """

    def __init__(self, variant: str, schema: FeatureSchema, config: CpmConfig,
                 normalizer: Normalizer, canonical_treatments: np.ndarray, params: Params):
        if variant not in ("S", "T"):
            raise ConfigError(f"unknown meta-learner variant {variant!r}")
        self.variant = variant
        self.schema = schema
        self.config = config
        self.normalizer = normalizer
        self.canonical_treatments = np.asarray(canonical_treatments, dtype=np.float64)
        self.params = params

    @property
    def kind(self) -> str:
        return "s_learner" if self.variant == "S" else "t_learner"

    @classmethod
    def init(cls, variant, schema, config, normalizer, canonical, rng) -> "MetaLearner":
        params: Params = {}
        if variant == "S":
            _init_mlp(params, "", schema, config, True, rng)
        else:
            for k in range(config.treatment_count + 1):
                _init_mlp(params, f"arm{k}.", schema, config, False, rng)
        return cls(variant, schema, config, normalizer, canonical, params)

    def _prefix(self, arm: int | None) -> str:
        return "" if self.variant == "S" else f"arm{arm}."

    def _layer(self, prefix: str, name: str, act: str) -> AffineLayer:
        return AffineLayer(self.params[f"{prefix}{name}.W"], self.params[f"{prefix}{name}.b"], act)

    def _tables(self, prefix: str, block: str, n: int) -> list[np.ndarray]:
        return [self.params[f"{prefix}emb_{block}.{j}"] for j in range(n)]

    def forward(self, xn: np.ndarray, tn: np.ndarray | None, arm: int | None = None):
        prefix = self._prefix(arm)
        n = xn.shape[0]
        parts = [embed_block(xn, self.schema.offline, self._tables(prefix, "x", len(self.schema.offline))).reshape(n, -1)]
        if self.variant == "S":
            et = embed_block(tn, self.schema.treatment, self._tables(prefix, "t", len(self.schema.treatment)))
            parts.append(et.mean(axis=1))
        inp = np.concatenate(parts, axis=1)
        acts = [inp]
        for name, act in _LAYERS:
            acts.append(affine_forward(acts[-1], self._layer(prefix, name, act)))
        return acts[-1][:, 0], {"xn": xn, "tn": tn, "acts": acts, "prefix": prefix}

    def backward(self, cache: dict, dy: np.ndarray) -> Params:
        prefix, acts = cache["prefix"], cache["acts"]
        grads: Params = {}
        upstream = dy[:, None]
        for i in range(len(_LAYERS) - 1, -1, -1):
            name, act = _LAYERS[i]
            upstream, gw, gb = affine_backward(acts[i], self._layer(prefix, name, act), upstream,
                                               output=acts[i + 1])
            grads[f"{prefix}{name}.W"] = gw
            grads[f"{prefix}{name}.b"] = gb
        n, nx = dy.shape[0], len(self.schema.offline)
        d = self.config.embedding_dim
        d_x = upstream[:, :nx * d].reshape(n, nx, d)
        for j, g in enumerate(embed_block_backward(cache["xn"], self.schema.offline,
                                                   self._tables(prefix, "x", nx), d_x)):
            grads[f"{prefix}emb_x.{j}"] = g
        if self.variant == "S":
            nt = len(self.schema.treatment)
            d_t = np.repeat((upstream[:, nx * d:] / nt)[:, None, :], nt, axis=1)
            for j, g in enumerate(embed_block_backward(cache["tn"], self.schema.treatment,
                                                       self._tables(prefix, "t", nt), d_t)):
                grads[f"{prefix}emb_t.{j}"] = g
        return grads

    def predict_all(self, x: np.ndarray) -> np.ndarray:
        xn = self.normalizer.apply_x(np.atleast_2d(x))
        n = xn.shape[0]
        k1 = self.config.treatment_count + 1
        out = np.empty((n, k1))
        canon = self.normalizer.apply_t(self.canonical_treatments)
        for k in range(k1):
            if self.variant == "S":
                out[:, k] = self.forward(xn, np.repeat(canon[k:k + 1], n, axis=0))[0]
            else:
                out[:, k] = self.forward(xn, None, arm=k)[0]
        return out

    def to_dict(self) -> dict:
        return {
            "variant": self.variant,
            "config": self.config.to_dict(),
            "schema": self.schema.to_dict(),
            "normalizer": self.normalizer.to_dict(),
            "canonical_treatments": self.canonical_treatments.tolist(),
        }

    @classmethod
    def from_dict(cls, meta: dict, params: Params) -> "MetaLearner":
        schema = FeatureSchema.from_dict(meta["schema"])
        config = CpmConfig(**meta["config"])
        normalizer = Normalizer.from_dict(meta["normalizer"], schema)
        canon = np.asarray(meta["canonical_treatments"], dtype=np.float64)
        template = cls.init(meta["variant"], schema, config, normalizer, canon, np.random.default_rng(0))
        check_param_shapes(template.params, params)
        return cls(meta["variant"], schema, config, normalizer, canon, params)


def _loss_and_grads(model: MetaLearner, xn, tn, y, delta, arm=None):
    pred, cache = model.forward(xn, tn, arm)
    loss, d = huber(pred - y, delta)
    return float(loss.mean()), model.backward(cache, d / y.shape[0])


def meta_learner_fit(train: OfflineDataset, val: OfflineDataset, variant: str, config: CpmConfig,
                     train_cfg: TrainConfig | None = None, seed: int = 0) -> tuple[MetaLearner, list[History]]:
    train_cfg = train_cfg or TrainConfig()
    if len(train) == 0 or len(val) == 0:
        raise EmptyDatasetError("meta-learner needs non-empty train and validation splits")
    rng = np.random.default_rng(seed)
    normalizer = fit_normalizer(train.x, train.t, train.schema)
    model = MetaLearner.init(variant, train.schema, config, normalizer, train.canonical_treatments, rng)
    if variant == "S":
        model.params["head.b"][:] = train.y.mean()
    else:
        for k in range(config.treatment_count + 1):
            model.params[f"arm{k}.head.b"][:] = arm_mean(train, k)
    xn, tn = normalizer.apply_x(train.x), normalizer.apply_t(train.t)
    vxn, vtn = normalizer.apply_x(val.x), normalizer.apply_t(val.t)
    if variant == "S":
        hist = fit_minibatch(
            model.params,
            lambda idx, delta: _loss_and_grads(model, xn[idx], tn[idx], train.y[idx], delta),
            lambda delta: float(huber(model.forward(vxn, vtn)[0] - val.y, delta)[0].mean()),
            len(train), train_cfg, rng)
        return model, [hist]
    histories = []
    for k in range(config.treatment_count + 1):
        rows, vrows = np.flatnonzero(train.treatment == k), np.flatnonzero(val.treatment == k)
        if rows.size == 0 or vrows.size == 0:
            split = "training" if rows.size == 0 else "validation"
            raise MissingArmError(f"T-learner: treatment arm {k} has no {split} instances")
        prefix = f"arm{k}."
        arm_params = {name: p for name, p in model.params.items() if name.startswith(prefix)}
        ax, ay, vx, vy = xn[rows], train.y[rows], vxn[vrows], val.y[vrows]
        histories.append(fit_minibatch(
            arm_params,
            lambda idx, delta, ax=ax, ay=ay, k=k: _loss_and_grads(model, ax[idx], None, ay[idx], delta, k),
            lambda delta, vx=vx, vy=vy, k=k: float(huber(model.forward(vx, None, k)[0] - vy, delta)[0].mean()),
            rows.size, train_cfg, rng))
    return model, histories
