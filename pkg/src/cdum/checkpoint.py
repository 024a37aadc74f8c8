"""Versioned JSON checkpoints: model metadata plus named row-major parameter arrays."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .errors import CheckpointError

FORMAT = "cdum-checkpoint"
VERSION = 1


def check_param_shapes(template: dict[str, np.ndarray], params: dict[str, np.ndarray]) -> None:
    missing = sorted(set(template) - set(params))
    extra = sorted(set(params) - set(template))
    if missing or extra:
        raise CheckpointError(f"parameter names do not match config (missing {missing}, unexpected {extra})")
    for name, ref in template.items():
        if params[name].shape != ref.shape:
            raise CheckpointError(f"{name}: shape {params[name].shape} != expected {ref.shape}")


def save_model(model, path: str | Path) -> None:
    doc = {
        "format": FORMAT,
        "version": VERSION,
        "model_kind": model.kind,
        **model.to_dict(),
        "params": {
            name: {"shape": list(arr.shape), "values": arr.reshape(-1).tolist()}
            for name, arr in sorted(model.params.items())
        },
    }
    Path(path).write_text(json.dumps(doc, indent=1) + "\n", encoding="utf-8")


def load_model(path: str | Path, expected_kind: str | None = None):
    from .baselines import MetaLearner
    from .cpm import CpmModel
    from .fic import FicModel

    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"{path}: not valid JSON ({exc})") from None
    if doc.get("format") != FORMAT:
        raise CheckpointError(f"{path}: not a {FORMAT} file")
    if doc.get("version") != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {doc.get('version')}")
    kind = doc.get("model_kind")
    if expected_kind is not None and kind != expected_kind:
        raise CheckpointError(f"{path}: expected a {expected_kind!r} checkpoint, found {kind!r}")
    params = {}
    for name, entry in doc["params"].items():
        values = np.asarray(entry["values"], dtype=np.float64)
        shape = tuple(entry["shape"])
        if values.size != int(np.prod(shape)):
            raise CheckpointError(f"{name}: {values.size} values do not fill shape {shape}")
        params[name] = values.reshape(shape)
    classes = {"cpm": CpmModel, "fic": FicModel, "s_learner": MetaLearner, "t_learner": MetaLearner}
    if kind not in classes:
        raise CheckpointError(f"{path}: unknown model kind {kind!r}")
    return classes[kind].from_dict(doc, params)
