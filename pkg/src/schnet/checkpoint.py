"""Model checkpoints as numpy ``.npz`` containers.

Layout (format version 1):

    __format__        "schnet-checkpoint"
    __version__       1
    config            JSON text of ModelConfig
    normalizer        float64 [mean, std]
    meta              JSON text, free-form (e.g. the run configuration)
    param/<name>      float64 parameter arrays

Arrays are stored raw, so a save/load round trip is bit-exact.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .data import Normalizer
from .model import ModelConfig, SchNetModel

FORMAT = "schnet-checkpoint"
VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, model: SchNetModel, meta: dict | None = None):
    arrays = {
        "__format__": np.array(FORMAT),
        "__version__": np.array(VERSION),
        "config": np.array(json.dumps(model.config.to_dict(), sort_keys=True)),
        "normalizer": np.array([model.normalizer.mean, model.normalizer.std]),
        "meta": np.array(json.dumps(meta or {}, sort_keys=True)),
    }
    for name, var in model.params.items():
        arrays["param/" + name] = var.value
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path) -> tuple[SchNetModel, dict]:
    """Return the model and the ``meta`` dictionary stored with it."""
    path = Path(path)
    try:
        data = np.load(path, allow_pickle=False)
    except (OSError, ValueError) as exc:
        raise CheckpointError(f"{path}: not a readable checkpoint ({exc})") from None
    with data:
        if "__format__" not in data or str(data["__format__"]) != FORMAT:
            raise CheckpointError(f"{path}: not a {FORMAT} file")
        version = int(data["__version__"])
        if version != VERSION:
            raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
        config = ModelConfig.from_dict(json.loads(str(data["config"])))
        mean, std = data["normalizer"]
        params = {k[len("param/"):]: data[k] for k in data.files if k.startswith("param/")}
        meta = json.loads(str(data["meta"]))
    model = SchNetModel(config, params, Normalizer(float(mean), float(std)))
    return model, meta
