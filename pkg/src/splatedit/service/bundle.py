"""Checkpoint bundles: one directory holding the deployable model trio.

bundle.json records each model's constructor kwargs; <name>.spwt files hold
the weights. A bundle may carry any subset of {lrm, compressor, refiner};
loaders say which members they need.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from ..compress.model import VoxelCompressor
from ..lrm.model import FeatureLRM
from ..refine.ttt import TTTRefiner
from ..tensor.checkpoint import load_weights, save_weights

BUNDLE_FILE = "bundle.json"
_CTORS = {"lrm": FeatureLRM, "compressor": VoxelCompressor,
          "refiner": TTTRefiner}


class BundleError(RuntimeError):
    """Missing or malformed checkpoint bundle."""


def save_bundle(path, models, arch):
    """Write `models` (name -> module) with their ctor kwargs to `path`."""
    unknown = set(models) - set(_CTORS)
    if unknown:
        raise ValueError(f"unknown bundle members: {sorted(unknown)}")
    if set(models) - set(arch):
        raise ValueError("every model needs arch kwargs")
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    meta = {"version": 1, "arch": {k: arch[k] for k in models}}
    (path / BUNDLE_FILE).write_text(json.dumps(meta, indent=2) + "\n")
    for name, module in models.items():
        save_weights(path / f"{name}.spwt", module.state_dict())
    return path


def load_bundle(path, need=None):
    """Rebuild the requested models (default: every member the bundle has);
    returns (models dict, arch dict)."""
    path = Path(path)
    meta_path = path / BUNDLE_FILE
    if not meta_path.is_file():
        raise BundleError(f"no checkpoint bundle at {path}")
    meta = json.loads(meta_path.read_text())
    arch = meta.get("arch", {})
    if need is None:
        need = tuple(sorted(arch))
    models = {}
    for name in need:
        if name not in arch:
            raise BundleError(f"bundle at {path} lacks {name!r}")
        wpath = path / f"{name}.spwt"
        if not wpath.is_file():
            raise BundleError(f"bundle at {path} lacks weights {wpath.name}")
        kwargs = dict(arch[name])
        if "image_size" in kwargs:
            kwargs["image_size"] = tuple(kwargs["image_size"])
        module = _CTORS[name](np.random.default_rng(0), **kwargs)
        module.load_state_dict(load_weights(wpath))
        models[name] = module
    return models, arch
