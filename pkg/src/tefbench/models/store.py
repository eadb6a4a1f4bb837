"""Self-describing binary container ("TEFM") for models and policy checkpoints.

Layout: magic | kind[4] | version u16 | header_len u32 | header JSON | raw
float64 array payloads in header order. Deterministic given identical inputs.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from ..errors import MissingArtifacts
from .ffnn import FfnnModel
from .gbdt import GbdtModel, Tree
from .linear import LinearModel

MAGIC = b"TEFM"
FORMAT_VERSION = 1

KIND_GBDT = "GBDT"
KIND_LINEAR = "LINR"
KIND_FFNN = "FFNN"
KIND_POLICY = "POLI"


def save_container(path: str | Path, kind: str, meta: dict,
                   arrays: dict[str, np.ndarray]) -> None:
    names = list(arrays)
    header = {
        "meta": meta,
        "arrays": [{"name": n, "shape": list(np.asarray(arrays[n]).shape)} for n in names],
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    out = bytearray()
    out += MAGIC
    out += kind.encode().ljust(4)[:4]
    out += struct.pack("<HI", FORMAT_VERSION, len(blob))
    out += blob
    for n in names:
        out += np.ascontiguousarray(np.asarray(arrays[n], dtype=np.float64)).tobytes()
    Path(path).write_bytes(bytes(out))


def load_container(path: str | Path):
    raw = Path(path).read_bytes()
    if len(raw) < 14 or raw[:4] != MAGIC:
        raise MissingArtifacts(f"{path} is not a TEFM container")
    kind = raw[4:8].decode().strip()
    version, header_len = struct.unpack_from("<HI", raw, 8)
    if version != FORMAT_VERSION:
        raise MissingArtifacts(f"unsupported container version {version}")
    header = json.loads(raw[14:14 + header_len])
    off = 14 + header_len
    arrays = {}
    for entry in header["arrays"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(raw, dtype=np.float64, count=count, offset=off).reshape(shape)
        arrays[entry["name"]] = arr.copy()
        off += count * 8
    return kind, header["meta"], arrays


def save_model(path: str | Path, model, threshold: float | None = None,
               extra_meta: dict | None = None) -> None:
    meta = dict(extra_meta or {})
    if threshold is not None:
        meta["threshold"] = float(threshold)
    arrays: dict[str, np.ndarray] = {}
    if isinstance(model, GbdtModel):
        kind = KIND_GBDT
        meta.update(base_score=model.base_score, shrinkage=model.shrinkage,
                    n_features=model.n_features, n_trees=len(model.trees))
        for i, t in enumerate(model.trees):
            arrays[f"t{i}_feature"] = t.feature
            arrays[f"t{i}_threshold"] = t.threshold
            arrays[f"t{i}_left"] = t.left
            arrays[f"t{i}_right"] = t.right
            arrays[f"t{i}_value"] = t.value
            arrays[f"t{i}_cover"] = t.cover
    elif isinstance(model, LinearModel):
        kind = KIND_LINEAR
        meta.update(bias=model.bias)
        arrays["weights"] = model.weights
    elif isinstance(model, FfnnModel):
        kind = KIND_FFNN
        meta.update(activation=model.activation)
        arrays.update(model.params)
    else:
        raise TypeError(f"cannot serialize model of type {type(model).__name__}")
    save_container(path, kind, meta, arrays)


def load_model(path: str | Path):
    """Returns (model, threshold_or_None, meta)."""
    kind, meta, arrays = load_container(path)
    threshold = meta.get("threshold")
    if kind == KIND_GBDT:
        trees = []
        for i in range(int(meta["n_trees"])):
            trees.append(Tree(
                feature=arrays[f"t{i}_feature"].astype(np.int64),
                threshold=arrays[f"t{i}_threshold"],
                left=arrays[f"t{i}_left"].astype(np.int64),
                right=arrays[f"t{i}_right"].astype(np.int64),
                value=arrays[f"t{i}_value"],
                cover=arrays[f"t{i}_cover"],
            ))
        model = GbdtModel(base_score=float(meta["base_score"]),
                          shrinkage=float(meta["shrinkage"]), trees=trees,
                          n_features=int(meta["n_features"]))
        return model, threshold, meta
    if kind == KIND_LINEAR:
        return LinearModel(arrays["weights"], float(meta["bias"])), threshold, meta
    if kind == KIND_FFNN:
        params = {k: arrays[k] for k in ("W1", "b1", "W2", "b2", "W3", "b3")}
        return FfnnModel(params, meta.get("activation", "relu")), threshold, meta
    raise MissingArtifacts(f"unknown model kind {kind!r} in {path}")
