"""Binary model container shared by every model type.

Layout (all integers little-endian)::

    magic         8 bytes   b"FMRIDGM\\0"
    version       uint32    currently 1
    header_len    uint32
    header        JSON, UTF-8, sorted keys, compact separators:
                  {"type": "dgm" | "gmm" | "mlp", "hyper": {...},
                   "seed": int | null, "meta": {...}}
    n_arrays      uint32
    n_arrays x:
        name_len  uint16
        name      UTF-8
        ndim      uint8
        shape     ndim x uint64
        data      float64, C order

Arrays are written in the model's fixed parameter order (for networks:
layer by layer, ``W``, ``b``, ``gain``, ``shift``). Nothing time- or
host-dependent is stored, so identical models give identical bytes.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict
from pathlib import Path

import numpy as np

from ._io import atomic_write_bytes

MAGIC = b"FMRIDGM\0"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def encode_checkpoint(kind: str, hyper: dict, arrays: dict, seed=None, meta=None) -> bytes:
    header = json.dumps({"type": kind, "hyper": hyper, "seed": seed, "meta": meta or {}},
                        sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts = [MAGIC, struct.pack("<II", FORMAT_VERSION, len(header)), header, struct.pack("<I", len(arrays))]
    for name, arr in arrays.items():
        arr = np.array(arr, dtype="<f8", order="C")  # keeps 0-d shapes
        if not np.all(np.isfinite(arr)):
            raise CheckpointError(f"array {name!r} holds non-finite values")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<HB", len(raw), arr.ndim) + raw)
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(arr.tobytes())
    return b"".join(parts)


def decode_checkpoint(blob: bytes) -> tuple[dict, dict]:
    if blob[:8] != MAGIC:
        raise CheckpointError("not a model checkpoint (bad magic)")
    version, hlen = struct.unpack_from("<II", blob, 8)
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    pos = 16
    header = json.loads(blob[pos : pos + hlen].decode("utf-8"))
    pos += hlen
    (count,) = struct.unpack_from("<I", blob, pos)
    pos += 4
    arrays = {}
    for _ in range(count):
        nlen, ndim = struct.unpack_from("<HB", blob, pos)
        pos += 3
        name = blob[pos : pos + nlen].decode("utf-8")
        pos += nlen
        shape = struct.unpack_from(f"<{ndim}Q", blob, pos)
        pos += 8 * ndim
        size = int(np.prod(shape)) if ndim else 1
        arrays[name] = np.frombuffer(blob, dtype="<f8", count=size, offset=pos).reshape(shape).astype(np.float64)
        pos += 8 * size
    if pos != len(blob):
        raise CheckpointError("trailing bytes after last array")
    return header, arrays


def save_checkpoint(path, kind, hyper, arrays, seed=None, meta=None):
    atomic_write_bytes(path, encode_checkpoint(kind, hyper, arrays, seed, meta))


def load_checkpoint(path) -> tuple[dict, dict]:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    return decode_checkpoint(path.read_bytes())


# --------------------------------------------------------------------------
# model <-> container


def model_to_container(model):
    from .baselines import GmmPair, MlpClassifier
    from .dgm import DgmModel

    if isinstance(model, DgmModel):
        return "dgm", asdict(model.hyper), model.flat()
    if isinstance(model, MlpClassifier):
        return "mlp", asdict(model.hyper), model.flat()
    if isinstance(model, GmmPair):
        arrays = {}
        for tag, m in (("control", model.model_control), ("patient", model.model_patient)):
            arrays[f"{tag}.weights"] = m.weights
            arrays[f"{tag}.means"] = m.means
            arrays[f"{tag}.covariances"] = m.covariances
        hyper = {"n": model.model_control.n, "n_x": model.model_control.dim, "prior_y": model.prior_y}
        return "gmm", hyper, arrays
    raise TypeError(f"cannot checkpoint {type(model).__name__}")


def model_from_container(header, arrays):
    from .baselines import GmmModel, GmmPair, MlpClassifier, MlpHyper
    from .dgm import DgmHyper, DgmModel

    kind = header.get("type")
    if kind == "dgm":
        return DgmModel.from_flat(DgmHyper(**header["hyper"]), arrays)
    if kind == "mlp":
        return MlpClassifier.from_flat(MlpHyper(**header["hyper"]), arrays)
    if kind == "gmm":
        models = [
            GmmModel(arrays[f"{tag}.weights"], arrays[f"{tag}.means"], arrays[f"{tag}.covariances"])
            for tag in ("control", "patient")
        ]
        return GmmPair(*models, prior_y=header["hyper"].get("prior_y", 0.5))
    raise CheckpointError(f"unknown checkpoint type {kind!r}")


def save_model(path, model, seed=None, meta=None):
    kind, hyper, arrays = model_to_container(model)
    save_checkpoint(path, kind, hyper, arrays, seed, meta)


def load_model(path):
    header, arrays = load_checkpoint(path)
    return model_from_container(header, arrays), header
