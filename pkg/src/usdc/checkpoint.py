"""Versioned binary checkpoints with a human-readable manifest.

Layout (all integers little-endian)::

    magic     8 bytes  b"USDCCKPT"
    version   u32
    meta_len  u32, then meta_len bytes of UTF-8 JSON (sorted keys)
    count     u32
    count x { name_len u16, name, dtype u8, ndim u8, shape u32 x ndim, raw data }

The manifest ``<path>.manifest.json`` repeats the metadata and lists each
tensor's dtype, shape and SHA-256.
"""
from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from .autograd import RngState
from .model import USDCModel
from .static import PrunePlan
from .vit import ViTConfig

MAGIC = b"USDCCKPT"
VERSION = 1
DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("<i8")}
DTYPE_CODES = {v: k for k, v in DTYPES.items()}


class CheckpointError(ValueError):
    """Malformed or incompatible checkpoint."""


def _model_meta(model: USDCModel) -> dict:
    return {
        "vit_config": model.config.to_dict(),
        "stage": model.stage,
        "use_static": model.use_static,
        "use_dynamic": model.use_dynamic,
        "tau_skip": model.tau_skip,
        "tau_search": model.arch.tau_search if model.arch is not None else None,
        "tau_static": model.static.tau_static if model.static is not None else None,
        "fixed_kinds": model.fixed_kinds,
        "gate_kinds": model.gate_kinds,
        "prune_plan": model.plan.to_dict() if model.plan is not None else None,
        "params_before": model.params_before,
    }


def _state_arrays(model: USDCModel) -> dict[str, np.ndarray]:
    arrays = {name: t.data for name, t in model.named_tensors().items()}
    arrays.update({f"buffer:{k}": v for k, v in model.named_buffers().items()})
    return arrays


def save_checkpoint(path, model: USDCModel, rng: RngState | None = None, extra: dict | None = None) -> Path:
    path = Path(path)
    meta = _model_meta(model)
    meta["rng"] = rng.state_dict() if rng is not None else None
    meta["extra"] = extra or {}
    meta_bytes = json.dumps(meta, sort_keys=True, default=_json_default).encode("utf-8")
    arrays = _state_arrays(model)
    manifest = {"format": "usdc-checkpoint", "version": VERSION, "meta": json.loads(meta_bytes), "tensors": []}
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<II", VERSION, len(meta_bytes)))
        f.write(meta_bytes)
        f.write(struct.pack("<I", len(arrays)))
        for name, arr in arrays.items():
            arr = np.ascontiguousarray(arr, dtype=np.asarray(arr).dtype.newbyteorder("<"))
            code = DTYPE_CODES.get(arr.dtype)
            if code is None:
                raise CheckpointError(f"unsupported dtype {arr.dtype} for {name}")
            raw = arr.tobytes()
            nb = name.encode("utf-8")
            f.write(struct.pack("<H", len(nb)))
            f.write(nb)
            f.write(struct.pack("<BB", code, arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(raw)
            manifest["tensors"].append(
                {"name": name, "dtype": str(arr.dtype), "shape": list(arr.shape), "sha256": hashlib.sha256(raw).hexdigest()}
            )
    Path(str(path) + ".manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def _json_default(o):
    if isinstance(o, np.integer):
        return int(o)
    if isinstance(o, np.floating):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"not JSON serializable: {type(o).__name__}")


def read_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    """Raw metadata and arrays."""
    data = Path(path).read_bytes()
    if data[:8] != MAGIC:
        raise CheckpointError(f"{path} is not a USDC checkpoint")
    version, meta_len = struct.unpack_from("<II", data, 8)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    pos = 16
    meta = json.loads(data[pos : pos + meta_len].decode("utf-8"))
    pos += meta_len
    (count,) = struct.unpack_from("<I", data, pos)
    pos += 4
    arrays = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", data, pos)
        pos += 2
        name = data[pos : pos + nlen].decode("utf-8")
        pos += nlen
        code, ndim = struct.unpack_from("<BB", data, pos)
        pos += 2
        shape = struct.unpack_from(f"<{ndim}I", data, pos)
        pos += 4 * ndim
        dtype = DTYPES[code]
        nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        arrays[name] = np.frombuffer(data, dtype=dtype, count=nbytes // dtype.itemsize, offset=pos).reshape(shape).copy()
        pos += nbytes
    if pos != len(data):
        raise CheckpointError(f"{len(data) - pos} trailing bytes in {path}")
    return meta, arrays


def load_checkpoint(path) -> tuple[USDCModel, dict]:
    """Rebuild the model (including pruned structure) and restore every tensor."""
    meta, arrays = read_checkpoint(path)
    config = ViTConfig(**meta["vit_config"])
    model = USDCModel(
        config,
        use_static=meta["use_static"] and meta["stage"] == 1,
        use_dynamic=meta["use_dynamic"],
        tau_skip=meta["tau_skip"],
        tau_search=meta["tau_search"] or 2.0,
        tau_static=meta["tau_static"] or 2.0,
        gate_kinds=meta["fixed_kinds"],
    )
    model.use_static = meta["use_static"]
    model.params_before = meta["params_before"]
    if meta["stage"] == 2:
        model.candidates = []
        model.enter_stage2(PrunePlan.from_dict(meta["prune_plan"]), meta["gate_kinds"])
    tensors = model.named_tensors()
    buffers = model.named_buffers()
    expected = set(tensors) | {f"buffer:{k}" for k in buffers}
    if expected != set(arrays):
        missing = sorted(expected - set(arrays))
        unknown = sorted(set(arrays) - expected)
        raise CheckpointError(f"checkpoint/model mismatch: missing={missing[:5]} unknown={unknown[:5]}")
    for name, t in tensors.items():
        if t.shape != arrays[name].shape:
            raise CheckpointError(f"shape mismatch for {name}: {t.shape} vs {arrays[name].shape}")
        t.data = arrays[name]
    for name, buf in buffers.items():
        buf[...] = arrays[f"buffer:{name}"]
    if meta["stage"] == 2:
        model.report.params = model.n_params()
    meta["rng_state"] = RngState.from_state_dict(meta["rng"]) if meta.get("rng") else None
    return model, meta
