"""DRM1 model checkpoints.

Layout: magic ``DRM1``, u32 format version, u32 length of a UTF-8 JSON
architecture description, the JSON itself, u32 parameter count, then every parameter as
little-endian float64 in the model's declaration order. Shapes follow from
that description, so the file carries no per-tensor headers.
"""
from __future__ import annotations

import json
import struct

import numpy as np

from ..fields import FormatError
from .cascade import CascadeModel
from .model import TinyFCN

__all__ = ["DRM_MAGIC", "DRM_VERSION", "save_checkpoint", "load_checkpoint", "model_from_spec"]

DRM_MAGIC = b"DRM1"
DRM_VERSION = 1


def model_from_spec(spec):
    kind = spec.get("model")
    if kind == "TinyFCN":
        return TinyFCN.from_spec(spec)
    if kind == "CascadeModel":
        return CascadeModel.from_spec(spec)
    raise FormatError(f"unknown model kind {kind!r}")


def _flat(model):
    return model.all_params() if isinstance(model, CascadeModel) else model.params


def _shapes(model):
    layers = model.layers()
    out = {}
    if isinstance(model, CascadeModel):
        out.update({f"stage1.{k}": v for k, v in _shapes(model.stage1).items()})
    for name, layer in layers:
        for p, shape in layer.param_shapes().items():
            out[f"{name}.{p}"] = tuple(shape)
    return out


def save_checkpoint(fp, model) -> None:
    params = _flat(model)
    names = model.param_names()
    missing = [n for n in names if n not in params]
    if missing:
        raise ValueError(f"model has no value for {missing[0]} (not initialized?)")
    spec = json.dumps(model.spec(), sort_keys=True, separators=(",", ":")).encode("utf-8")
    fp.write(DRM_MAGIC)
    fp.write(struct.pack("<II", DRM_VERSION, len(spec)))
    fp.write(spec)
    fp.write(struct.pack("<I", len(names)))
    for n in names:
        a = np.asarray(params[n], dtype="<f8")
        if not np.all(np.isfinite(a)):
            raise ValueError(f"parameter {n} is not finite")
        fp.write(np.ascontiguousarray(a).tobytes())


def load_checkpoint(fp):
    head = fp.read(12)
    if len(head) < 12 or head[:4] != DRM_MAGIC:
        raise FormatError("not a DRM1 checkpoint (bad magic)")
    version, n_spec = struct.unpack("<II", head[4:])
    if version != DRM_VERSION:
        raise FormatError(f"unsupported DRM1 version {version}")
    raw = fp.read(n_spec)
    if len(raw) != n_spec:
        raise FormatError("truncated DRM1 spec")
    try:
        spec = json.loads(raw.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"bad DRM1 spec: {exc}") from None
    model = model_from_spec(spec)
    buf = fp.read(4)
    if len(buf) != 4:
        raise FormatError("truncated DRM1 parameter count")
    (count,) = struct.unpack("<I", buf)
    names = model.param_names()
    if count != len(names):
        raise FormatError(f"DRM1 holds {count} parameters, spec declares {len(names)}")
    shapes = _shapes(model)
    flat = {}
    for n in names:
        shape = shapes[n]
        size = 8 * int(np.prod(shape))
        data = fp.read(size)
        if len(data) != size:
            raise FormatError(f"truncated DRM1 parameter {n}")
        flat[n] = np.frombuffer(data, dtype="<f8").reshape(shape).astype(np.float64)
    if fp.read(1):
        raise FormatError("trailing bytes after DRM1 parameters")
    if isinstance(model, CascadeModel):
        model.set_params(flat)
    else:
        model.params = flat
    return model
