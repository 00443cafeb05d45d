"""Binary checkpoints: magic, version, JSON manifest, then raw little-endian float64 blocks.

Layout::

    b"LOMNI1" | uint32 version | uint64 manifest length | manifest (UTF-8 JSON) | data

The manifest lists ``(name, shape, offset)`` for every stored array, with
offsets in float64 elements from the start of the data block, plus the model
config and optimizer step.
"""

from __future__ import annotations

import json
import struct
from collections import OrderedDict
from pathlib import Path

import numpy as np

from . import tensor as tc
from .backbone import ModelConfig, ModelState, _param_shapes
from .errors import FormatError

MAGIC = b"LOMNI1"
VERSION = 1
_HEADER = struct.Struct("<IQ")


def save(path, state: ModelState, optim=None, extra: dict | None = None) -> None:
    arrays: list[tuple[str, np.ndarray]] = [(f"param/{k}", p.data) for k, p in state.params.items()]
    if optim is not None:
        arrays += [(f"adam.m/{k}", optim.m[k]) for k in state.params]
        arrays += [(f"adam.v/{k}", optim.v[k]) for k in state.params]
    entries, offset = [], 0
    for name, a in arrays:
        entries.append({"name": name, "shape": list(a.shape), "offset": offset})
        offset += a.size
    manifest = {
        "config": state.config.as_dict(),
        "arrays": entries,
        "optimizer": None if optim is None else {"step": optim.step, "beta1": optim.beta1,
                                                 "beta2": optim.beta2, "eps": optim.eps},
        "extra": extra or {},
        "elements": offset,
    }
    blob = json.dumps(manifest, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(_HEADER.pack(VERSION, len(blob)))
        fh.write(blob)
        for _, a in arrays:
            fh.write(np.ascontiguousarray(a, dtype="<f8").tobytes())


def load(path):
    """Returns ``(state, optim or None, extra)``; nothing is built unless the whole file checks out."""
    from .trainer import OptimState

    raw = Path(path).read_bytes()
    if raw[:len(MAGIC)] != MAGIC:
        raise FormatError(f"{path}: not a checkpoint (bad magic)")
    pos = len(MAGIC)
    if len(raw) < pos + _HEADER.size:
        raise FormatError(f"{path}: truncated header")
    version, mlen = _HEADER.unpack_from(raw, pos)
    if version != VERSION:
        raise FormatError(f"{path}: checkpoint version {version}, expected {VERSION}")
    pos += _HEADER.size
    if len(raw) < pos + mlen:
        raise FormatError(f"{path}: truncated manifest")
    try:
        manifest = json.loads(raw[pos:pos + mlen].decode("utf-8"))
        config = ModelConfig(**manifest["config"])
        entries = manifest["arrays"]
        total = int(manifest["elements"])
    except (ValueError, KeyError, TypeError) as exc:
        raise FormatError(f"{path}: unreadable manifest ({exc})") from None
    pos += mlen
    if len(raw) - pos != 8 * total:
        raise FormatError(f"{path}: data block holds {len(raw) - pos} bytes, expected {8 * total}")
    data = np.frombuffer(raw, dtype="<f8", offset=pos, count=total).astype(np.float64)
    arrays = OrderedDict()
    for e in entries:
        shape = tuple(e["shape"])
        size = int(np.prod(shape, dtype=np.int64))
        if e["offset"] + size > total:
            raise FormatError(f"{path}: array {e['name']} runs past the data block")
        arrays[e["name"]] = data[e["offset"]:e["offset"] + size].reshape(shape).copy()

    for key, shape, _ in _param_shapes(config):
        got = arrays.get(f"param/{key}")
        if got is None:
            raise FormatError(f"{path}: parameter {key} missing from the manifest")
        if got.shape != tuple(shape):
            raise FormatError(f"{path}: parameter {key} has shape {got.shape}, expected {tuple(shape)}")
    state = ModelState(config)
    for name, a in arrays.items():
        if name.startswith("param/"):
            key = name[len("param/"):]
            state.params[key] = tc.Tensor(a, requires_grad=True, name=key)
    optim = None
    if manifest.get("optimizer") is not None:
        o = manifest["optimizer"]
        try:
            optim = OptimState({k: arrays[f"adam.m/{k}"] for k in state.params},
                               {k: arrays[f"adam.v/{k}"] for k in state.params},
                               int(o["step"]), o["beta1"], o["beta2"], o["eps"])
        except KeyError as exc:
            raise FormatError(f"{path}: optimizer state lacks {exc}") from None
    return state, optim, manifest.get("extra", {})
