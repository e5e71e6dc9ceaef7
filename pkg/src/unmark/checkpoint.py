"""Checkpoint container.

Binary layout, all integers little-endian::

    magic      8 bytes   b"UNMARKCK"
    version    uint32    FORMAT_VERSION
    meta_len   uint32
    meta       meta_len bytes of UTF-8 JSON (architecture, run config, counters)
    count      uint32    number of tensors
    count times:
      name_len uint16, name (UTF-8)
      ndim     uint8,  dims (uint32 each)
      payload  float32 x prod(dims)

Tensor names: ``model/<parameter name>`` for network weights and
``optim/<parameter name>/{exp_avg,exp_avg_sq}`` for Adam moments. Adam step
counts live in ``meta["optim_steps"]``.
"""

from __future__ import annotations

import json
import os
import struct

import numpy as np
import torch

from .errors import CheckpointError, VersionError
from .networks import ArchConfig, WatermarkRemover

MAGIC = b"UNMARKCK"
FORMAT_VERSION = 1


def write(path, tensors: dict, meta: dict) -> None:
    blob = json.dumps(meta, sort_keys=True).encode()
    tmp = f"{path}.tmp"
    try:
        d = os.path.dirname(os.fspath(path))
        if d:
            os.makedirs(d, exist_ok=True)
        with open(tmp, "wb") as fh:
            fh.write(MAGIC)
            fh.write(struct.pack("<II", FORMAT_VERSION, len(blob)))
            fh.write(blob)
            fh.write(struct.pack("<I", len(tensors)))
            for name, t in tensors.items():
                arr = np.ascontiguousarray(t.detach().cpu().numpy() if isinstance(t, torch.Tensor) else t,
                                           dtype="<f4")
                nb = name.encode()
                fh.write(struct.pack("<H", len(nb)))
                fh.write(nb)
                fh.write(struct.pack("<B", arr.ndim))
                fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
                fh.write(arr.tobytes())
        os.replace(tmp, path)
    except OSError as exc:
        raise CheckpointError(f"cannot write checkpoint {path}: {exc}") from exc


def read(path) -> tuple[dict, dict]:
    """Return (meta, {name: float32 tensor})."""
    try:
        with open(path, "rb") as fh:
            data = fh.read()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if data[:8] != MAGIC:
        raise VersionError(f"{path} is not an unmark checkpoint")
    version, meta_len = struct.unpack_from("<II", data, 8)
    if version != FORMAT_VERSION:
        raise VersionError(f"{path}: checkpoint format v{version}, this build reads v{FORMAT_VERSION}")
    off = 16
    try:
        meta = json.loads(data[off:off + meta_len])
        off += meta_len
        (count,) = struct.unpack_from("<I", data, off)
        off += 4
        tensors = {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", data, off)
            off += 2
            name = data[off:off + nlen].decode()
            off += nlen
            (ndim,) = struct.unpack_from("<B", data, off)
            off += 1
            dims = struct.unpack_from(f"<{ndim}I", data, off)
            off += 4 * ndim
            n = int(np.prod(dims)) if ndim else 1
            arr = np.frombuffer(data, dtype="<f4", count=n, offset=off).reshape(dims)
            off += 4 * n
            tensors[name] = torch.from_numpy(arr.astype(np.float32))
    except (struct.error, ValueError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"{path} is truncated or corrupt: {exc}") from exc
    return meta, tensors


def model_tensors(model: torch.nn.Module) -> dict:
    return {f"model/{k}": v for k, v in model.state_dict().items()}


def optimizer_tensors(model: torch.nn.Module, optimizer: torch.optim.Optimizer) -> tuple[dict, dict]:
    names = {id(p): n for n, p in model.named_parameters()}
    tensors, steps = {}, {}
    for group in optimizer.param_groups:
        for p in group["params"]:
            st = optimizer.state.get(p)
            if not st:
                continue
            n = names[id(p)]
            tensors[f"optim/{n}/exp_avg"] = st["exp_avg"]
            tensors[f"optim/{n}/exp_avg_sq"] = st["exp_avg_sq"]
            steps[n] = float(st["step"])
    return tensors, steps


def save(path, model: WatermarkRemover, meta: dict | None = None, optimizer=None) -> None:
    meta = dict(meta or {})
    meta["arch"] = model.arch.to_dict()
    tensors = model_tensors(model)
    if optimizer is not None:
        opt_t, steps = optimizer_tensors(model, optimizer)
        tensors.update(opt_t)
        meta["optim_steps"] = steps
    write(path, tensors, meta)


def build_model(meta: dict, tensors: dict, arch: ArchConfig | None = None) -> WatermarkRemover:
    stored = ArchConfig(**meta["arch"])
    if arch is not None and arch.to_dict() != stored.to_dict():
        raise VersionError(f"checkpoint architecture {stored.to_dict()} != requested {arch.to_dict()}")
    model = WatermarkRemover(stored)
    state = {k[len("model/"):]: v for k, v in tensors.items() if k.startswith("model/")}
    expected = model.state_dict()
    bad = [k for k in expected if k not in state or tuple(state[k].shape) != tuple(expected[k].shape)]
    extra = [k for k in state if k not in expected]
    if bad or extra:
        raise VersionError(f"checkpoint does not match architecture: {len(bad)} missing/mismatched, {len(extra)} unexpected")
    model.load_state_dict(state)
    return model


def load_model(path, arch: ArchConfig | None = None) -> WatermarkRemover:
    meta, tensors = read(path)
    model = build_model(meta, tensors, arch)
    model.eval()
    return model


def restore_optimizer(model, optimizer, meta: dict, tensors: dict) -> None:
    """Rebuild Adam state so a resumed run continues bit-for-bit."""
    steps = meta.get("optim_steps", {})
    for n, p in model.named_parameters():
        if n not in steps:
            continue
        optimizer.state[p] = {
            "step": torch.tensor(steps[n]),
            "exp_avg": tensors[f"optim/{n}/exp_avg"].clone(),
            "exp_avg_sq": tensors[f"optim/{n}/exp_avg_sq"].clone(),
        }
