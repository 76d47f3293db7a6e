"""Checkpoint file: magic, version, JSON header, then raw little-endian float32.

The header lists every tensor's name, shape and byte offset. Tensors cover the
model weights (``model/``), the EMA copy (``ema/``) and the AdamW moments and
step counters (``opt/``).
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np
import torch

MAGIC = b"ATTSCK01"
VERSION = 1


class CheckpointError(IOError):
    pass


def _opt_tensors(trainer) -> dict[str, torch.Tensor]:
    out = {}
    names = [n for n, _ in trainer.model.named_parameters()]
    state = trainer.optimizer.state_dict()["state"]
    for idx, name in enumerate(names):
        s = state.get(idx)
        if not s:
            continue
        out[f"opt/step/{name}"] = torch.as_tensor(s["step"], dtype=torch.float32).reshape(1)
        out[f"opt/exp_avg/{name}"] = s["exp_avg"]
        out[f"opt/exp_avg_sq/{name}"] = s["exp_avg_sq"]
    return out


def save_checkpoint(path: str | Path, trainer, final: bool = False) -> None:
    tensors = {f"model/{n}": p.detach() for n, p in trainer.model.named_parameters()}
    tensors.update({f"ema/{n}": p.detach() for n, p in trainer.ema.named_parameters()})
    tensors.update(_opt_tensors(trainer))
    index, blobs, offset = [], [], 0
    for name, t in tensors.items():
        raw = np.ascontiguousarray(t.detach().cpu().numpy(), dtype="<f4").tobytes()
        index.append({"name": name, "shape": list(t.shape), "offset": offset})
        blobs.append(raw)
        offset += len(raw)
    header = {
        "version": VERSION,
        "step": trainer.step,
        "final": final,
        "config": trainer.config_snapshot(),
        "tensors": index,
    }
    head = json.dumps(header, sort_keys=True).encode()
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IQ", VERSION, len(head)))
        fh.write(head)
        for raw in blobs:
            fh.write(raw)
    tmp.replace(path)


def read_checkpoint(path: str | Path) -> tuple[dict, dict[str, torch.Tensor]]:
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"{path}: {exc}") from exc
    if data[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint")
    version, head_len = struct.unpack_from("<IQ", data, 8)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    start = 8 + struct.calcsize("<IQ")
    header = json.loads(data[start : start + head_len])
    base = start + head_len
    tensors = {}
    for entry in header["tensors"]:
        count = int(np.prod(entry["shape"])) if entry["shape"] else 1
        arr = np.frombuffer(data, dtype="<f4", count=count, offset=base + entry["offset"])
        tensors[entry["name"]] = torch.from_numpy(arr.astype(np.float32).reshape(entry["shape"]))
    return header, tensors


def load_into(trainer, path: str | Path) -> dict:
    """Restore model, EMA, optimizer and step counter in place."""
    header, tensors = read_checkpoint(path)
    with torch.no_grad():
        for prefix, module in (("model", trainer.model), ("ema", trainer.ema)):
            for name, p in module.named_parameters():
                key = f"{prefix}/{name}"
                if key not in tensors:
                    raise CheckpointError(f"{path}: missing tensor {key}")
                p.copy_(tensors[key])
    names = [n for n, _ in trainer.model.named_parameters()]
    state = {}
    for idx, name in enumerate(names):
        if f"opt/step/{name}" in tensors:
            state[idx] = {
                "step": tensors[f"opt/step/{name}"].reshape(()).clone(),
                "exp_avg": tensors[f"opt/exp_avg/{name}"].clone(),
                "exp_avg_sq": tensors[f"opt/exp_avg_sq/{name}"].clone(),
            }
    sd = trainer.optimizer.state_dict()
    trainer.optimizer.load_state_dict({"state": state, "param_groups": sd["param_groups"]})
    trainer.step = int(header["step"])
    return header


def load_model(path: str | Path, use_ema: bool = True):
    """Build an ``ArchiTTS`` from a checkpoint (EMA weights by default)."""
    from .model import ArchiTTS, ModelConfig

    header, tensors = read_checkpoint(path)
    model = ArchiTTS(ModelConfig(**header["config"]["model"]))
    prefix = "ema" if use_ema else "model"
    with torch.no_grad():
        for name, p in model.named_parameters():
            p.copy_(tensors[f"{prefix}/{name}"])
    model.eval()
    return model, header
