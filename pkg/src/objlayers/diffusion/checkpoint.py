"""Single-file checkpoints: magic, JSON header, then little-endian float32 blobs.

Layout::

    b"OLCKPT01" | uint64 LE header length | UTF-8 JSON header | blobs

The header lists every tensor (name, shape) in blob order, together with the
architecture, schedule parameters, gate values and free-form metadata.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np
import torch

from ..errors import PersistenceError
from .network import ArchConfig, CoupledDenoiser
from .schedule import NoiseSchedule, make_schedule

MAGIC = b"OLCKPT01"


def save_checkpoint(path: Path, model: CoupledDenoiser, schedule: NoiseSchedule, metadata: dict | None = None) -> str:
    """Write ``model`` to ``path``; returns the file's sha256."""
    state = model.state_dict()
    tensors = [{"name": k, "shape": list(v.shape)} for k, v in state.items()]
    header = {
        "arch": model.arch.to_dict(),
        "n_layers": model.n_layers,
        "schedule": schedule.to_dict(),
        "gates": {"input": float(model.gate_in.detach()), "lateral": float(model.gate_lateral.detach())},
        "unconditional": model.unconditional,
        "dtype": "float32-le",
        "tensors": tensors,
        "metadata": metadata or {},
    }
    raw = json.dumps(header, sort_keys=True).encode("utf-8")
    try:
        with open(path, "wb") as fh:
            fh.write(MAGIC)
            fh.write(struct.pack("<Q", len(raw)))
            fh.write(raw)
            for v in state.values():
                fh.write(v.detach().cpu().to(torch.float32).numpy().astype("<f4").tobytes())
    except OSError as exc:
        raise PersistenceError(f"cannot write checkpoint {path}: {exc}") from exc
    return file_hash(path)


def read_header(path: Path) -> dict:
    with open(path, "rb") as fh:
        if fh.read(len(MAGIC)) != MAGIC:
            raise PersistenceError(f"{path} is not a checkpoint")
        (n,) = struct.unpack("<Q", fh.read(8))
        return json.loads(fh.read(n).decode("utf-8"))


def load_checkpoint(path: Path) -> tuple[CoupledDenoiser, NoiseSchedule, dict]:
    """Rebuild the model (base frozen) and schedule stored in ``path``."""
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise PersistenceError(f"cannot read checkpoint {path}: {exc}") from exc
    if data[: len(MAGIC)] != MAGIC:
        raise PersistenceError(f"{path} is not a checkpoint")
    (n,) = struct.unpack("<Q", data[len(MAGIC): len(MAGIC) + 8])
    start = len(MAGIC) + 8
    header = json.loads(data[start: start + n].decode("utf-8"))
    offset = start + n
    state = {}
    for spec in header["tensors"]:
        count = int(np.prod(spec["shape"], dtype=np.int64))
        end = offset + 4 * count
        if end > len(data):
            raise PersistenceError(f"{path} is truncated")
        arr = np.frombuffer(data[offset:end], dtype="<f4").reshape(spec["shape"])
        state[spec["name"]] = torch.from_numpy(arr.astype(np.float32))
        offset = end
    model = CoupledDenoiser(ArchConfig.from_dict(header["arch"]))
    model.load_state_dict(state)
    model.freeze_base()
    model.unconditional = bool(header.get("unconditional", False))
    s = header["schedule"]
    schedule = make_schedule(s["T"], s["beta_start"], s["beta_end"], s["inference_steps"])
    return model, schedule, header


def file_hash(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
