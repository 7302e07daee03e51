"""Binary checkpoint format for named float64 tensors.

Layout (all integers little-endian):

    magic   4 bytes         b"RATN"
    version u32             currently 1
    count   u64             number of tensors
    then per tensor:
        name_len u64, name (UTF-8)
        ndim     u64, dims u64 * ndim
        data     f64 * prod(dims), little-endian

Round trips are bit-exact. A JSON sidecar (<path>.json) carries the model
config and construction seed so a model can be rebuilt from the pair.
"""

from __future__ import annotations

import dataclasses
import json
import struct
from pathlib import Path

import numpy as np

from .transformer import ModelConfig, Seq2SeqModel
from .attention import RelaxationConfig

MAGIC = b"RATN"
VERSION = 1


class CheckpointError(ValueError):
    """Malformed, truncated, or mismatched checkpoint data."""


def write_tensors(path, named: dict[str, np.ndarray]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", VERSION))
        f.write(struct.pack("<Q", len(named)))
        for name, arr in named.items():
            data = np.asarray(arr, dtype="<f8")  # tobytes() emits C order
            encoded = name.encode("utf-8")
            f.write(struct.pack("<Q", len(encoded)))
            f.write(encoded)
            f.write(struct.pack("<Q", data.ndim))
            f.write(struct.pack(f"<{data.ndim}Q", *data.shape))
            f.write(data.tobytes())


def _read_exact(f, n: int) -> bytes:
    buf = f.read(n)
    if len(buf) != n:
        raise CheckpointError(f"truncated checkpoint: wanted {n} bytes, got {len(buf)}")
    return buf


def read_tensors(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as f:
        if _read_exact(f, 4) != MAGIC:
            raise CheckpointError(f"bad magic bytes in {path}; not a checkpoint")
        (version,) = struct.unpack("<I", _read_exact(f, 4))
        if version != VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        (count,) = struct.unpack("<Q", _read_exact(f, 8))
        out: dict[str, np.ndarray] = {}
        for _ in range(count):
            (name_len,) = struct.unpack("<Q", _read_exact(f, 8))
            name = _read_exact(f, name_len).decode("utf-8")
            (ndim,) = struct.unpack("<Q", _read_exact(f, 8))
            dims = struct.unpack(f"<{ndim}Q", _read_exact(f, 8 * ndim))
            n_items = int(np.prod(dims, dtype=np.int64)) if ndim else 1
            raw = _read_exact(f, 8 * n_items)
            out[name] = np.frombuffer(raw, dtype="<f8").reshape(dims).copy()
        trailing = f.read(1)
        if trailing:
            raise CheckpointError("trailing bytes after last tensor")
    return out


def save_model(model: Seq2SeqModel, path) -> None:
    """Write parameters plus a config/seed sidecar at <path>.json."""
    write_tensors(path, {k: t.data for k, t in model.parameters().items()})
    sidecar = {"config": dataclasses.asdict(model.config), "seed": model.seed}
    Path(str(path) + ".json").write_text(json.dumps(sidecar, sort_keys=True, indent=1))


def model_config_from_dict(d: dict) -> ModelConfig:
    d = dict(d)
    d["relax_self"] = RelaxationConfig(**d["relax_self"])
    d["relax_cross"] = RelaxationConfig(**d["relax_cross"])
    return ModelConfig(**d)


def load_model(path, config: ModelConfig | None = None) -> Seq2SeqModel:
    """Rebuild a model from a checkpoint.

    With an explicit config, every stored tensor must match the shape the
    config implies; mismatches raise naming the offending tensor.
    """
    tensors = read_tensors(path)
    sidecar_path = Path(str(path) + ".json")
    if config is None:
        if not sidecar_path.exists():
            raise CheckpointError(f"no config given and no sidecar at {sidecar_path}")
        sidecar = json.loads(sidecar_path.read_text())
        config = model_config_from_dict(sidecar["config"])
        seed = int(sidecar.get("seed", 0))
    else:
        seed = 0
        if sidecar_path.exists():
            seed = int(json.loads(sidecar_path.read_text()).get("seed", 0))
    model = Seq2SeqModel(config, seed=seed)
    params = model.parameters()
    missing = set(params) - set(tensors)
    extra = set(tensors) - set(params)
    if missing or extra:
        raise CheckpointError(f"parameter names disagree with config: "
                              f"missing {sorted(missing)}, unexpected {sorted(extra)}")
    for name, tensor in params.items():
        if tensors[name].shape != tensor.data.shape:
            raise CheckpointError(
                f"tensor {name!r} has shape {tensors[name].shape}, "
                f"config implies {tensor.data.shape}")
        tensor.data = tensors[name]
    return model
