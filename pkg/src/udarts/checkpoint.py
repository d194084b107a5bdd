"""Checkpoints: a JSON manifest plus one raw little-endian float64 blob per array.

Layout of a checkpoint directory::

    manifest.json          mode, kind, epoch, step, seed, config hash, per-array
                           shape + sha256, and any extra JSON metadata
    arrays/<name>.f64      C-order '<f8' bytes

Parameters, optimizer momentum and batch-norm running statistics are all
stored, so a search can resume exactly; all randomness in a run is derived
from (seed, epoch, step), which the manifest records.
"""

from __future__ import annotations

import hashlib
import json
import os
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

FORMAT = "udarts-checkpoint-v1"
_DTYPE = np.dtype("<f8")
_NAME = re.compile(r"^[A-Za-z0-9_.\-]+$")


class CheckpointError(RuntimeError):
    """Missing, corrupted or mismatched checkpoint."""


@dataclass
class Checkpoint:
    mode: str
    kind: str                      # "search" or "final"
    seed: int
    epoch: int
    step: int
    config_hash: str
    params: dict[str, np.ndarray]
    momentum: dict[str, np.ndarray] = field(default_factory=dict)
    buffers: dict[str, tuple[np.ndarray, np.ndarray]] = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def arrays(self) -> dict[str, np.ndarray]:
        out = {f"param.{k}": v for k, v in self.params.items()}
        out.update({f"momentum.{k}": v for k, v in self.momentum.items()})
        for k, (mean, var) in self.buffers.items():
            out[f"buffer.{k}.mean"] = mean
            out[f"buffer.{k}.var"] = var
        return out


def _sha(b: bytes) -> str:
    return hashlib.sha256(b).hexdigest()


def _atomic_write(path: Path, data: bytes) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)


def save_checkpoint(ckpt: Checkpoint, path) -> Path:
    path = Path(path)
    (path / "arrays").mkdir(parents=True, exist_ok=True)
    entries = {}
    for name, arr in sorted(ckpt.arrays().items()):
        if not _NAME.match(name):
            raise CheckpointError(f"array name {name!r} is not file-safe")
        arr = np.asarray(arr, dtype=np.float64)
        blob = np.ascontiguousarray(arr, dtype=_DTYPE).tobytes()
        _atomic_write(path / "arrays" / f"{name}.f64", blob)
        entries[name] = {"shape": list(arr.shape), "sha256": _sha(blob)}
    manifest = {
        "format": FORMAT, "mode": ckpt.mode, "kind": ckpt.kind, "seed": ckpt.seed,
        "epoch": ckpt.epoch, "step": ckpt.step, "config_hash": ckpt.config_hash,
        "rng": {"scheme": "seed-sequence", "seed": ckpt.seed, "epoch": ckpt.epoch, "step": ckpt.step},
        "arrays": entries, "meta": ckpt.meta,
    }
    text = json.dumps(manifest, indent=2, sort_keys=True, allow_nan=False) + "\n"
    _atomic_write(path / "manifest.json", text.encode())
    return path


def read_manifest(path) -> dict:
    path = Path(path)
    mpath = path / "manifest.json"
    if not mpath.is_file():
        raise CheckpointError(f"missing checkpoint: {mpath} not found")
    try:
        manifest = json.loads(mpath.read_text())
    except json.JSONDecodeError as err:
        raise CheckpointError(f"{mpath}: manifest is not valid JSON ({err.msg})") from None
    if manifest.get("format") != FORMAT:
        raise CheckpointError(f"{mpath}: unsupported format {manifest.get('format')!r}")
    return manifest


def load_checkpoint(path, expected_hash: str | None = None,
                    expected_shapes: dict[str, tuple] | None = None) -> Checkpoint:
    """Read and verify a checkpoint.

    ``expected_hash`` guards against loading under a different configuration;
    ``expected_shapes`` (parameter name -> shape) against a different network.
    """
    path = Path(path)
    manifest = read_manifest(path)
    if expected_hash is not None and manifest["config_hash"] != expected_hash:
        raise CheckpointError(
            f"{path}: config hash mismatch: checkpoint was written under {manifest['config_hash'][:12]}, "
            f"supplied config hashes to {expected_hash[:12]}; refusing to load")
    arrays = {}
    for name, entry in manifest["arrays"].items():
        fpath = path / "arrays" / f"{name}.f64"
        if not fpath.is_file():
            raise CheckpointError(f"{path}: array {name!r} is missing ({fpath.name})")
        blob = fpath.read_bytes()
        if _sha(blob) != entry["sha256"]:
            raise CheckpointError(f"{path}: array {name!r} is corrupted (sha256 mismatch)")
        shape = tuple(entry["shape"])
        if len(blob) != _DTYPE.itemsize * int(np.prod(shape, dtype=np.int64)):
            raise CheckpointError(f"{path}: array {name!r} size disagrees with shape {shape}")
        arrays[name] = np.frombuffer(blob, dtype=_DTYPE).reshape(shape).astype(np.float64)
    params, momentum, buffers = {}, {}, {}
    for name, arr in arrays.items():
        group, _, rest = name.partition(".")
        if group == "param":
            params[rest] = arr
        elif group == "momentum":
            momentum[rest] = arr
        elif group == "buffer":
            key, _, part = rest.rpartition(".")
            buffers.setdefault(key, {})[part] = arr
        else:
            raise CheckpointError(f"{path}: unknown array group in {name!r}")
    for key, parts in buffers.items():
        if set(parts) != {"mean", "var"}:
            raise CheckpointError(f"{path}: buffer {key!r} needs both mean and var")
    if expected_shapes is not None:
        missing = set(expected_shapes) - set(params)
        extra = set(params) - set(expected_shapes)
        if missing or extra:
            raise CheckpointError(f"{path}: parameter set disagrees with config "
                                  f"(missing {sorted(missing)}, unexpected {sorted(extra)})")
        for k, shape in expected_shapes.items():
            if tuple(params[k].shape) != tuple(shape):
                raise CheckpointError(f"{path}: parameter {k!r} has shape {params[k].shape}, "
                                      f"config implies {tuple(shape)}")
    return Checkpoint(mode=manifest["mode"], kind=manifest["kind"], seed=manifest["seed"],
                      epoch=manifest["epoch"], step=manifest["step"],
                      config_hash=manifest["config_hash"], params=params, momentum=momentum,
                      buffers={k: (v["mean"], v["var"]) for k, v in buffers.items()},
                      meta=manifest.get("meta", {}))
