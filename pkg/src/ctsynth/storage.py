"""Bit-exact persistence: volume files, checkpoints, run manifests.

Volume files are a single self-describing container: a 4-byte magic, a
little-endian uint32 header length, a UTF-8 JSON header, then the raw
little-endian float32 payload in (C, D, H, W) C-major order.  Round
trips are bit-identical.  Writers take an exclusive file lock per path;
readers are lock-free.
"""

from __future__ import annotations

import hashlib
import json
import struct
import time
from pathlib import Path
from typing import Optional

import numpy as np
import torch
from filelock import FileLock

from .errors import ValidationError
from .volume import JointVolume

MAGIC = b"VOLF"
DTYPE_NAME = "float32-le"
HU_WINDOW = [-1024.0, 600.0]


def _lock(path: Path) -> FileLock:
    return FileLock(str(path) + ".lock")


def write_volume(v: JointVolume, path: str | Path, provenance: Optional[dict] = None) -> None:
    """Write the container; header is validated on read before the payload."""
    path = Path(path)
    header = {
        "shape": list(v.shape),
        "channel_roles": list(v.channel_roles),
        "voxel_spacing_mm": list(v.voxel_spacing),
        "dtype": DTYPE_NAME,
        "normalization": {"hu_window": HU_WINDOW},
    }
    if provenance:
        header["provenance"] = provenance
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    payload = np.ascontiguousarray(v.data, dtype="<f4").tobytes()
    with _lock(path):
        with open(path, "wb") as f:
            f.write(MAGIC)
            f.write(struct.pack("<I", len(blob)))
            f.write(blob)
            f.write(payload)


def read_volume(path: str | Path) -> JointVolume:
    path = Path(path)
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != MAGIC:
            raise ValidationError(f"{path}: not a volume file (bad magic {magic!r})")
        (header_len,) = struct.unpack("<I", f.read(4))
        header = json.loads(f.read(header_len).decode("utf-8"))
        if header.get("dtype") != DTYPE_NAME:
            raise ValidationError(f"{path}: unknown dtype {header.get('dtype')!r}")
        shape = tuple(int(s) for s in header["shape"])
        if len(shape) != 4:
            raise ValidationError(f"{path}: header shape {shape} is not 4-dimensional")
        expected = 4 * int(np.prod(shape))
        payload = f.read()
    if len(payload) != expected:
        raise ValidationError(
            f"{path}: payload holds {len(payload)} bytes but header shape {shape} "
            f"needs {expected}"
        )
    data = np.frombuffer(payload, dtype="<f4").reshape(shape)
    return JointVolume(
        data.copy(),
        tuple(header["channel_roles"]),
        tuple(header["voxel_spacing_mm"]),
    )


# -- checkpoints ----------------------------------------------------------------


def save_checkpoint(base: str | Path, state: dict, metadata: dict) -> tuple[Path, Path]:
    """Binary blob (torch state dict) plus sidecar JSON metadata."""
    base = Path(base)
    blob_path = base.with_suffix(".pt")
    meta_path = base.with_suffix(".json")
    with _lock(blob_path):
        torch.save(state, blob_path)
        meta_path.write_text(json.dumps(metadata, indent=2, sort_keys=True))
    return blob_path, meta_path


def load_checkpoint(base: str | Path) -> tuple[dict, dict]:
    base = Path(base)
    blob_path = base.with_suffix(".pt")
    meta_path = base.with_suffix(".json")
    if not blob_path.exists() or not meta_path.exists():
        raise ValidationError(f"missing checkpoint {base}(.pt/.json)")
    state = torch.load(blob_path, weights_only=True)
    metadata = json.loads(meta_path.read_text())
    return state, metadata


# -- manifests --------------------------------------------------------------------


def content_hash(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def config_hash(config_dict: dict) -> str:
    canon = json.dumps(config_dict, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode("utf-8")).hexdigest()


def write_manifest(
    out_dir: str | Path,
    command: str,
    config_dict: dict,
    seed: Optional[int],
    files: list[str | Path],
    timings: dict[str, float],
) -> Path:
    """One manifest per run, referencing every file the run produced."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = {
        "command": command,
        "config_hash": config_hash(config_dict),
        "seed": seed,
        "created_unix": time.time(),
        "timings_s": timings,
        "files": {str(Path(p).name): content_hash(p) for p in files},
    }
    path = out_dir / "manifest.json"
    with _lock(path):
        path.write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return path
