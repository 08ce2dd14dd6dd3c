"""Single-file model/state archives.

An archive is a zip with two entries: ``manifest.json`` (format version,
architecture descriptor, tensor index, free-form extra metadata) and
``tensors.bin`` (concatenated raw tensor data, little-endian, floats stored
as 32-bit). Zip timestamps are pinned so identical contents give identical
bytes.
"""

from __future__ import annotations

import io
import json
import zipfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DataError

FORMAT = "alforge-ckpt"
VERSION = 1

_DTYPE_TAGS = {"<f4": np.dtype("<f4"), "<i8": np.dtype("<i8"), "<u1": np.dtype("<u1")}
_EPOCH = (1980, 1, 1, 0, 0, 0)


def _canonical_dtype(arr: np.ndarray) -> str:
    if arr.dtype.kind == "f":
        return "<f4"
    if arr.dtype.kind in "iu" and arr.dtype.itemsize > 1:
        return "<i8"
    if arr.dtype == np.uint8 or arr.dtype == np.bool_:
        return "<u1"
    raise DataError(f"unsupported tensor dtype {arr.dtype}")


@dataclass
class Checkpoint:
    kind: str
    architecture: dict
    tensors: dict[str, np.ndarray]
    extra: dict


def save_checkpoint(
    path: Path,
    kind: str,
    architecture: dict,
    tensors: dict[str, np.ndarray],
    extra: dict | None = None,
) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)

    blob = io.BytesIO()
    index = []
    offset = 0
    for name in sorted(tensors):
        arr = np.asarray(tensors[name])
        tag = _canonical_dtype(arr)
        raw = np.ascontiguousarray(arr.astype(_DTYPE_TAGS[tag])).tobytes()
        index.append(
            {"name": name, "shape": list(arr.shape), "dtype": tag, "offset": offset}
        )
        blob.write(raw)
        offset += len(raw)

    manifest = {
        "format": FORMAT,
        "version": VERSION,
        "kind": kind,
        "byte_order": "little",
        "architecture": architecture,
        "tensors": index,
        "extra": extra or {},
    }
    payload = json.dumps(manifest, sort_keys=True, indent=1).encode()

    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_DEFLATED) as zf:
        zf.writestr(zipfile.ZipInfo("manifest.json", date_time=_EPOCH), payload)
        zf.writestr(zipfile.ZipInfo("tensors.bin", date_time=_EPOCH), blob.getvalue())
    return path


def load_checkpoint(path: Path) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise DataError(f"missing checkpoint {path}")
    try:
        with zipfile.ZipFile(path) as zf:
            manifest = json.loads(zf.read("manifest.json"))
            raw = zf.read("tensors.bin")
    except (zipfile.BadZipFile, KeyError, json.JSONDecodeError) as exc:
        raise DataError(f"corrupt checkpoint {path}: {exc}")

    if manifest.get("format") != FORMAT:
        raise DataError(f"{path} is not an alforge checkpoint")
    if manifest.get("version") != VERSION:
        raise DataError(f"{path}: unsupported checkpoint version {manifest.get('version')}")

    tensors: dict[str, np.ndarray] = {}
    for entry in manifest["tensors"]:
        dtype = _DTYPE_TAGS[entry["dtype"]]
        count = int(np.prod(entry["shape"])) if entry["shape"] else 1
        start = entry["offset"]
        arr = np.frombuffer(raw, dtype=dtype, count=count, offset=start)
        tensors[entry["name"]] = arr.reshape(entry["shape"]).copy()
    return Checkpoint(
        kind=manifest["kind"],
        architecture=manifest["architecture"],
        tensors=tensors,
        extra=manifest["extra"],
    )


def module_tensors(module, prefix: str = "") -> dict[str, np.ndarray]:
    """Flatten a torch module's state dict to numpy arrays."""
    out = {}
    for name, tensor in module.state_dict().items():
        out[prefix + name] = tensor.detach().cpu().numpy()
    return out


def load_module_tensors(module, tensors: dict[str, np.ndarray], prefix: str = ""):
    """Restore a torch module from :func:`module_tensors` output."""
    import torch

    state = {}
    for name, ref in module.state_dict().items():
        key = prefix + name
        if key not in tensors:
            raise DataError(f"checkpoint missing tensor {key!r}")
        state[name] = torch.as_tensor(tensors[key]).to(ref.dtype).reshape(ref.shape)
    module.load_state_dict(state)
