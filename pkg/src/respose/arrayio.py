"""Binary array serialization.

Two layouts share the same element encoding (float32, little-endian, C order):

* array directory: a JSON manifest plus one ``<name>.bin`` file per array.
  Used for body models, dataset samples, and cached features.
* packed blob: a JSON manifest plus a single ``weights.bin`` holding every
  array back to back, with byte offsets recorded in the manifest. Used for
  checkpoints.

Manifests are written with sorted keys and a fixed indent so that identical
content is byte-identical on disk.
"""

from __future__ import annotations

import json
import os
from typing import Any

import numpy as np

from .errors import CheckpointError, InvalidArgumentError

FORMAT_VERSION = 1
_DTYPE = np.dtype("<f4")


def dump_json(obj: Any, path: str) -> None:
    """Write ``obj`` as canonical JSON (sorted keys, indent 2, trailing newline)."""
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, sort_keys=True, indent=2)
        fh.write("\n")


def load_json(path: str) -> Any:
    with open(path, "r", encoding="utf-8") as fh:
        return json.load(fh)


def _check_name(name: str) -> None:
    if not name or "/" in name or "\\" in name or name.startswith("."):
        raise InvalidArgumentError(f"bad array name: {name!r}")


def write_array_dir(
    path: str,
    arrays: dict[str, np.ndarray],
    manifest_name: str = "arrays.json",
    extra: dict[str, Any] | None = None,
) -> None:
    """Write each array as ``<name>.bin`` plus a manifest listing shapes."""
    os.makedirs(path, exist_ok=True)
    entries = []
    for name in sorted(arrays):
        _check_name(name)
        # asarray keeps 0-dim shapes; ascontiguousarray would promote to (1,)
        arr = np.asarray(arrays[name], dtype=_DTYPE, order="C")
        with open(os.path.join(path, name + ".bin"), "wb") as fh:
            fh.write(arr.tobytes())
        entries.append({"name": name, "shape": list(arr.shape)})
    manifest = {
        "format_version": FORMAT_VERSION,
        "dtype": "f32",
        "endianness": "little",
        "arrays": entries,
    }
    if extra:
        manifest.update(extra)
    dump_json(manifest, os.path.join(path, manifest_name))


def read_array_dir(
    path: str, manifest_name: str = "arrays.json"
) -> tuple[dict[str, np.ndarray], dict[str, Any]]:
    """Read back an array directory. Returns (arrays, manifest-extras)."""
    manifest = load_json(os.path.join(path, manifest_name))
    if manifest.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(
            f"unsupported format_version {manifest.get('format_version')!r} "
            f"in {manifest_name} (expected {FORMAT_VERSION})"
        )
    arrays = {}
    for entry in manifest["arrays"]:
        name, shape = entry["name"], tuple(entry["shape"])
        _check_name(name)
        fpath = os.path.join(path, name + ".bin")
        expected = int(np.prod(shape, dtype=np.int64)) * _DTYPE.itemsize
        actual = os.path.getsize(fpath)
        if actual != expected:
            raise CheckpointError(
                f"array file {name}.bin has {actual} bytes, expected {expected}"
            )
        with open(fpath, "rb") as fh:
            buf = fh.read()
        arrays[name] = np.frombuffer(buf, dtype=_DTYPE).reshape(shape).copy()
    extra = {k: v for k, v in manifest.items() if k not in ("format_version", "dtype", "endianness", "arrays")}
    return arrays, extra


def write_packed(
    path: str,
    arrays: dict[str, np.ndarray],
    extra: dict[str, Any] | None = None,
    manifest_name: str = "ckpt_manifest.json",
    blob_name: str = "weights.bin",
) -> None:
    """Write arrays concatenated into one blob, offsets in the manifest.

    Array order in the blob follows sorted names so reruns are byte-identical.
    """
    os.makedirs(path, exist_ok=True)
    entries = []
    offset = 0
    chunks = []
    for name in sorted(arrays):
        _check_name(name)
        arr = np.asarray(arrays[name], dtype=_DTYPE, order="C")
        chunks.append(arr.tobytes())
        entries.append(
            {"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(chunks[-1])}
        )
        offset += len(chunks[-1])
    manifest = {
        "format_version": FORMAT_VERSION,
        "dtype": "f32",
        "endianness": "little",
        "total_bytes": offset,
        "arrays": entries,
    }
    if extra:
        manifest.update(extra)
    with open(os.path.join(path, blob_name), "wb") as fh:
        for chunk in chunks:
            fh.write(chunk)
    dump_json(manifest, os.path.join(path, manifest_name))


def read_packed(
    path: str,
    manifest_name: str = "ckpt_manifest.json",
    blob_name: str = "weights.bin",
) -> tuple[dict[str, np.ndarray], dict[str, Any]]:
    """Read a packed blob. Validates sizes fully before building any array."""
    mpath = os.path.join(path, manifest_name)
    if not os.path.exists(mpath):
        raise CheckpointError(f"missing manifest {mpath}")
    manifest = load_json(mpath)
    if manifest.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(
            f"checkpoint format_version {manifest.get('format_version')!r} "
            f"not supported (expected {FORMAT_VERSION})"
        )
    bpath = os.path.join(path, blob_name)
    if not os.path.exists(bpath):
        raise CheckpointError(f"missing blob {bpath}")
    actual = os.path.getsize(bpath)
    expected = int(manifest["total_bytes"])
    if actual != expected:
        raise CheckpointError(
            f"checkpoint blob truncated or padded: {actual} bytes on disk, "
            f"manifest expects {expected}"
        )
    with open(bpath, "rb") as fh:
        blob = fh.read()
    arrays = {}
    for entry in manifest["arrays"]:
        name, shape = entry["name"], tuple(entry["shape"])
        off, nbytes = int(entry["offset"]), int(entry["nbytes"])
        want = int(np.prod(shape, dtype=np.int64)) * _DTYPE.itemsize
        if nbytes != want or off + nbytes > len(blob):
            raise CheckpointError(f"corrupt manifest entry for array {name!r}")
        arrays[name] = (
            np.frombuffer(blob, dtype=_DTYPE, count=want // 4, offset=off)
            .reshape(shape)
            .copy()
        )
    extra = {
        k: v
        for k, v in manifest.items()
        if k not in ("format_version", "dtype", "endianness", "arrays", "total_bytes")
    }
    return arrays, extra
