"""Persistence: 8-bit PNGs, lossless float sidecars and JSON-lines manifests.

Sidecar layout (little-endian)::

    b"RFLX" | version u16 | rank u16 | dim0 u32 | dim1 u32 | dim2 u32 | float32 data

Unused trailing dims are stored as 0. PNGs are for inspection; the exact
factors of each sample live in sidecars so the 1e-6 scene invariants survive
a save/load round trip.
"""
from __future__ import annotations

import csv
import json
import struct
from pathlib import Path
from typing import Iterator

import numpy as np
from PIL import Image, UnidentifiedImageError

from .errors import ContractViolation, FormatError, IncompatibleVersionError, ManifestError
from .retinex import SceneSample, assemble_sample, check_image, check_mask

SIDECAR_MAGIC = b"RFLX"
SIDECAR_VERSION = 1
_SIDECAR_HEADER = struct.Struct("<4sHHIII")
MANIFEST_NAME = "manifest.jsonl"


def write_image(path, image) -> None:
    image = check_image(image)
    data = np.round(np.asarray(image, dtype=np.float64) * 255.0).astype(np.uint8)
    if data.shape[2] == 1:
        Image.fromarray(data[..., 0], mode="L").save(path, format="PNG")
    else:
        Image.fromarray(data, mode="RGB").save(path, format="PNG")


def read_image(path) -> np.ndarray:
    """Read a PNG as an ``(H, W, C)`` float64 array in [0, 1]."""
    try:
        with Image.open(path) as im:
            im.load()
            data = np.asarray(im)
    except (UnidentifiedImageError, OSError, SyntaxError) as exc:
        raise FormatError(f"cannot decode image {path}: {exc}") from exc
    if data.ndim == 2:
        data = data[..., None]
    return data.astype(np.float64) / 255.0


def write_mask(path, mask) -> None:
    mask = check_mask(mask)
    Image.fromarray((mask * 255).astype(np.uint8), mode="L").save(path, format="PNG")


def read_mask(path) -> np.ndarray:
    data = read_image(path)[..., 0]
    if not np.all((data == 0) | (data == 1)):
        raise FormatError(f"mask {path} is not binary")
    return data


def write_float_sidecar(path, array) -> None:
    arr = np.asarray(array, dtype="<f4")
    if not 1 <= arr.ndim <= 3:
        raise ContractViolation(f"sidecar arrays have rank 1..3, got {arr.ndim}")
    dims = list(arr.shape) + [0] * (3 - arr.ndim)
    header = _SIDECAR_HEADER.pack(SIDECAR_MAGIC, SIDECAR_VERSION, arr.ndim, *dims)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(arr.tobytes(order="C"))


def read_float_sidecar(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < _SIDECAR_HEADER.size:
        raise FormatError(f"{path}: truncated sidecar header")
    magic, version, rank, *dims = _SIDECAR_HEADER.unpack_from(raw)
    if magic != SIDECAR_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != SIDECAR_VERSION:
        raise IncompatibleVersionError(
            f"{path}: sidecar version {version}, this build reads version {SIDECAR_VERSION}")
    if not 1 <= rank <= 3:
        raise FormatError(f"{path}: invalid rank {rank}")
    shape = tuple(dims[:rank])
    expected = _SIDECAR_HEADER.size + 4 * int(np.prod(shape))
    if len(raw) != expected:
        raise FormatError(f"{path}: expected {expected} bytes, found {len(raw)}")
    return np.frombuffer(raw, dtype="<f4", offset=_SIDECAR_HEADER.size).reshape(shape).copy()


def manifest_append(path, row: dict) -> None:
    with open(path, "a", encoding="utf-8") as fh:
        fh.write(json.dumps(row, sort_keys=True) + "\n")


def manifest_write(path, rows) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row, sort_keys=True) + "\n")


def manifest_rows(path) -> list[dict]:
    rows = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rows.append(json.loads(line))
            except json.JSONDecodeError as exc:
                raise ManifestError(f"{path}:{lineno}: invalid JSON ({exc})") from exc
    return rows


_SIDECAR_KEYS = ("reflectance", "bg_illum", "fg_illum")
_PNG_KEYS = ("composite", "ground_truth", "original_fg_image")


def save_sample(sample: SceneSample, out_dir, stem: str) -> dict:
    """Write one sample under ``out_dir`` and return its manifest row."""
    out_dir = Path(out_dir)
    files = {}
    for key in _SIDECAR_KEYS:
        name = f"{stem}_{key}.rflx"
        write_float_sidecar(out_dir / name, getattr(sample, key))
        files[key] = name
    for key in _PNG_KEYS:
        name = f"{stem}_{key}.png"
        write_image(out_dir / name, getattr(sample, key))
        files[key] = name
    files["mask"] = f"{stem}_mask.png"
    write_mask(out_dir / files["mask"], sample.mask)
    h, w = sample.shape
    return {
        "id": stem,
        "seed": int(sample.seed),
        "ambiguity_factor": float(sample.ambiguity_factor),
        "height": int(h),
        "width": int(w),
        "files": files,
    }


def load_sample(row: dict, root) -> SceneSample:
    """Rebuild a sample from its sidecars and mask; images are recomputed
    from the exact factors rather than read back from the 8-bit PNGs."""
    root = Path(root)
    files = row.get("files", {})
    for key in _SIDECAR_KEYS + ("mask",):
        if key not in files:
            raise ManifestError(f"row {row.get('id')!r} lacks a {key!r} file entry")
        if not (root / files[key]).is_file():
            raise ManifestError(f"missing file referenced by manifest: {root / files[key]}")
    factors = {k: read_float_sidecar(root / files[k]).astype(np.float64) for k in _SIDECAR_KEYS}
    mask = read_mask(root / files["mask"])
    return assemble_sample(factors["reflectance"], factors["bg_illum"], factors["fg_illum"], mask,
                           row["ambiguity_factor"], row["seed"], meta={"id": row.get("id")})


def manifest_scan(path, validate=True) -> Iterator[SceneSample]:
    """Yield every sample listed in a manifest, checking files and invariants."""
    path = Path(path)
    for row in manifest_rows(path):
        for key in _PNG_KEYS:
            name = row.get("files", {}).get(key)
            if name is not None and not (path.parent / name).is_file():
                raise ManifestError(f"missing file referenced by manifest: {path.parent / name}")
        sample = load_sample(row, path.parent)
        if validate:
            sample.validate()
        yield sample


def write_csv(path, rows: list[dict]) -> None:
    rows = list(rows)
    fields = list(rows[0]) if rows else []
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields)
        writer.writeheader()
        writer.writerows(rows)
