"""Binary volume/mask files and the dataset manifest.

Both binary formats are an 8-byte magic, four little-endian uint32 dims
(C, D, H, W) and a raw payload: float32 voxels for ``DVOL0001`` images,
one byte per voxel (0 or 1) for ``DMSK0001`` masks.
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

VOLUME_MAGIC = b"DVOL0001"
MASK_MAGIC = b"DMSK0001"
HEADER = struct.Struct("<8s4I")
MAX_VOXELS = 1 << 30


class FormatError(ValueError):
    """Base class for malformed data files."""


class BadMagicError(FormatError):
    pass


class DimOverflowError(FormatError):
    pass


class TruncatedError(FormatError):
    pass


class TrailingDataError(FormatError):
    pass


def _encode(magic: bytes, arr: np.ndarray, dtype: str) -> bytes:
    if arr.ndim != 4:
        raise ValueError(f"expected a [C,D,H,W] array, got shape {arr.shape}")
    return HEADER.pack(magic, *arr.shape) + np.ascontiguousarray(arr, dtype=dtype).tobytes()


def _decode(buf: bytes, magic: bytes, dtype: str, path) -> np.ndarray:
    if len(buf) < HEADER.size:
        raise TruncatedError(f"{path}: file shorter than the {HEADER.size}-byte header")
    got, *dims = HEADER.unpack_from(buf)
    if got != magic:
        raise BadMagicError(f"{path}: bad magic {got!r}, expected {magic!r}")
    count = 1
    for d in dims:
        count *= d
    if count == 0 or count > MAX_VOXELS:
        raise DimOverflowError(f"{path}: header dims {tuple(dims)} give {count} voxels")
    need = count * np.dtype(dtype).itemsize
    have = len(buf) - HEADER.size
    if have < need:
        raise TruncatedError(f"{path}: payload has {have} bytes, header requires {need}")
    if have > need:
        raise TrailingDataError(f"{path}: {have - need} unexpected bytes after payload")
    return np.frombuffer(buf, dtype=dtype, offset=HEADER.size).reshape(dims).copy()


def volume_bytes(image: np.ndarray) -> bytes:
    return _encode(VOLUME_MAGIC, image, "<f4")


def mask_bytes(mask: np.ndarray) -> bytes:
    m = np.asarray(mask)
    if not np.isin(m, (0, 1)).all():
        raise ValueError("mask must be binary")
    return _encode(MASK_MAGIC, m, "u1")


def save_volume(path, image: np.ndarray) -> None:
    Path(path).write_bytes(volume_bytes(image))


def save_mask(path, mask: np.ndarray) -> None:
    Path(path).write_bytes(mask_bytes(mask))


def load_volume(path) -> np.ndarray:
    return _decode(Path(path).read_bytes(), VOLUME_MAGIC, "<f4", path).astype(np.float32)


def load_mask(path) -> np.ndarray:
    m = _decode(Path(path).read_bytes(), MASK_MAGIC, "u1", path)
    if m.max() > 1:
        raise FormatError(f"{path}: mask contains values other than 0 and 1")
    return m


@dataclass(frozen=True)
class ManifestRow:
    patient_id: str
    image: str
    mask: str
    label: int


@dataclass
class DatasetManifest:
    root: Path
    rows: list[ManifestRow]
    seed: int | None = None
    dims: tuple[int, int, int] | None = None

    def __len__(self) -> int:
        return len(self.rows)

    def subset(self, ids) -> "DatasetManifest":
        keep = set(ids)
        return DatasetManifest(self.root, [r for r in self.rows if r.patient_id in keep], self.seed, self.dims)

    @property
    def labels(self) -> list[int]:
        return [r.label for r in self.rows]


MANIFEST_NAME = "manifest.csv"
META_NAME = "meta.txt"


def write_manifest(manifest: DatasetManifest) -> Path:
    root = Path(manifest.root)
    path = root / MANIFEST_NAME
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["patient_id", "image", "mask", "label"])
        for r in manifest.rows:
            w.writerow([r.patient_id, r.image, r.mask, r.label])
    meta = [f"n={len(manifest.rows)}"]
    if manifest.seed is not None:
        meta.append(f"seed={manifest.seed}")
    if manifest.dims is not None:
        meta.append("dims=" + "x".join(str(d) for d in manifest.dims))
    (root / META_NAME).write_text("\n".join(meta) + "\n")
    return path


def read_manifest(root) -> DatasetManifest:
    """Read ``manifest.csv`` under ``root`` (or a direct path to the CSV)."""
    path = Path(root)
    if path.is_dir():
        path = path / MANIFEST_NAME
    root = path.parent
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != ["patient_id", "image", "mask", "label"]:
            raise FormatError(f"{path}: unexpected manifest header {reader.fieldnames}")
        rows = [ManifestRow(r["patient_id"], r["image"], r["mask"], int(r["label"])) for r in reader]
    ids = [r.patient_id for r in rows]
    if len(set(ids)) != len(ids):
        raise FormatError(f"{path}: duplicate patient ids")
    seed, dims = None, None
    meta = root / META_NAME
    if meta.exists():
        kv = dict(line.split("=", 1) for line in meta.read_text().splitlines() if "=" in line)
        seed = int(kv["seed"]) if "seed" in kv else None
        dims = tuple(int(d) for d in kv["dims"].split("x")) if "dims" in kv else None
    return DatasetManifest(root, rows, seed, dims)
