"""On-disk tensors (``CTT1`` container) and JSON dataset manifests.

Tensors are plain :class:`numpy.ndarray` objects of dtype float32 or float64.
The container layout is::

    b"CTT1" | u8 dtype code (0=f32, 1=f64) | u8 ndim | ndim x u64 LE dims | LE data
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

MAGIC = b"CTT1"
MANIFEST_VERSION = 1
SPLITS = ("train", "val", "test")

_DTYPE_CODES = {np.dtype("<f4"): 0, np.dtype("<f8"): 1}
_CODE_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


class TensorFormatError(ValueError):
    """Raised for malformed tensor files or unsupported tensors."""


class ManifestError(ValueError):
    """Raised for invalid or unresolvable dataset manifests."""


def write_tensor(path: str | Path, t: np.ndarray) -> None:
    t = np.asarray(t)
    dtype = t.dtype.newbyteorder("<")
    if dtype not in _DTYPE_CODES:
        raise TensorFormatError(f"unsupported dtype {t.dtype}; expected float32 or float64")
    if t.ndim == 0 or t.ndim > 255:
        raise TensorFormatError(f"unsupported number of dimensions: {t.ndim}")
    if any(d <= 0 for d in t.shape):
        raise TensorFormatError(f"empty extent in dims {t.shape}")
    if any(d >= 2**64 for d in t.shape):
        raise TensorFormatError("dimension overflows u64")
    if not np.all(np.isfinite(t)):
        raise TensorFormatError("tensor contains non-finite values")
    header = MAGIC + struct.pack("<BB", _DTYPE_CODES[dtype], t.ndim)
    header += struct.pack(f"<{t.ndim}Q", *t.shape)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(np.ascontiguousarray(t, dtype=dtype).tobytes())


def read_tensor(path: str | Path) -> np.ndarray:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 6 or raw[:4] != MAGIC:
        raise TensorFormatError(f"{path}: bad magic")
    code, ndim = struct.unpack_from("<BB", raw, 4)
    if code not in _CODE_DTYPES:
        raise TensorFormatError(f"{path}: unknown dtype code {code}")
    if ndim == 0:
        raise TensorFormatError(f"{path}: zero-dimensional tensor")
    offset = 6 + 8 * ndim
    if len(raw) < offset:
        raise TensorFormatError(f"{path}: truncated header")
    dims = struct.unpack_from(f"<{ndim}Q", raw, 6)
    if any(d == 0 for d in dims):
        raise TensorFormatError(f"{path}: empty extent in dims {dims}")
    dtype = _CODE_DTYPES[code]
    n = int(np.prod(dims, dtype=object))
    expected = offset + n * dtype.itemsize
    if len(raw) != expected:
        raise TensorFormatError(
            f"{path}: payload has {len(raw) - offset} bytes, expected {expected - offset}"
        )
    return np.frombuffer(raw, dtype=dtype, count=n, offset=offset).reshape(dims).copy()


@dataclass(frozen=True)
class Record:
    id: str
    phantom: str
    sinogram: str
    fbp: str | None = None
    split: str = "train"


@dataclass
class DatasetManifest:
    """Index of phantom/sinogram/FBP triples.

    Paths are stored relative to the manifest's directory; ``root`` is set on
    load so that :meth:`path` resolves them.
    """

    records: list[Record]
    seed: int = 0
    sim_geometry: dict[str, Any] | None = None
    root: Path = field(default_factory=Path)

    def __post_init__(self) -> None:
        ids = [r.id for r in self.records]
        if len(set(ids)) != len(ids):
            dup = sorted({i for i in ids if ids.count(i) > 1})
            raise ManifestError(f"duplicate record ids: {dup}")
        for r in self.records:
            if r.split not in SPLITS:
                raise ManifestError(f"record {r.id}: unknown split {r.split!r}")

    def path(self, relative: str) -> Path:
        return self.root / relative

    def split(self, name: str) -> list[Record]:
        return [r for r in self.records if r.split == name]

    def load_pair(self, record: Record) -> tuple[np.ndarray, np.ndarray]:
        """Return ``(phantom, sinogram)`` for one record."""
        return read_tensor(self.path(record.phantom)), read_tensor(self.path(record.sinogram))

    def load_pairs(self, split: str | None = None) -> list[tuple[np.ndarray, np.ndarray]]:
        recs = self.records if split is None else self.split(split)
        return [self.load_pair(r) for r in recs]


def save_manifest(path: str | Path, manifest: DatasetManifest) -> None:
    doc = {
        "version": MANIFEST_VERSION,
        "seed": manifest.seed,
        "sim_geometry": manifest.sim_geometry,
        "records": [
            {k: v for k, v in vars(r).items() if v is not None} for r in manifest.records
        ],
    }
    Path(path).write_text(json.dumps(doc, indent=2))


def load_manifest(path: str | Path) -> DatasetManifest:
    path = Path(path)
    if not path.is_file():
        raise ManifestError(f"manifest not found: {path}")
    doc = json.loads(path.read_text())
    if doc.get("version") != MANIFEST_VERSION:
        raise ManifestError(f"{path}: unsupported manifest version {doc.get('version')!r}")
    try:
        records = [Record(**r) for r in doc["records"]]
    except (KeyError, TypeError) as exc:
        raise ManifestError(f"{path}: malformed records ({exc})") from exc
    manifest = DatasetManifest(
        records=records,
        seed=int(doc.get("seed", 0)),
        sim_geometry=doc.get("sim_geometry"),
        root=path.parent,
    )
    for r in records:
        for rel in (r.phantom, r.sinogram, r.fbp):
            if rel is not None and not manifest.path(rel).is_file():
                raise ManifestError(f"record {r.id}: missing file {rel}")
    return manifest
