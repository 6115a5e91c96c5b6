"""Files: NPY movies, JSON manifests and config echoes, JSON-lines logs, PGM images."""

from __future__ import annotations

import io
import json
import os
import re
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.lib import format as npy_format

MOVIE_DTYPES = (np.dtype("<c8"), np.dtype("<c16"))
MANIFEST_VERSION = 1


class MovieFormatError(ValueError):
    """NPY file is malformed or does not hold a complex ``(T, H, W)`` movie."""


def atomic_write(path, data: bytes) -> None:
    """Write via a temporary file in the same directory, then rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def movie_to_bytes(movie, dtype="<c8") -> bytes:
    arr = np.ascontiguousarray(movie, dtype=np.dtype(dtype))
    if arr.ndim != 3:
        raise MovieFormatError(f"movie must have rank 3, got shape {arr.shape}")
    if arr.dtype not in MOVIE_DTYPES:
        raise MovieFormatError(f"unsupported movie dtype {arr.dtype}")
    buf = io.BytesIO()
    npy_format.write_array(buf, arr, version=(1, 0), allow_pickle=False)
    return buf.getvalue()


def write_movie(movie, path, dtype="<c8") -> None:
    """Store as NPY v1.0, little-endian complex64 (or complex128), C order."""
    atomic_write(path, movie_to_bytes(movie, dtype))


def read_movie(path) -> np.ndarray:
    """Load a complex ``(T, H, W)`` NPY movie written as complex64 or complex128."""
    with open(path, "rb") as fh:
        try:
            version = npy_format.read_magic(fh)
            if version == (1, 0):
                shape, fortran, dtype = npy_format.read_array_header_1_0(fh)
            elif version == (2, 0):
                shape, fortran, dtype = npy_format.read_array_header_2_0(fh)
            else:
                raise MovieFormatError(f"unsupported NPY version {version}")
        except ValueError as exc:
            if isinstance(exc, MovieFormatError):
                raise
            raise MovieFormatError(f"malformed NPY header in {path}: {exc}") from exc
        if dtype not in MOVIE_DTYPES:
            raise MovieFormatError(f"{path}: dtype {dtype} is not little-endian complex64/complex128")
        if len(shape) != 3:
            raise MovieFormatError(f"{path}: expected rank-3 (T, H, W) array, got shape {shape}")
        if fortran:
            raise MovieFormatError(f"{path}: Fortran-ordered arrays are not accepted")
        count = int(np.prod(shape))
        data = fh.read(count * dtype.itemsize)
        if len(data) != count * dtype.itemsize:
            raise MovieFormatError(f"{path}: truncated payload")
    return np.frombuffer(data, dtype=dtype).reshape(shape).copy()


def read_movie_shape(path) -> tuple[int, ...]:
    with open(path, "rb") as fh:
        npy_format.read_magic(fh)
        shape, _, _ = npy_format.read_array_header_1_0(fh)
    return tuple(shape)


# -- JSON --------------------------------------------------------------------


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, Path):
        return str(obj)
    return obj


def write_json(obj, path) -> None:
    atomic_write(path, (json.dumps(_jsonable(obj), indent=2, sort_keys=True) + "\n").encode())


def read_json(path):
    with open(path) as fh:
        return json.load(fh)


def append_jsonl(record: dict, path) -> None:
    with open(path, "a") as fh:
        fh.write(json.dumps(_jsonable(record), sort_keys=True) + "\n")


def read_jsonl(path) -> list[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


# -- manifests ---------------------------------------------------------------


@dataclass
class ManifestEntry:
    id: str
    files: dict[str, str]  # role ("D", "L", "S", "N") -> path relative to the manifest
    shape: tuple[int, int, int]
    provenance: str = "simulated"
    seed: int | None = None


@dataclass
class DatasetManifest:
    samples: list[ManifestEntry] = field(default_factory=list)
    root: Path = Path(".")

    def to_dict(self) -> dict:
        return {
            "version": MANIFEST_VERSION,
            "samples": [
                {"id": e.id, "files": e.files, "shape": list(e.shape), "provenance": e.provenance, "seed": e.seed}
                for e in self.samples
            ],
        }

    def write(self, path) -> None:
        write_json(self.to_dict(), path)

    def path(self, entry: ManifestEntry, role: str) -> Path:
        return self.root / entry.files[role]

    @classmethod
    def read(cls, path, *, check: bool = True) -> "DatasetManifest":
        path = Path(path)
        raw = read_json(path)
        if raw.get("version") != MANIFEST_VERSION:
            raise ValueError(f"unsupported manifest version {raw.get('version')}")
        unknown = set(raw) - {"version", "samples"}
        if unknown:
            raise ValueError(f"unknown manifest keys {sorted(unknown)}")
        entries = [
            ManifestEntry(s["id"], dict(s["files"]), tuple(s["shape"]), s.get("provenance", "simulated"), s.get("seed"))
            for s in raw["samples"]
        ]
        man = cls(entries, path.parent)
        if check:
            man.validate()
        return man

    def validate(self) -> None:
        for e in self.samples:
            for role in e.files:
                p = self.path(e, role)
                if not p.exists():
                    raise FileNotFoundError(f"manifest entry {e.id}: missing {role} file {p}")
                if read_movie_shape(p) != tuple(e.shape):
                    raise ValueError(f"manifest entry {e.id}: {role} shape mismatch")


# -- images ------------------------------------------------------------------


def write_pgm(image_db, path, floor_db: float = -60.0) -> None:
    """8-bit binary PGM mapping ``[floor_db, 0]`` dB to ``[0, 255]``."""
    img = np.asarray(image_db, dtype=float)
    scaled = np.clip((img - floor_db) / -floor_db, 0.0, 1.0)
    scaled = np.nan_to_num(scaled, nan=0.0)
    pix = np.round(scaled * 255).astype(np.uint8)
    h, w = pix.shape
    atomic_write(path, f"P5\n{w} {h}\n255\n".encode() + pix.tobytes())


def read_pgm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    m = re.match(rb"P5\s+(\d+)\s+(\d+)\s+(\d+)\s", data)
    if m is None:
        raise ValueError("not a binary PGM")
    w, h, maxval = (int(g) for g in m.groups())
    if maxval != 255:
        raise ValueError("only 8-bit PGM supported")
    return np.frombuffer(data, dtype=np.uint8, count=w * h, offset=m.end()).reshape(h, w)
