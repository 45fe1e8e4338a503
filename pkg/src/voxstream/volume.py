"""Native slice-streamable volume format.

A volume is a directory holding ``meta.json`` and ``data.raw``. The payload is
little-endian and channel-planar: each channel occupies one contiguous plane,
and within a plane voxels are linearized with z changing least frequently
(index = z*ny*nx + y*nx + x). Slice i of the volume is therefore the set of
contiguous xy-planes at z = i, one per channel, which is what every streaming
operation in this package consumes and produces.
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import (
    InconsistentSliceShape,
    IoError,
    MalformedMeta,
    MissingFile,
    ProtocolError,
    SizeMismatch,
    UnsupportedPixelType,
)

DTYPES = {
    "u8": np.dtype("<u1"),
    "u16": np.dtype("<u2"),
    "f32": np.dtype("<f4"),
}

META_NAME = "meta.json"
DATA_NAME = "data.raw"


def numpy_dtype(name: str) -> np.dtype:
    try:
        return DTYPES[name]
    except KeyError:
        raise MalformedMeta(f"unknown dtype {name!r}") from None


def dtype_name(dt: np.dtype) -> str:
    for name, cand in DTYPES.items():
        if cand == dt:
            return name
    raise UnsupportedPixelType(f"no native dtype for {dt}")


def foreground_value(dtype: str):
    """Value used for 'foreground' in binary volumes of the given dtype."""
    if dtype == "f32":
        return 1.0
    return int(np.iinfo(numpy_dtype(dtype)).max)


@dataclass
class VolumeMeta:
    """Validated metadata of a native volume.

    dimensions are voxel counts (nx, ny, nz); spacing and offset are physical
    millimeters. value_range holds one (min, max) pair per channel and may be
    absent until computed.
    """

    dimensions: tuple[int, int, int]
    spacing_mm: tuple[float, float, float] = (1.0, 1.0, 1.0)
    offset_mm: tuple[float, float, float] = (0.0, 0.0, 0.0)
    dtype: str = "u8"
    channels: int = 1
    value_range: list[tuple[float, float]] | None = None
    timestamp_s: float | None = None
    field: str | None = None

    def __post_init__(self):
        self.dimensions = tuple(int(d) for d in self.dimensions)
        self.spacing_mm = tuple(float(s) for s in self.spacing_mm)
        self.offset_mm = tuple(float(o) for o in self.offset_mm)
        self.validate()

    def validate(self):
        if len(self.dimensions) != 3 or any(d < 1 for d in self.dimensions):
            raise MalformedMeta(f"bad dimensions {self.dimensions}")
        if len(self.spacing_mm) != 3 or any(s <= 0 for s in self.spacing_mm):
            raise MalformedMeta(f"bad spacing {self.spacing_mm}")
        if self.channels < 1:
            raise MalformedMeta(f"channels must be >= 1, got {self.channels}")
        if self.dtype not in DTYPES:
            raise MalformedMeta(f"unknown dtype {self.dtype!r}")
        if self.value_range is not None:
            if len(self.value_range) != self.channels:
                raise MalformedMeta("value_range must have one pair per channel")
            for lo, hi in self.value_range:
                if lo > hi:
                    raise MalformedMeta(f"value_range min {lo} > max {hi}")

    # -- derived quantities -------------------------------------------------

    @property
    def np_dtype(self) -> np.dtype:
        return numpy_dtype(self.dtype)

    @property
    def nx(self) -> int:
        return self.dimensions[0]

    @property
    def ny(self) -> int:
        return self.dimensions[1]

    @property
    def nz(self) -> int:
        return self.dimensions[2]

    @property
    def voxel_count(self) -> int:
        nx, ny, nz = self.dimensions
        return nx * ny * nz

    @property
    def slice_voxels(self) -> int:
        return self.nx * self.ny

    @property
    def payload_nbytes(self) -> int:
        return self.voxel_count * self.channels * self.np_dtype.itemsize

    @property
    def plane_nbytes(self) -> int:
        """Bytes of one channel plane (full volume, one channel)."""
        return self.voxel_count * self.np_dtype.itemsize

    @property
    def slice_nbytes(self) -> int:
        """Bytes of one xy-slice within one channel plane."""
        return self.slice_voxels * self.np_dtype.itemsize

    @property
    def physical_extent_mm(self) -> tuple[float, float, float]:
        return tuple(d * s for d, s in zip(self.dimensions, self.spacing_mm))

    def bounds_mm(self) -> tuple[tuple[float, float, float], tuple[float, float, float]]:
        lo = self.offset_mm
        hi = tuple(o + e for o, e in zip(self.offset_mm, self.physical_extent_mm))
        return lo, hi

    # -- (de)serialization ---------------------------------------------------

    def to_json(self) -> dict:
        doc = {
            "dimensions": list(self.dimensions),
            "spacing_mm": list(self.spacing_mm),
            "offset_mm": list(self.offset_mm),
            "dtype": self.dtype,
            "channels": self.channels,
        }
        if self.value_range is not None:
            doc["value_range"] = [[lo, hi] for lo, hi in self.value_range]
        if self.timestamp_s is not None:
            doc["timestamp_s"] = self.timestamp_s
        if self.field is not None:
            doc["field"] = self.field
        return doc

    @classmethod
    def from_json(cls, doc: dict) -> "VolumeMeta":
        if not isinstance(doc, dict):
            raise MalformedMeta("meta.json must hold a JSON object")
        try:
            meta = cls(
                dimensions=tuple(doc["dimensions"]),
                spacing_mm=tuple(doc.get("spacing_mm", (1.0, 1.0, 1.0))),
                offset_mm=tuple(doc.get("offset_mm", (0.0, 0.0, 0.0))),
                dtype=doc.get("dtype", "u8"),
                channels=int(doc.get("channels", 1)),
                value_range=[tuple(p) for p in doc["value_range"]]
                if doc.get("value_range") is not None
                else None,
                timestamp_s=doc.get("timestamp_s"),
                field=doc.get("field"),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise MalformedMeta(f"missing or ill-typed meta field: {exc}") from exc
        return meta


def read_meta(path: str | os.PathLike) -> VolumeMeta:
    """Parse and validate a volume directory's metadata without touching the payload
    content (only the payload's byte length is checked against the metadata)."""
    path = Path(path)
    meta_path = path / META_NAME
    data_path = path / DATA_NAME
    if not meta_path.is_file():
        raise MissingFile(f"no {META_NAME} in {path}")
    if not data_path.is_file():
        raise MissingFile(f"no {DATA_NAME} in {path}")
    try:
        doc = json.loads(meta_path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise MalformedMeta(f"{meta_path}: {exc}") from exc
    meta = VolumeMeta.from_json(doc)
    actual = data_path.stat().st_size
    if actual != meta.payload_nbytes:
        raise SizeMismatch(
            f"{data_path}: payload is {actual} bytes, meta implies {meta.payload_nbytes}"
        )
    return meta


class SliceVolume:
    """Handle to an on-disk native volume.

    Carries a cumulative slice-read counter used by the I/O assertions of the
    streaming operations (a full sequential read adds nz to the counter).
    """

    def __init__(self, path: str | os.PathLike, meta: VolumeMeta | None = None):
        self.path = Path(path)
        self.meta = meta if meta is not None else read_meta(self.path)
        self.read_slice_count = 0

    @classmethod
    def open(cls, path: str | os.PathLike) -> "SliceVolume":
        return cls(path)

    @property
    def data_path(self) -> Path:
        return self.path / DATA_NAME

    def reader(self, z_range: tuple[int, int] | None = None) -> "SliceReader":
        return SliceReader(self, z_range)

    def read_slice(self, z: int) -> np.ndarray:
        """Read slice z in isolation; returns (channels, ny, nx)."""
        for _, arr in SliceReader(self, (z, z + 1)):
            return arr
        raise IoError(f"slice {z} out of range")

    def read_full(self) -> np.ndarray:
        """Read the whole payload into memory as (channels, nz, ny, nx)."""
        meta = self.meta
        out = np.empty((meta.channels, meta.nz, meta.ny, meta.nx), dtype=meta.np_dtype)
        for z, arr in self.reader():
            out[:, z] = arr
        return out

    def persist_meta(self):
        """Rewrite meta.json from the in-memory metadata (temp-and-rename)."""
        tmp = self.path / (META_NAME + ".tmp")
        tmp.write_text(json.dumps(self.meta.to_json(), indent=1), encoding="utf-8")
        tmp.replace(self.path / META_NAME)

    def ensure_value_range(self) -> list[tuple[float, float]]:
        """Per-channel (min, max), computed on first demand and persisted."""
        if self.meta.value_range is None:
            lo = np.full(self.meta.channels, np.inf)
            hi = np.full(self.meta.channels, -np.inf)
            for _, arr in self.reader():
                np.minimum(lo, arr.min(axis=(1, 2)), out=lo)
                np.maximum(hi, arr.max(axis=(1, 2)), out=hi)
            self.meta.value_range = [(float(a), float(b)) for a, b in zip(lo, hi)]
            self.persist_meta()
        return self.meta.value_range


class SliceReader:
    """Sequential xy-slice iterator over an optional z-range.

    Yields (z, array) with array shaped (channels, ny, nx). Each yielded slice
    bumps the owning volume's read_slice_count.
    """

    def __init__(self, volume: SliceVolume, z_range: tuple[int, int] | None = None):
        self.volume = volume
        meta = volume.meta
        z0, z1 = z_range if z_range is not None else (0, meta.nz)
        if not (0 <= z0 <= z1 <= meta.nz):
            raise IoError(f"z-range [{z0},{z1}) outside [0,{meta.nz})")
        self.z0, self.z1 = z0, z1

    def __iter__(self):
        meta = self.volume.meta
        count = meta.slice_voxels
        with open(self.volume.data_path, "rb") as f:
            for z in range(self.z0, self.z1):
                chans = np.empty((meta.channels, meta.ny, meta.nx), dtype=meta.np_dtype)
                for c in range(meta.channels):
                    f.seek(c * meta.plane_nbytes + z * meta.slice_nbytes)
                    raw = np.fromfile(f, dtype=meta.np_dtype, count=count)
                    if raw.size != count:
                        raise IoError(f"truncated payload at slice {z}")
                    chans[c] = raw.reshape(meta.ny, meta.nx)
                self.volume.read_slice_count += 1
                yield z, chans


class SliceWriter:
    """Slice sink producing a native volume; push exactly nz slices then finalize.

    meta.json is written only at finalize, so an interrupted write never looks
    like a valid volume. Usable as a context manager (finalizes on clean exit).
    """

    def __init__(self, meta: VolumeMeta, path: str | os.PathLike):
        self.meta = meta
        self.path = Path(path)
        self.path.mkdir(parents=True, exist_ok=True)
        self._pushed = 0
        self._finalized = False
        try:
            self._f = open(self.path / DATA_NAME, "wb")
            self._f.truncate(meta.payload_nbytes)
        except OSError as exc:
            raise IoError(f"cannot create {self.path / DATA_NAME}: {exc}") from exc

    @property
    def slices_written(self) -> int:
        return self._pushed

    def write_slice(self, arr: np.ndarray):
        meta = self.meta
        if self._pushed >= meta.nz:
            raise ProtocolError(f"already wrote {meta.nz} slices")
        arr = np.asarray(arr)
        if arr.ndim == 2:
            arr = arr[np.newaxis]
        if arr.shape != (meta.channels, meta.ny, meta.nx):
            raise ProtocolError(
                f"slice shape {arr.shape} != {(meta.channels, meta.ny, meta.nx)}"
            )
        data = np.ascontiguousarray(arr, dtype=meta.np_dtype)
        z = self._pushed
        for c in range(meta.channels):
            self._f.seek(c * meta.plane_nbytes + z * meta.slice_nbytes)
            self._f.write(data[c].tobytes())
        self._pushed += 1

    def finalize(self) -> SliceVolume:
        if self._finalized:
            raise ProtocolError("writer already finalized")
        if self._pushed != self.meta.nz:
            self._f.close()
            raise ProtocolError(
                f"finalized after {self._pushed} of {self.meta.nz} slices"
            )
        self._f.close()
        self._finalized = True
        vol = SliceVolume(self.path, self.meta)
        vol.persist_meta()
        return vol

    def abort(self):
        if not self._finalized:
            self._f.close()

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        if exc_type is None:
            if not self._finalized:
                self.finalize()
        else:
            self.abort()
        return False


def write_full(array: np.ndarray, path: str | os.PathLike, meta: VolumeMeta | None = None,
               **meta_kwargs) -> SliceVolume:
    """Write an in-memory (channels, nz, ny, nx) or (nz, ny, nx) array as a volume."""
    array = np.asarray(array)
    if array.ndim == 3:
        array = array[np.newaxis]
    if array.ndim != 4:
        raise ProtocolError(f"expected 3- or 4-d array, got shape {array.shape}")
    c, nz, ny, nx = array.shape
    if meta is None:
        meta = VolumeMeta(
            dimensions=(nx, ny, nz),
            dtype=dtype_name(array.dtype),
            channels=c,
            **meta_kwargs,
        )
    with SliceWriter(meta, path) as w:
        for z in range(nz):
            w.write_slice(array[:, z])
    return SliceVolume(path, meta)


# -- TIFF stack import -------------------------------------------------------

_PIL_MODE_DTYPES = {
    "L": "u8",
    "I;16": "u16",
    "I;16B": "u16",
    "F": "f32",
}


def import_tiff_stack(directory: str | os.PathLike, out_path: str | os.PathLike,
                      spacing_mm=(1.0, 1.0, 1.0)) -> SliceVolume:
    """Import a directory of same-sized single-slice grayscale images.

    Files are stacked in lexicographic filename order; nz = file count.
    """
    from PIL import Image

    directory = Path(directory)
    files = sorted(p for p in directory.iterdir() if p.is_file())
    if not files:
        raise MissingFile(f"no image files in {directory}")

    writer = None
    shape = None
    try:
        for i, fp in enumerate(files):
            try:
                img = Image.open(fp)
            except Exception as exc:
                raise UnsupportedPixelType(f"{fp}: {exc}") from exc
            if getattr(img, "n_frames", 1) != 1:
                raise UnsupportedPixelType(f"{fp}: multi-frame images not supported")
            if img.mode not in _PIL_MODE_DTYPES:
                if img.mode == "I":
                    # Pillow promotes 16-bit TIFFs to mode "I" on some paths
                    arr = np.asarray(img)
                    if arr.max(initial=0) <= np.iinfo(np.uint16).max and arr.min(initial=0) >= 0:
                        arr = arr.astype(np.uint16)
                        dtype = "u16"
                    else:
                        raise UnsupportedPixelType(f"{fp}: mode I exceeds u16 range")
                else:
                    raise UnsupportedPixelType(f"{fp}: unsupported mode {img.mode}")
            else:
                dtype = _PIL_MODE_DTYPES[img.mode]
                arr = np.asarray(img)
            if arr.ndim != 2:
                raise UnsupportedPixelType(f"{fp}: not a single-channel image")
            if shape is None:
                shape = arr.shape
                meta = VolumeMeta(
                    dimensions=(shape[1], shape[0], len(files)),
                    spacing_mm=spacing_mm,
                    dtype=dtype,
                    channels=1,
                )
                writer = SliceWriter(meta, out_path)
            elif arr.shape != shape:
                raise InconsistentSliceShape(
                    f"{fp}: slice shape {arr.shape} != first slice {shape}"
                )
            writer.write_slice(arr[np.newaxis])
        return writer.finalize()
    except Exception:
        if writer is not None:
            writer.abort()
        raise
