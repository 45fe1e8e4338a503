"""Multi-resolution brick octree store with an LRU brick cache.

A volume is converted in one sequential slice pass into per-level brick grids:
level 0 is full resolution, each coarser level halves the per-axis resolution
(2x2x2 mean, round half up for integer dtypes), and the coarsest level fits a
single brick. Bricks are stored padded to brick_size^3 (clamp-to-edge); padding
is excluded from the per-node (min, max) aggregates. Nodes whose entire subtree
is constant carry no payload.

On disk an octree is a directory with octree.json (metadata), nodes.bin (fixed
width records: 8 child indices u32 with 0xFFFFFFFF = absent, brick offset u64
with all-ones = constant, per channel min/max f32, constant value f32) and
bricks.bin (append-only payloads).
"""
from __future__ import annotations

import json
import math
import os
import shutil
import threading
from collections import OrderedDict
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import IoError, NodeLimitExceeded, OutOfRange, ConfigError
from .volume import DTYPES, SliceVolume, SliceWriter, VolumeMeta

NODE_LIMIT = 2**25
ABSENT_CHILD = 0xFFFFFFFF
CONSTANT_BRICK = 0xFFFFFFFFFFFFFFFF
VALID_BRICK_SIZES = (16, 32, 64)

OCTREE_JSON = "octree.json"
NODES_BIN = "nodes.bin"
BRICKS_BIN = "bricks.bin"


def fnv1a64(data: bytes, h: int = 0xCBF29CE484222325) -> int:
    for b in data:
        h ^= b
        h = (h * 0x100000001B3) & 0xFFFFFFFFFFFFFFFF
    return h


def plan_levels(dims, brick_size) -> list[tuple[int, int, int]]:
    """Per-level resolutions, finest first; the last level fits one brick."""
    res = tuple(int(d) for d in dims)
    levels = [res]
    while any(r > brick_size for r in levels[-1]):
        levels.append(tuple((r + 1) // 2 for r in levels[-1]))
    return levels


def level_grid(res, brick_size) -> tuple[int, int, int]:
    return tuple((r + brick_size - 1) // brick_size for r in res)


def plan_node_count(dims, brick_size) -> int:
    """Projected total node count; raises NodeLimitExceeded at >= 2^25."""
    total = 0
    for res in plan_levels(dims, brick_size):
        gx, gy, gz = level_grid(res, brick_size)
        total += gx * gy * gz
    if total >= NODE_LIMIT:
        raise NodeLimitExceeded(
            f"dimensions {tuple(dims)} at brick size {brick_size} project "
            f"{total} nodes (limit {NODE_LIMIT})"
        )
    return total


@dataclass
class OctreeMeta:
    brick_size: int
    level_count: int
    node_count: int
    source_hash: str
    channels: int
    dtype: str
    dimensions: tuple[int, int, int]
    spacing_mm: tuple[float, float, float] = (1.0, 1.0, 1.0)
    offset_mm: tuple[float, float, float] = (0.0, 0.0, 0.0)
    value_range: list[tuple[float, float]] | None = None
    node_limit: int = NODE_LIMIT

    def to_json(self) -> dict:
        doc = {
            "brick_size": self.brick_size,
            "level_count": self.level_count,
            "node_count": self.node_count,
            "node_limit": self.node_limit,
            "source_hash": self.source_hash,
            "channels": self.channels,
            "dtype": self.dtype,
            "dimensions": list(self.dimensions),
            "spacing_mm": list(self.spacing_mm),
            "offset_mm": list(self.offset_mm),
        }
        if self.value_range is not None:
            doc["value_range"] = [[a, b] for a, b in self.value_range]
        return doc

    @classmethod
    def from_json(cls, doc: dict) -> "OctreeMeta":
        return cls(
            brick_size=int(doc["brick_size"]),
            level_count=int(doc["level_count"]),
            node_count=int(doc["node_count"]),
            source_hash=doc["source_hash"],
            channels=int(doc["channels"]),
            dtype=doc["dtype"],
            dimensions=tuple(doc["dimensions"]),
            spacing_mm=tuple(doc.get("spacing_mm", (1.0, 1.0, 1.0))),
            offset_mm=tuple(doc.get("offset_mm", (0.0, 0.0, 0.0))),
            value_range=[tuple(p) for p in doc["value_range"]]
            if doc.get("value_range") is not None
            else None,
            node_limit=int(doc.get("node_limit", NODE_LIMIT)),
        )


def node_record_dtype(channels: int) -> np.dtype:
    return np.dtype(
        [
            ("children", "<u4", (8,)),
            ("brick", "<u8"),
            ("minmax", "<f4", (channels, 2)),
            ("const", "<f4"),
        ]
    )


class BrickCache:
    """Byte-budgeted LRU cache of brick payload blocks (thread-safe)."""

    def __init__(self, budget_bytes: int):
        self.budget = int(budget_bytes)
        self._items: OrderedDict = OrderedDict()
        self.resident_bytes = 0
        self.disk_reads = 0
        self._lock = threading.Lock()

    def get(self, key):
        with self._lock:
            arr = self._items.get(key)
            if arr is not None:
                self._items.move_to_end(key)
            return arr

    def put(self, key, arr: np.ndarray):
        nbytes = arr.nbytes
        with self._lock:
            if nbytes > self.budget:
                return  # never exceed the budget, not even transiently
            while self.resident_bytes + nbytes > self.budget and self._items:
                _, old = self._items.popitem(last=False)
                self.resident_bytes -= old.nbytes
            self._items[key] = arr
            self.resident_bytes += nbytes

    def clear(self):
        with self._lock:
            self._items.clear()
            self.resident_bytes = 0


class BrickOctree:
    """Read access to a persisted octree; bricks are served through the cache."""

    def __init__(self, path: str | os.PathLike, cache_budget: int = 256 * 1024 * 1024):
        self.path = Path(path)
        try:
            doc = json.loads((self.path / OCTREE_JSON).read_text(encoding="utf-8"))
        except OSError as exc:
            raise IoError(f"cannot read {self.path / OCTREE_JSON}: {exc}") from exc
        self.meta = OctreeMeta.from_json(doc)
        rec = node_record_dtype(self.meta.channels)
        nodes = np.fromfile(self.path / NODES_BIN, dtype=rec)
        if len(nodes) != self.meta.node_count:
            raise IoError(
                f"{NODES_BIN} holds {len(nodes)} records, expected {self.meta.node_count}"
            )
        self.children = nodes["children"]
        self.brick_offsets = nodes["brick"]
        self.node_min = nodes["minmax"][:, :, 0]
        self.node_max = nodes["minmax"][:, :, 1]
        self.node_const = nodes["const"]
        self.levels = plan_levels(self.meta.dimensions, self.meta.brick_size)
        self.grids = [level_grid(r, self.meta.brick_size) for r in self.levels]
        self._level_offsets = []
        off = 0
        for g in self.grids:
            self._level_offsets.append(off)
            off += g[0] * g[1] * g[2]
        self.cache = BrickCache(cache_budget)
        self._np_dtype = DTYPES[self.meta.dtype]
        self._brick_voxels = self.meta.brick_size**3 * self.meta.channels
        self._brick_nbytes = self._brick_voxels * self._np_dtype.itemsize

    # -- addressing -----------------------------------------------------------

    @property
    def brick_size(self) -> int:
        return self.meta.brick_size

    @property
    def level_count(self) -> int:
        return self.meta.level_count

    def node_id(self, level: int, coords) -> int:
        bx, by, bz = coords
        if not 0 <= level < self.meta.level_count:
            raise OutOfRange(f"level {level} outside [0,{self.meta.level_count})")
        gx, gy, gz = self.grids[level]
        if not (0 <= bx < gx and 0 <= by < gy and 0 <= bz < gz):
            raise OutOfRange(f"brick {coords} outside level-{level} grid {self.grids[level]}")
        return self._level_offsets[level] + (bz * gy + by) * gx + bx

    def valid_size(self, level: int, coords) -> tuple[int, int, int]:
        """Voxels of the brick inside the level resolution (rest is padding)."""
        b = self.brick_size
        res = self.levels[level]
        return tuple(min(b, r - c * b) for r, c in zip(res, coords))

    def is_constant(self, node: int) -> bool:
        return self.brick_offsets[node] == CONSTANT_BRICK

    def node_constants(self, node: int) -> np.ndarray:
        """Per-channel constant value of a constant node."""
        return self.node_min[node]

    # -- brick access -----------------------------------------------------------

    def fetch_brick(self, level: int, coords) -> np.ndarray:
        """Return the (channels, B, B, B) block of a brick, via the LRU cache.

        Constant nodes synthesize a filled block without touching disk or the
        cache budget.
        """
        node = self.node_id(level, coords)
        b = self.brick_size
        if self.is_constant(node):
            block = np.empty((self.meta.channels, b, b, b), dtype=self._np_dtype)
            for c, v in enumerate(self.node_constants(node)):
                block[c].fill(self._np_dtype.type(v))
            return block
        key = node
        cached = self.cache.get(key)
        if cached is not None:
            return cached
        block = self._read_brick_payload(node)
        block.flags.writeable = False
        self.cache.put(key, block)
        return block

    def _read_brick_payload(self, node: int) -> np.ndarray:
        b = self.brick_size
        off = int(self.brick_offsets[node])
        with open(self.path / BRICKS_BIN, "rb") as f:
            f.seek(off)
            raw = np.fromfile(f, dtype=self._np_dtype, count=self._brick_voxels)
        if raw.size != self._brick_voxels:
            raise IoError(f"truncated brick payload at offset {off}")
        self.cache.disk_reads += 1
        return raw.reshape(self.meta.channels, b, b, b)

    def source_volume_meta(self) -> VolumeMeta:
        return VolumeMeta(
            dimensions=self.meta.dimensions,
            spacing_mm=self.meta.spacing_mm,
            offset_mm=self.meta.offset_mm,
            dtype=self.meta.dtype,
            channels=self.meta.channels,
            value_range=self.meta.value_range,
        )


# -- construction ---------------------------------------------------------------


def _downsample_slab(slab: np.ndarray, dtype: str) -> np.ndarray:
    """2x2x2 mean over a (C, s, ny, nx) slab; odd extents replicate the edge.

    Integer dtypes round half up; f32 averages in f64.
    """
    c, s, ny, nx = slab.shape
    pad = ((0, 0), (0, s % 2), (0, ny % 2), (0, nx % 2))
    if any(p[1] for p in pad):
        slab = np.pad(slab, pad, mode="edge")
    c, s2, ny2, nx2 = slab.shape
    grouped = slab.reshape(c, s2 // 2, 2, ny2 // 2, 2, nx2 // 2, 2)
    if dtype == "f32":
        return grouped.mean(axis=(2, 4, 6), dtype=np.float64).astype(np.float32)
    sums = grouped.sum(axis=(2, 4, 6), dtype=np.int64)
    return ((sums + 4) // 8).astype(DTYPES[dtype])


class _LevelBuilder:
    """Accumulates slices of one level, emits brick rows, feeds the next level."""

    def __init__(self, level: int, res, build: "_BuildState"):
        self.level = level
        self.res = res
        self.build = build
        self.grid = level_grid(res, build.brick_size)
        self.slices: list[np.ndarray] = []
        self.base_z = 0
        self.next: _LevelBuilder | None = None

    def push(self, arr: np.ndarray):
        self.slices.append(arr)
        if len(self.slices) == self.build.brick_size:
            self._emit_and_forward()

    def flush(self):
        if self.slices:
            self._emit_and_forward()
        if self.next is not None:
            self.next.flush()

    def _emit_and_forward(self):
        slab = np.stack(self.slices, axis=1)  # (C, s, ny, nx)
        bz = self.base_z // self.build.brick_size
        self.build.emit_slab(self.level, bz, slab, self)
        if self.next is not None:
            down = _downsample_slab(slab, self.build.dtype)
            for i in range(down.shape[1]):
                self.next.push(down[:, i])
        self.base_z += len(self.slices)
        self.slices = []


class _BuildState:
    def __init__(self, meta: VolumeMeta, brick_size: int, out_dir: Path, source_hash: str):
        self.brick_size = brick_size
        self.dtype = meta.dtype
        self.channels = meta.channels
        self.levels = plan_levels(meta.dimensions, brick_size)
        self.grids = [level_grid(r, brick_size) for r in self.levels]
        self.level_offsets = []
        off = 0
        for g in self.grids:
            self.level_offsets.append(off)
            off += g[0] * g[1] * g[2]
        self.node_count = off
        c = meta.channels
        self.children = np.full((self.node_count, 8), ABSENT_CHILD, dtype=np.uint32)
        self.brick = np.full(self.node_count, CONSTANT_BRICK, dtype=np.uint64)
        self.minv = np.full((self.node_count, c), np.inf, dtype=np.float64)
        self.maxv = np.full((self.node_count, c), -np.inf, dtype=np.float64)
        self.const = np.full(self.node_count, np.nan, dtype=np.float32)
        self.bricks_file = open(out_dir / BRICKS_BIN, "wb")
        self.bricks_written = 0
        self.meta = meta
        self.source_hash = source_hash

    def node_id(self, level, bx, by, bz):
        gx, gy, _ = self.grids[level]
        return self.level_offsets[level] + (bz * gy + by) * gx + bx

    def emit_slab(self, level: int, bz: int, slab: np.ndarray, builder: _LevelBuilder):
        b = self.brick_size
        gx, gy, gz = self.grids[level]
        rx, ry, _ = self.levels[level]
        c, s, ny, nx = slab.shape
        for by in range(gy):
            y0 = by * b
            vy = min(b, ry - y0)
            for bx in range(gx):
                x0 = bx * b
                vx = min(b, rx - x0)
                region = slab[:, :, y0:y0 + vy, x0:x0 + vx]
                node = self.node_id(level, bx, by, bz)
                rmin = region.min(axis=(1, 2, 3))
                rmax = region.max(axis=(1, 2, 3))
                if level == 0:
                    self.minv[node] = rmin
                    self.maxv[node] = rmax
                else:
                    # aggregate = union over the subtree, via the children
                    self._link_children(level, bx, by, bz, node)
                if np.all(self.minv[node] == self.maxv[node]):
                    self.const[node] = np.float32(self.minv[node][0])
                    continue  # constant: no payload
                block = np.empty((c, b, b, b), dtype=DTYPES[self.dtype])
                pads = ((0, 0), (0, b - s), (0, b - vy), (0, b - vx))
                block[:] = np.pad(region, pads, mode="edge") if any(
                    p[1] for p in pads
                ) else region
                self.brick[node] = self.bricks_written
                payload = block.tobytes()
                self.bricks_file.write(payload)
                self.bricks_written += len(payload)

    def _link_children(self, level, bx, by, bz, node):
        cgx, cgy, cgz = self.grids[level - 1]
        for dz in range(2):
            for dy in range(2):
                for dx in range(2):
                    cx, cy, cz = 2 * bx + dx, 2 * by + dy, 2 * bz + dz
                    if cx >= cgx or cy >= cgy or cz >= cgz:
                        continue
                    child = self.node_id(level - 1, cx, cy, cz)
                    self.children[node][(dz * 2 + dy) * 2 + dx] = child
                    np.minimum(self.minv[node], self.minv[child], out=self.minv[node])
                    np.maximum(self.maxv[node], self.maxv[child], out=self.maxv[node])

    def finalize(self, out_dir: Path):
        self.bricks_file.close()
        rec = np.zeros(self.node_count, dtype=node_record_dtype(self.channels))
        rec["children"] = self.children
        rec["brick"] = self.brick
        rec["minmax"][:, :, 0] = self.minv.astype(np.float32)
        rec["minmax"][:, :, 1] = self.maxv.astype(np.float32)
        rec["const"] = self.const
        rec.tofile(out_dir / NODES_BIN)
        root = self.node_count - 1
        value_range = self.meta.value_range  # inherit a declared range
        if value_range is None:
            value_range = [
                (float(self.minv[root][c]), float(self.maxv[root][c]))
                for c in range(self.channels)
            ]
        ometa = OctreeMeta(
            brick_size=self.brick_size,
            level_count=len(self.levels),
            node_count=self.node_count,
            source_hash=self.source_hash,
            channels=self.channels,
            dtype=self.dtype,
            dimensions=self.meta.dimensions,
            spacing_mm=self.meta.spacing_mm,
            offset_mm=self.meta.offset_mm,
            value_range=value_range,
        )
        (out_dir / OCTREE_JSON).write_text(
            json.dumps(ometa.to_json(), indent=1), encoding="utf-8"
        )


def compute_source_hash(volume: SliceVolume) -> str:
    """Fingerprint of a volume: meta bytes, payload length, first+last slice.

    Reads the two slices directly (outside the slice-reader instrumentation):
    fingerprinting is metadata bookkeeping, not a volume pass.
    """
    meta = volume.meta
    h = fnv1a64((volume.path / "meta.json").read_bytes())
    h = fnv1a64(meta.payload_nbytes.to_bytes(8, "little"), h)
    with open(volume.data_path, "rb") as f:
        for z in (0, meta.nz - 1):
            for c in range(meta.channels):
                f.seek(c * meta.plane_nbytes + z * meta.slice_nbytes)
                h = fnv1a64(f.read(meta.slice_nbytes), h)
    return f"{h:016x}"


def build_octree(volume: SliceVolume, brick_size: int = 32,
                 cache_dir: str | os.PathLike | None = None,
                 cache_budget: int = 256 * 1024 * 1024,
                 rebuild: bool = False) -> BrickOctree:
    """Convert a volume into a cached brick octree in one sequential pass.

    The result is cached on disk keyed by (source hash, brick size); a matching
    cache is reused without touching the payload.
    """
    if brick_size not in VALID_BRICK_SIZES:
        raise ConfigError(f"brick_size must be one of {VALID_BRICK_SIZES}")
    plan_node_count(volume.meta.dimensions, brick_size)  # NodeLimitExceeded before I/O

    out_dir = Path(cache_dir) if cache_dir is not None else volume.path / f"octree_b{brick_size}"
    source_hash = compute_source_hash(volume)
    if out_dir.is_dir() and not rebuild:
        try:
            existing = BrickOctree(out_dir, cache_budget)
            if (existing.meta.source_hash == source_hash
                    and existing.meta.brick_size == brick_size):
                return existing
        except (IoError, OSError, KeyError, json.JSONDecodeError):
            pass  # stale or broken cache: rebuild

    tmp_dir = out_dir.with_name(out_dir.name + ".tmp")
    if tmp_dir.exists():
        shutil.rmtree(tmp_dir)
    tmp_dir.mkdir(parents=True)
    state = _BuildState(volume.meta, brick_size, tmp_dir, source_hash)
    builders = [
        _LevelBuilder(lv, res, state) for lv, res in enumerate(state.levels)
    ]
    for lv in range(len(builders) - 1):
        builders[lv].next = builders[lv + 1]
    try:
        for _, arr in volume.reader():
            builders[0].push(arr)
        builders[0].flush()
        state.finalize(tmp_dir)
    except Exception:
        state.bricks_file.close()
        shutil.rmtree(tmp_dir, ignore_errors=True)
        raise
    if out_dir.exists():
        shutil.rmtree(out_dir)
    tmp_dir.rename(out_dir)
    return BrickOctree(out_dir, cache_budget)


# -- reconstruction ---------------------------------------------------------------


def reconstruct_level(octree: BrickOctree, level: int) -> np.ndarray:
    """In-core (channels, nz, ny, nx) array of one resolution level."""
    if not 0 <= level < octree.level_count:
        raise OutOfRange(f"level {level} outside [0,{octree.level_count})")
    rx, ry, rz = octree.levels[level]
    c = octree.meta.channels
    out = np.empty((c, rz, ry, rx), dtype=octree._np_dtype)
    gx, gy, gz = octree.grids[level]
    b = octree.brick_size
    for bz in range(gz):
        for by in range(gy):
            for bx in range(gx):
                vx, vy, vz = octree.valid_size(level, (bx, by, bz))
                block = octree.fetch_brick(level, (bx, by, bz))
                out[:, bz * b:bz * b + vz, by * b:by * b + vy, bx * b:bx * b + vx] = (
                    block[:, :vz, :vy, :vx]
                )
    return out


def reconstruct_level0(octree: BrickOctree, out_path: str | os.PathLike) -> SliceVolume:
    """Write the level-0 content back out as a native volume (bit-exact inverse
    of build for the stored dtype), streaming one brick row at a time."""
    meta = octree.source_volume_meta()
    b = octree.brick_size
    gx, gy, gz = octree.grids[0]
    nx, ny, nz = meta.dimensions
    writer = SliceWriter(meta, out_path)
    try:
        for bz in range(gz):
            row = [
                [octree.fetch_brick(0, (bx, by, bz)) for bx in range(gx)]
                for by in range(gy)
            ]
            z0 = bz * b
            for z in range(z0, min(z0 + b, nz)):
                sl = np.empty((meta.channels, ny, nx), dtype=meta.np_dtype)
                for by in range(gy):
                    vy = min(b, ny - by * b)
                    for bx in range(gx):
                        vx = min(b, nx - bx * b)
                        sl[:, by * b:by * b + vy, bx * b:bx * b + vx] = (
                            row[by][bx][:, z - z0, :vy, :vx]
                        )
                writer.write_slice(sl)
        return writer.finalize()
    except Exception:
        writer.abort()
        raise
