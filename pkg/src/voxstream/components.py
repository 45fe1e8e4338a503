"""Streaming two-pass connected-component analysis over binary volumes.

The first pass scans the volume slice by slice, labels each slice in-plane,
records label-creation and cross-slice union events into an append-only root
file, and folds per-component accumulators (voxel counts, border contact) into
a union-find structure. Between the passes the union-find is collapsed into an
idempotent merge file mapping provisional to final ids (assigned in first-touch
scan order). The second pass re-scans the input, recomputes the deterministic
per-slice labels, and applies the merge map, so the input is read exactly twice
and at most two label slices plus the union-find are ever in memory.
"""
from __future__ import annotations

import csv
import json
import os
import struct
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import TooManyComponents, VoxstreamError
from .volume import SliceVolume, SliceWriter

# exact integer labels in f32 require ids < 2^24
MAX_COMPONENTS = 2**24

_CROSS_OFFSETS = {
    6: [(0, 0)],
    18: [(0, 0), (-1, 0), (1, 0), (0, -1), (0, 1)],
    26: [(dy, dx) for dy in (-1, 0, 1) for dx in (-1, 0, 1)],
}

_INPLANE_STRUCTURE = {
    6: ndimage.generate_binary_structure(2, 1),
    18: ndimage.generate_binary_structure(2, 2),
    26: ndimage.generate_binary_structure(2, 2),
}


def _check_connectivity(connectivity: int):
    if connectivity not in (6, 18, 26):
        raise VoxstreamError(f"connectivity must be 6, 18 or 26, got {connectivity}")


def _label_slice(fg: np.ndarray, connectivity: int) -> tuple[np.ndarray, int]:
    """In-plane labels (1..k) in first-touch raster order; 0 = background."""
    lab, k = ndimage.label(fg, structure=_INPLANE_STRUCTURE[connectivity])
    if k == 0:
        return lab.astype(np.int64), 0
    flat = lab.ravel()
    nz = np.flatnonzero(flat)
    first = np.full(k + 1, flat.size, dtype=np.int64)
    np.minimum.at(first, flat[nz], nz)
    order = np.argsort(first[1:], kind="stable")
    remap = np.zeros(k + 1, dtype=np.int64)
    remap[1 + order] = np.arange(1, k + 1)
    return remap[lab], k


def _cross_pairs(prev: np.ndarray, cur: np.ndarray, offsets) -> np.ndarray:
    """Unique (prev_label, cur_label) pairs of touching foreground voxels."""
    ny, nx = cur.shape
    chunks = []
    for dy, dx in offsets:
        cy0, cy1 = max(0, -dy), ny - max(0, dy)
        cx0, cx1 = max(0, -dx), nx - max(0, dx)
        a = prev[cy0 + dy:cy1 + dy, cx0 + dx:cx1 + dx]
        b = cur[cy0:cy1, cx0:cx1]
        m = (a > 0) & (b > 0)
        if m.any():
            chunks.append(np.stack([a[m], b[m]], axis=1))
    if not chunks:
        return np.empty((0, 2), dtype=np.int64)
    return np.unique(np.concatenate(chunks, axis=0), axis=0)


class _UnionFind:
    """Union-find over provisional labels with mergeable accumulators."""

    def __init__(self):
        self.parent: list[int] = []
        self.size: list[int] = []
        self.count: list[int] = []
        self.border: list[bool] = []

    @property
    def n(self) -> int:
        return len(self.parent)

    def add(self, k: int):
        start = self.n
        self.parent.extend(range(start, start + k))
        self.size.extend([1] * k)
        self.count.extend([0] * k)
        self.border.extend([False] * k)

    def find(self, i: int) -> int:
        p = self.parent
        while p[i] != i:
            p[i] = p[p[i]]
            i = p[i]
        return i

    def union(self, a: int, b: int):
        ra, rb = self.find(a), self.find(b)
        if ra == rb:
            return
        if self.size[ra] < self.size[rb]:
            ra, rb = rb, ra
        self.parent[rb] = ra
        self.size[ra] += self.size[rb]
        self.count[ra] += self.count[rb]
        self.border[ra] = self.border[ra] or self.border[rb]


@dataclass
class Component:
    id: int
    voxels: int
    min_x: int
    min_y: int
    min_z: int
    max_x: int
    max_y: int
    max_z: int
    centroid_x: float
    centroid_y: float
    centroid_z: float


_CSV_FIELDS = ["id", "voxels", "min_x", "min_y", "min_z", "max_x", "max_y",
               "max_z", "centroid_x", "centroid_y", "centroid_z"]


class ComponentTable:
    def __init__(self, components: list[Component]):
        self.components = components

    def __len__(self):
        return len(self.components)

    def __iter__(self):
        return iter(self.components)

    def __getitem__(self, i):
        return self.components[i]

    def to_csv(self, path):
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(_CSV_FIELDS)
            for c in self.components:
                w.writerow([getattr(c, k) for k in _CSV_FIELDS])

    def to_json(self, path=None):
        rows = [{k: getattr(c, k) for k in _CSV_FIELDS} for c in self.components]
        if path is None:
            return rows
        Path(path).write_text(json.dumps(rows, indent=1), encoding="utf-8")
        return rows


class _ProvisionalStore:
    """Append-only root file (creation + union events) and the merge file."""

    def __init__(self, out_path: Path):
        out_path = Path(out_path)
        self.root_path = out_path.parent / (out_path.name + ".root")
        self.merge_path = out_path.parent / (out_path.name + ".merge")
        self._root = open(self.root_path, "wb")

    def append_slice(self, n_new: int, pairs: np.ndarray):
        self._root.write(struct.pack("<II", n_new, len(pairs)))
        if len(pairs):
            self._root.write(pairs.astype("<u8").tobytes())

    def write_merge(self, merge_map: np.ndarray):
        self._root.close()
        merge_map.astype("<u8").tofile(self.merge_path)

    def cleanup(self):
        try:
            self._root.close()
        except Exception:
            pass
        for p in (self.root_path, self.merge_path):
            try:
                p.unlink()
            except FileNotFoundError:
                pass


def _scan_pass1(volume: SliceVolume, connectivity: int, invert: bool,
                store: _ProvisionalStore):
    """First pass: provisional labels, union events, per-root accumulators."""
    offsets = _CROSS_OFFSETS[connectivity]
    uf = _UnionFind()
    slice_bases = []
    prev_global = None
    nz = volume.meta.nz
    max_value = 0.0
    for z, sl in volume.reader():
        plane = sl[0]
        fg = (plane == 0) if invert else (plane != 0)
        if not invert and fg.any():
            max_value = max(max_value, float(plane.max()))
        lab, k = _label_slice(fg, connectivity)
        base = uf.n
        slice_bases.append(base)
        uf.add(k)
        if k:
            counts = np.bincount(lab.ravel(), minlength=k + 1)
            for l in range(1, k + 1):
                uf.count[base + l - 1] += int(counts[l])
            border_labels = set()
            if z == 0 or z == nz - 1:
                border_labels.update(range(1, k + 1))
            else:
                for edge in (lab[0, :], lab[-1, :], lab[:, 0], lab[:, -1]):
                    border_labels.update(int(v) for v in np.unique(edge) if v)
            for l in border_labels:
                uf.border[base + l - 1] = True
        glab = np.where(lab > 0, lab + base, 0)
        pairs = (
            _cross_pairs(prev_global, glab, offsets)
            if prev_global is not None
            else np.empty((0, 2), dtype=np.int64)
        )
        store.append_slice(k, pairs)
        for a, b in pairs:
            uf.union(int(a) - 1, int(b) - 1)
        prev_global = glab
    return uf, slice_bases, max_value


def _finalize_merge(uf: _UnionFind) -> tuple[np.ndarray, int]:
    """Merge map provisional id (1-based) -> final id, first-touch order."""
    n = uf.n
    merge = np.zeros(n + 1, dtype=np.int64)
    final_of_root: dict[int, int] = {}
    next_id = 0
    for i in range(n):
        r = uf.find(i)
        fid = final_of_root.get(r)
        if fid is None:
            next_id += 1
            fid = next_id
            final_of_root[r] = fid
        merge[i + 1] = fid
    if next_id > MAX_COMPONENTS:
        raise TooManyComponents(f"{next_id} components exceed {MAX_COMPONENTS}")
    return merge, next_id


def label_components(volume: SliceVolume, connectivity: int = 26,
                     out_path: str | os.PathLike = None
                     ) -> tuple[SliceVolume, ComponentTable]:
    """Label connected foreground components; ids are dense, 1-based, assigned
    in first-touch scan order. Returns the label volume and component table.

    The label volume uses u16 when possible and f32 beyond 65535 components
    (f32 keeps ids exact up to 2^24).
    """
    _check_connectivity(connectivity)
    if volume.meta.channels != 1:
        raise VoxstreamError("connected components expects a single-channel volume")
    out_path = Path(out_path if out_path is not None else volume.path.parent / "labels")
    store = _ProvisionalStore(out_path)
    try:
        uf, _, _ = _scan_pass1(volume, connectivity, False, store)
        merge, n_components = _finalize_merge(uf)
        store.write_merge(merge.clip(min=0))

        dtype = "u16" if n_components <= 65535 else "f32"
        meta = replace(volume.meta, dtype=dtype, value_range=None)
        writer = SliceWriter(meta, out_path)
        k1 = n_components + 1
        counts = np.zeros(k1, dtype=np.int64)
        mins = np.full((k1, 3), np.iinfo(np.int64).max, dtype=np.int64)
        maxs = np.full((k1, 3), -1, dtype=np.int64)
        sums = np.zeros((k1, 3), dtype=np.float64)
        base = 0
        try:
            for z, sl in volume.reader():
                fg = sl[0] != 0
                lab, k = _label_slice(fg, connectivity)
                final_ids = merge[np.where(lab > 0, lab + base, 0)]
                base += k
                writer.write_slice(final_ids.astype(meta.np_dtype)[np.newaxis])
                ys, xs = np.nonzero(final_ids)
                if len(ys):
                    ids = final_ids[ys, xs]
                    counts += np.bincount(ids, minlength=k1)
                    np.minimum.at(mins[:, 0], ids, xs)
                    np.minimum.at(mins[:, 1], ids, ys)
                    np.minimum.at(mins[:, 2], ids, z)
                    np.maximum.at(maxs[:, 0], ids, xs)
                    np.maximum.at(maxs[:, 1], ids, ys)
                    np.maximum.at(maxs[:, 2], ids, z)
                    sums[:, 0] += np.bincount(ids, weights=xs, minlength=k1)
                    sums[:, 1] += np.bincount(ids, weights=ys, minlength=k1)
                    sums[:, 2] += np.bincount(ids, weights=np.full(len(ys), z), minlength=k1)
            labels_vol = writer.finalize()
        except Exception:
            writer.abort()
            raise
        components = [
            Component(
                id=i,
                voxels=int(counts[i]),
                min_x=int(mins[i, 0]), min_y=int(mins[i, 1]), min_z=int(mins[i, 2]),
                max_x=int(maxs[i, 0]), max_y=int(maxs[i, 1]), max_z=int(maxs[i, 2]),
                centroid_x=float(sums[i, 0] / counts[i]),
                centroid_y=float(sums[i, 1] / counts[i]),
                centroid_z=float(sums[i, 2] / counts[i]),
            )
            for i in range(1, n_components + 1)
        ]
        table = ComponentTable(components)
    except Exception:
        raise  # keep root/merge files for debugging
    store.cleanup()
    return labels_vol, table


def filter_components(volume: SliceVolume, connectivity: int = 26,
                      min_voxels: int = 1,
                      out_path: str | os.PathLike = None) -> SliceVolume:
    """Clear foreground components smaller than min_voxels."""
    out_path = Path(out_path if out_path is not None else volume.path.parent / "filtered")
    _check_connectivity(connectivity)
    store = _ProvisionalStore(out_path)
    try:
        uf, _, _ = _scan_pass1(volume, connectivity, False, store)
        merge, n_components = _finalize_merge(uf)
        store.write_merge(merge.clip(min=0))
        keep = np.zeros(n_components + 1, dtype=bool)
        for i in range(uf.n):
            r = uf.find(i)
            keep[merge[i + 1]] = uf.count[r] >= min_voxels
        keep[0] = False
        writer = SliceWriter(replace(volume.meta, value_range=None), out_path)
        base = 0
        try:
            for z, sl in volume.reader():
                plane = sl[0]
                lab, k = _label_slice(plane != 0, connectivity)
                final_ids = merge[np.where(lab > 0, lab + base, 0)]
                base += k
                out = np.where(keep[final_ids], plane, 0).astype(volume.meta.np_dtype)
                writer.write_slice(out[np.newaxis])
            result = writer.finalize()
        except Exception:
            writer.abort()
            raise
    except Exception:
        raise
    store.cleanup()
    return result


def fill_cavities(volume: SliceVolume, background_connectivity: int = 6,
                  out_path: str | os.PathLike = None) -> SliceVolume:
    """Turn background components not connected to the volume border into
    foreground (the digital-topology dual pairs foreground 26 with background 6)."""
    out_path = Path(out_path if out_path is not None else volume.path.parent / "filled")
    _check_connectivity(background_connectivity)
    store = _ProvisionalStore(out_path)
    try:
        uf, _, max_value = _scan_pass1(volume, background_connectivity, True, store)
        merge, n_components = _finalize_merge(uf)
        store.write_merge(merge.clip(min=0))
        cavity = np.zeros(n_components + 1, dtype=bool)
        for i in range(uf.n):
            r = uf.find(i)
            cavity[merge[i + 1]] = not uf.border[r]
        cavity[0] = False
        fill = volume.meta.np_dtype.type(max_value) if max_value else (
            np.float32(1.0) if volume.meta.dtype == "f32"
            else volume.meta.np_dtype.type(np.iinfo(volume.meta.np_dtype).max)
        )
        writer = SliceWriter(replace(volume.meta, value_range=None), out_path)
        base = 0
        try:
            for z, sl in volume.reader():
                plane = sl[0]
                lab, k = _label_slice(plane == 0, background_connectivity)
                final_ids = merge[np.where(lab > 0, lab + base, 0)]
                base += k
                out = np.where(cavity[final_ids], fill, plane).astype(volume.meta.np_dtype)
                writer.write_slice(out[np.newaxis])
            result = writer.finalize()
        except Exception:
            writer.abort()
            raise
    except Exception:
        raise
    store.cleanup()
    return result
