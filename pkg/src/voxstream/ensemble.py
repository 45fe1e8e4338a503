"""Ensemble ingestion, metadata caching, filtering, and aggregation.

An ensemble is a directory of member directories; each member holds one entry
per time step, where an entry is either a native volume directory (single
field) or a directory of field-named volume directories. The first scan reads
every payload once to fill in missing per-field (min, max) metadata and caches
everything in ensemble.json next to the member directories; later scans verify
file fingerprints and skip the payloads entirely. Volumes are served through a
byte-budgeted LRU cache.
"""
from __future__ import annotations

import json
import os
import threading
import warnings
from collections import OrderedDict
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import (
    ConfigError,
    EmptyEnsemble,
    InsufficientSamples,
    MissingField,
    ShapeMismatch,
    UnknownName,
    VoxstreamError,
)
from .volume import SliceVolume, SliceWriter, VolumeMeta, read_meta

ENSEMBLE_JSON = "ensemble.json"
FORMAT_VERSION = 1


@dataclass
class VolumeRef:
    path: Path
    meta: VolumeMeta

    def open(self) -> SliceVolume:
        return SliceVolume(self.path, self.meta)

    def bounds_mm(self):
        return self.meta.bounds_mm()


@dataclass
class TimeStep:
    name: str
    timestamp: float
    fields: dict[str, VolumeRef]


@dataclass
class Member:
    name: str
    steps: list[TimeStep]

    def field_set(self) -> set[str]:
        """Fields present at every step of this member."""
        if not self.steps:
            return set()
        common = set(self.steps[0].fields)
        for s in self.steps[1:]:
            common &= set(s.fields)
        return common

    def time_range(self) -> tuple[float, float]:
        ts = [s.timestamp for s in self.steps]
        return min(ts), max(ts)


@dataclass
class ScanStats:
    volumes: int = 0
    payload_slices_read: int = 0
    from_cache: bool = False


class VolumeCache:
    """LRU cache of fully loaded volumes under a byte budget (thread-safe)."""

    def __init__(self, budget_bytes: int = 1024**3):
        self.budget = int(budget_bytes)
        self._items: OrderedDict[str, np.ndarray] = OrderedDict()
        self.resident_bytes = 0
        self.disk_loads = 0
        self._lock = threading.Lock()

    def get(self, ref: VolumeRef) -> np.ndarray:
        key = str(ref.path)
        with self._lock:
            arr = self._items.get(key)
            if arr is not None:
                self._items.move_to_end(key)
                return arr
        arr = ref.open().read_full()
        arr.flags.writeable = False
        with self._lock:
            self.disk_loads += 1
            if arr.nbytes > self.budget:
                raise ConfigError(
                    f"volume cache budget {self.budget} smaller than one volume "
                    f"({arr.nbytes} bytes)"
                )
            while self.resident_bytes + arr.nbytes > self.budget and self._items:
                _, old = self._items.popitem(last=False)
                self.resident_bytes -= old.nbytes
            self._items[key] = arr
            self.resident_bytes += arr.nbytes
        return arr


class EnsembleDataset:
    def __init__(self, root: Path, members: list[Member], cache: VolumeCache,
                 stats: ScanStats | None = None):
        if not members or all(not m.steps for m in members):
            raise EmptyEnsemble(f"no members with time steps under {root}")
        self.root = Path(root)
        self.members = members
        self.cache = cache
        self.scan_stats = stats or ScanStats()
        self._recompute()

    # -- derived metadata -------------------------------------------------------

    def _recompute(self):
        self.common_fields = None
        self.union_fields = set()
        for m in self.members:
            fs = m.field_set()
            self.union_fields |= {f for s in m.steps for f in s.fields}
            self.common_fields = fs if self.common_fields is None else (
                self.common_fields & fs
            )
        self.common_fields = self.common_fields or set()

        ranges = [m.time_range() for m in self.members]
        self.union_time_range = (min(r[0] for r in ranges), max(r[1] for r in ranges))
        self.common_time_range = (max(r[0] for r in ranges), min(r[1] for r in ranges))

        los, his = [], []
        for m in self.members:
            for s in m.steps:
                for ref in s.fields.values():
                    lo, hi = ref.bounds_mm()
                    los.append(lo)
                    his.append(hi)
        los = np.asarray(los)
        his = np.asarray(his)
        self.union_bounds = (tuple(los.min(axis=0)), tuple(his.max(axis=0)))
        self.common_bounds = (tuple(los.max(axis=0)), tuple(his.min(axis=0)))

        self.field_ranges: dict[str, list[tuple[float, float]]] = {}
        self.field_channels: dict[str, int] = {}
        for m in self.members:
            for s in m.steps:
                for name, ref in s.fields.items():
                    ch = ref.meta.channels
                    if self.field_channels.setdefault(name, ch) != ch:
                        raise VoxstreamError(f"field {name!r} channel count varies")
                    vr = ref.meta.value_range
                    if vr is None:
                        continue
                    cur = self.field_ranges.get(name)
                    if cur is None:
                        self.field_ranges[name] = [tuple(p) for p in vr]
                    else:
                        self.field_ranges[name] = [
                            (min(a[0], b[0]), max(a[1], b[1]))
                            for a, b in zip(cur, vr)
                        ]

    # -- accessors ----------------------------------------------------------------

    def member(self, name: str) -> Member:
        for m in self.members:
            if m.name == name:
                return m
        raise UnknownName(f"no member named {name!r}")

    def member_names(self) -> list[str]:
        return [m.name for m in self.members]

    def volume_ref(self, member: str, time_index: int, field: str) -> VolumeRef:
        m = self.member(member)
        if not 0 <= time_index < len(m.steps):
            raise UnknownName(f"member {member!r} has no time step {time_index}")
        step = m.steps[time_index]
        if field not in step.fields:
            raise MissingField(f"{member}/{step.name} has no field {field!r}")
        return step.fields[field]

    def get_volume(self, member: str, time_index: int, field: str) -> np.ndarray:
        """Fully loaded (channels, nz, ny, nx) array via the LRU volume cache."""
        return self.cache.get(self.volume_ref(member, time_index, field))

    def iter_selection(self, field: str, members=None, time_window=None):
        """(member, step_index, ref) triples in fixed (member, time) order."""
        names = self.member_names() if members is None else list(members)
        for name in sorted(names):
            m = self.member(name)
            for i, step in enumerate(m.steps):
                if time_window is not None:
                    t0, t1 = time_window
                    if not t0 <= step.timestamp <= t1:
                        continue
                if field not in step.fields:
                    raise MissingField(f"{name}/{step.name} lacks field {field!r}")
                yield name, i, step.fields[field]

    def structural_key(self):
        """Hashable summary used to compare cold and warm scans."""
        return tuple(
            (
                m.name,
                tuple(
                    (
                        s.name,
                        s.timestamp,
                        tuple(sorted((f, str(r.path)) for f, r in s.fields.items())),
                    )
                    for s in m.steps
                ),
            )
            for m in self.members
        )


# -- scanning ------------------------------------------------------------------------


def _volume_dirs_of_step(step_dir: Path) -> dict[str, Path]:
    if (step_dir / "meta.json").is_file():
        return {None: step_dir}  # single-field entry; name resolved from meta
    fields = {}
    for sub in sorted(p for p in step_dir.iterdir() if p.is_dir()):
        if (sub / "meta.json").is_file():
            fields[sub.name] = sub
    return fields


def _fingerprint(path: Path) -> list:
    st = path.stat()
    return [st.st_size, st.st_mtime_ns]


def _walk_tree(root: Path) -> list[tuple[str, str, dict[str, Path]]]:
    """(member, step_name, field->volume_dir) entries; cheap directory listing."""
    entries = []
    for member_dir in sorted(p for p in root.iterdir() if p.is_dir()):
        for step_dir in sorted(p for p in member_dir.iterdir() if p.is_dir()):
            fields = _volume_dirs_of_step(step_dir)
            if fields:
                entries.append((member_dir.name, step_dir.name, fields))
    return entries


def scan_ensemble(root: str | os.PathLike, cache_budget: int = 1024**3,
                  use_cache: bool = True, progress=None,
                  cancel: threading.Event | None = None) -> EnsembleDataset:
    """Build the ensemble index, computing and persisting missing value ranges.

    The first scan streams every payload once; subsequent scans with valid
    fingerprints read only ensemble.json and the per-volume meta headers. A
    cancelled scan raises KeyboardInterrupt without writing the cache file.
    """
    root = Path(root)
    if not root.is_dir():
        raise EmptyEnsemble(f"{root} is not a directory")
    entries = _walk_tree(root)
    if not entries:
        raise EmptyEnsemble(f"no member/time-step volumes under {root}")

    cache_path = root / ENSEMBLE_JSON
    if use_cache and cache_path.is_file():
        dataset = _load_cached(root, entries, cache_path, cache_budget)
        if dataset is not None:
            return dataset

    stats = ScanStats()
    members: dict[str, list[TimeStep]] = {}
    fingerprints = {}
    total = len(entries)
    for i, (member, step_name, fields) in enumerate(entries):
        if cancel is not None and cancel.is_set():
            raise KeyboardInterrupt("ensemble scan cancelled")
        resolved: dict[str, VolumeRef] = {}
        for fname, vdir in fields.items():
            vol = SliceVolume(vdir)
            vol.ensure_value_range()  # payload pass only when missing from meta
            stats.volumes += 1
            stats.payload_slices_read += vol.read_slice_count
            name = fname if fname is not None else (vol.meta.field or "default")
            resolved[name] = VolumeRef(vdir, vol.meta)
            rel = str(vdir.relative_to(root))
            fingerprints[rel] = {
                "data": _fingerprint(vdir / "data.raw"),
                "meta": _fingerprint(vdir / "meta.json"),
            }
        members.setdefault(member, []).append(
            TimeStep(step_name, _step_timestamp(resolved), resolved)
        )
        if progress is not None:
            progress((i + 1) / total)

    member_list = _order_members(members)
    dataset = EnsembleDataset(root, member_list, VolumeCache(cache_budget), stats)
    _write_cache(cache_path, root, dataset, fingerprints)
    return dataset


def _step_timestamp(fields: dict[str, VolumeRef]) -> float | None:
    for ref in fields.values():
        if ref.meta.timestamp_s is not None:
            return float(ref.meta.timestamp_s)
    return None


def _order_members(members: dict[str, list[TimeStep]]) -> list[Member]:
    out = []
    for name in sorted(members):
        steps = members[name]
        # files without timestamps get their lexicographic rank as seconds
        ranked = sorted(steps, key=lambda s: s.name)
        for i, s in enumerate(ranked):
            if s.timestamp is None:
                s.timestamp = float(i)
        ordered = sorted(ranked, key=lambda s: (s.timestamp, s.name))
        seen = {}
        for s in ordered:
            if s.timestamp in seen:
                warnings.warn(
                    f"member {name!r}: duplicate timestamp {s.timestamp} "
                    f"({seen[s.timestamp]} and {s.name}); kept in filename order"
                )
            seen.setdefault(s.timestamp, s.name)
        out.append(Member(name, ordered))
    return out


def _write_cache(cache_path: Path, root: Path, dataset: EnsembleDataset,
                 fingerprints: dict):
    doc = {
        "format_version": FORMAT_VERSION,
        "members": [
            {
                "name": m.name,
                "steps": [
                    {
                        "name": s.name,
                        "timestamp": s.timestamp,
                        "fields": {
                            f: str(r.path.relative_to(root))
                            for f, r in s.fields.items()
                        },
                    }
                    for s in m.steps
                ],
            }
            for m in dataset.members
        ],
        "fingerprints": fingerprints,
    }
    tmp = cache_path.with_suffix(".tmp")
    tmp.write_text(json.dumps(doc, indent=1), encoding="utf-8")
    tmp.replace(cache_path)


def _load_cached(root: Path, entries, cache_path: Path,
                 cache_budget: int) -> EnsembleDataset | None:
    try:
        doc = json.loads(cache_path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError):
        return None
    if doc.get("format_version") != FORMAT_VERSION:
        return None
    fingerprints = doc.get("fingerprints", {})
    # the tree must contain exactly the cached volumes, unchanged
    current = set()
    for _, _, fields in entries:
        for vdir in fields.values():
            current.add(str(vdir.relative_to(root)))
    if current != set(fingerprints):
        return None
    for rel, fp in fingerprints.items():
        vdir = root / rel
        try:
            if (_fingerprint(vdir / "data.raw") != fp["data"]
                    or _fingerprint(vdir / "meta.json") != fp["meta"]):
                return None
        except OSError:
            return None
    members = []
    for mdoc in doc["members"]:
        steps = []
        for sdoc in mdoc["steps"]:
            fields = {}
            for fname, rel in sdoc["fields"].items():
                vdir = root / rel
                fields[fname] = VolumeRef(vdir, read_meta(vdir))
            steps.append(TimeStep(sdoc["name"], float(sdoc["timestamp"]), fields))
        members.append(Member(mdoc["name"], steps))
    stats = ScanStats(volumes=len(fingerprints), from_cache=True)
    return EnsembleDataset(root, members, VolumeCache(cache_budget), stats)


# -- filtering -------------------------------------------------------------------------


def filter_dataset(dataset: EnsembleDataset, members=None, time_range=None,
                   fields=None) -> EnsembleDataset:
    """Metadata-only stackable view; filters compose and commute."""
    keep_members = None
    if members is not None:
        keep_members = set(members)
        unknown = keep_members - set(dataset.member_names())
        if unknown:
            raise UnknownName(f"unknown members: {sorted(unknown)}")
    keep_fields = None
    if fields is not None:
        keep_fields = set(fields)
        unknown = keep_fields - dataset.union_fields
        if unknown:
            raise UnknownName(f"unknown fields: {sorted(unknown)}")

    new_members = []
    for m in dataset.members:
        if keep_members is not None and m.name not in keep_members:
            continue
        steps = []
        for s in m.steps:
            if time_range is not None and not time_range[0] <= s.timestamp <= time_range[1]:
                continue
            fdict = {
                f: r for f, r in s.fields.items()
                if keep_fields is None or f in keep_fields
            }
            if fdict:
                steps.append(TimeStep(s.name, s.timestamp, fdict))
        if steps:
            new_members.append(Member(m.name, steps))
    return EnsembleDataset(dataset.root, new_members, dataset.cache, dataset.scan_stats)


# -- aggregation -----------------------------------------------------------------------


def aggregate(dataset: EnsembleDataset, fieldname: str, members=None,
              time_window=None, stat: str = "mean",
              out: str | os.PathLike | None = None) -> SliceVolume:
    """Per-voxel mean / variance / stddev across selected (member, step) volumes.

    Accumulates in f64 with one volume resident at a time; variance uses the
    unbiased (n-1) denominator.
    """
    if stat not in ("mean", "variance", "stddev"):
        raise VoxstreamError(f"stat must be mean, variance or stddev, got {stat!r}")
    refs = [r for _, _, r in dataset.iter_selection(fieldname, members, time_window)]
    n = len(refs)
    if n == 0 or (stat in ("variance", "stddev") and n < 2):
        raise InsufficientSamples(
            f"{stat} needs {'2' if stat != 'mean' else '1'}+ volumes, got {n}"
        )
    meta0 = refs[0].meta
    for r in refs[1:]:
        if r.meta.dimensions != meta0.dimensions or r.meta.channels != meta0.channels:
            raise ShapeMismatch(
                f"{r.path}: {r.meta.dimensions} vs {meta0.dimensions}"
            )
    shape = (meta0.channels, meta0.nz, meta0.ny, meta0.nx)
    acc = np.zeros(shape, dtype=np.float64)
    acc2 = np.zeros(shape, dtype=np.float64) if stat != "mean" else None
    for r in refs:
        arr = r.open().read_full().astype(np.float64)
        acc += arr
        if acc2 is not None:
            acc2 += arr * arr
    mean = acc / n
    if stat == "mean":
        result = mean
    else:
        var = np.maximum(0.0, (acc2 - n * mean * mean) / (n - 1))
        result = var if stat == "variance" else np.sqrt(var)

    out = Path(out) if out is not None else dataset.root / ".voxstream" / f"{fieldname}_{stat}"
    meta = VolumeMeta(
        dimensions=meta0.dimensions,
        spacing_mm=meta0.spacing_mm,
        offset_mm=meta0.offset_mm,
        dtype="f32",
        channels=meta0.channels,
        field=f"{fieldname}:{stat}",
    )
    writer = SliceWriter(meta, out)
    try:
        for z in range(meta.nz):
            writer.write_slice(result[:, z].astype(np.float32))
        return writer.finalize()
    except Exception:
        writer.abort()
        raise
