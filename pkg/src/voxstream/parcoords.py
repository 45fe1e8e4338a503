"""Parallel-coordinates extraction, brushing, transfer-function clamping, and
axis-intersection voxel masks.

Lines are (spatial sample, run, time) tuples sharing one seeded set of sample
positions across all axes; every channel of a multi-channel field is its own
axis. Values live in a linear f32 array addressed by per-(run, axis) offsets.
"""
from __future__ import annotations

import json
import os
import threading
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    EmptySampleDomain,
    MissingField,
    TooManyAxes,
    VoxstreamError,
)
from .ensemble import EnsembleDataset
from .render import TransferFunction
from .similarity import _voxel_indices, sample_positions
from .volume import SliceVolume, SliceWriter, VolumeMeta

PARCOORDS_MAGIC = b"VXPC"


@dataclass
class AxisDesc:
    field: str
    channel: int = 0
    time_step: float | None = None  # time-histogram mode: the axis's timestamp

    @property
    def label(self) -> str:
        if self.time_step is not None:
            return f"{self.field}@t={self.time_step:g}"
        return self.field if self.channel == 0 else f"{self.field}[{self.channel}]"

    def to_json(self):
        return {"field": self.field, "channel": self.channel,
                "time_step": self.time_step}

    @classmethod
    def from_json(cls, doc):
        return cls(doc["field"], int(doc["channel"]), doc.get("time_step"))


@dataclass
class BrushSelection:
    """Per-axis optional [lo, hi] intervals in data units, plus display order."""

    intervals: dict[int, tuple[float, float]] = field(default_factory=dict)
    order: list[int] | None = None

    def __post_init__(self):
        for a, (lo, hi) in self.intervals.items():
            if lo > hi:
                raise VoxstreamError(f"brush on axis {a}: lo {lo} > hi {hi}")


class ParCoordsData:
    """values[run, axis, time, sample] plus axis/run descriptors."""

    def __init__(self, values: np.ndarray, axes: list[AxisDesc], runs: list[str],
                 seed: int, axis_times: list[float], positions: np.ndarray):
        self.values = values.astype(np.float32)
        self.axes = axes
        self.runs = runs
        self.seed = seed
        self.axis_times = [float(t) for t in axis_times]
        self.positions = positions
        r, a, t, n = values.shape
        if a != len(axes) or r != len(runs):
            raise VoxstreamError("value array shape does not match descriptors")
        self.n_spatial = n
        self.t_samples = t

    @property
    def lines_per_run(self) -> int:
        return self.t_samples * self.n_spatial

    @property
    def line_count(self) -> int:
        return len(self.runs) * self.lines_per_run

    def offsets(self) -> dict:
        """Linear-array block starts per (run, axis)."""
        a = len(self.axes)
        block = self.lines_per_run
        return {
            f"{r}:{ax}": (ri * a + ax) * block
            for ri, r in enumerate(self.runs)
            for ax in range(a)
        }

    def line_values(self, axis: int) -> np.ndarray:
        """(line_count,) values of one axis, lines ordered (run, time, sample)."""
        return self.values[:, axis].reshape(-1)

    def axis_range(self, axis: int) -> tuple[float, float]:
        v = self.values[:, axis]
        return float(v.min()), float(v.max())

    def summary(self) -> dict:
        return {
            "runs": self.runs,
            "axes": [a.label for a in self.axes],
            "axis_ranges": [list(self.axis_range(i)) for i in range(len(self.axes))],
            "n_spatial": self.n_spatial,
            "t_samples": self.t_samples,
            "seed": self.seed,
            "axis_times": self.axis_times,
            "line_count": self.line_count,
        }

    def save(self, path):
        header = {
            "version": 1,
            "runs": self.runs,
            "axes": [a.to_json() for a in self.axes],
            "n_spatial": self.n_spatial,
            "t_samples": self.t_samples,
            "seed": self.seed,
            "axis_times": self.axis_times,
            "offsets": self.offsets(),
        }
        raw = json.dumps(header, sort_keys=True).encode("utf-8")
        with open(path, "wb") as f:
            f.write(PARCOORDS_MAGIC)
            f.write(len(raw).to_bytes(4, "little"))
            f.write(raw)
            f.write(np.ascontiguousarray(self.positions, dtype="<f8").tobytes())
            f.write(np.ascontiguousarray(self.values, dtype="<f4").tobytes())

    @classmethod
    def load(cls, path) -> "ParCoordsData":
        with open(path, "rb") as f:
            if f.read(4) != PARCOORDS_MAGIC:
                raise VoxstreamError(f"{path} is not a parallel-coordinates file")
            hlen = int.from_bytes(f.read(4), "little")
            header = json.loads(f.read(hlen).decode("utf-8"))
            n = int(header["n_spatial"])
            t = int(header["t_samples"])
            runs = header["runs"]
            axes = [AxisDesc.from_json(a) for a in header["axes"]]
            positions = np.frombuffer(f.read(n * 3 * 8), dtype="<f8").reshape(n, 3)
            values = np.frombuffer(f.read(), dtype="<f4").reshape(
                len(runs), len(axes), t, n
            )
        return cls(values.copy(), axes, runs, int(header["seed"]),
                   header["axis_times"], positions.copy())


def _nearest_step(member, t: float) -> int:
    """Index of the member step with the closest timestamp (ties: earlier)."""
    best, best_d = 0, None
    for i, s in enumerate(member.steps):
        d = abs(s.timestamp - t)
        if best_d is None or d < best_d - 1e-12:
            best, best_d = i, d
    return best


def _axes_for_fields(dataset: EnsembleDataset, fields) -> list[AxisDesc]:
    axes = []
    for f in fields:
        ch = dataset.field_channels.get(f)
        if ch is None:
            raise MissingField(f"field {f!r} not present in the dataset")
        for c in range(ch):
            axes.append(AxisDesc(f, c))
    return axes


def extract_parcoords(dataset: EnsembleDataset, fields, n_spatial: int,
                      t_samples: int, seed: int,
                      mask: SliceVolume | None = None) -> ParCoordsData:
    """Sample every axis at shared positions over uniform times.

    Temporal sampling is uniform over the common time range with each run
    snapping to its nearest available step.
    """
    if n_spatial < 1 or t_samples < 1:
        raise VoxstreamError("n_spatial and t_samples must be >= 1")
    axes = _axes_for_fields(dataset, list(fields))
    positions = sample_positions(dataset, n_spatial, seed, mask)
    t0, t1 = dataset.common_time_range
    times = (np.linspace(t0, t1, t_samples) if t_samples > 1
             else np.asarray([(t0 + t1) / 2.0]))
    runs = dataset.member_names()
    values = np.empty((len(runs), len(axes), t_samples, n_spatial),
                      dtype=np.float32)
    for ri, run in enumerate(runs):
        member = dataset.member(run)
        for ti, t in enumerate(times):
            si = _nearest_step(member, float(t))
            for ai, ax in enumerate(axes):
                arr = dataset.get_volume(run, si, ax.field)
                ref = dataset.volume_ref(run, si, ax.field)
                zi, yi, xi = _voxel_indices(positions, ref.meta)
                values[ri, ai, ti] = arr[ax.channel, zi, yi, xi]
    return ParCoordsData(values, axes, runs, seed, times.tolist(), positions)


def time_histogram_axes(dataset: EnsembleDataset, fieldname: str,
                        members=None, n_spatial: int = 1024, seed: int = 0,
                        mask: SliceVolume | None = None) -> ParCoordsData:
    """One axis per chronological time step of a single scalar field."""
    ds = dataset
    if members is not None:
        from .ensemble import filter_dataset
        ds = filter_dataset(dataset, members=list(members))
    if ds.field_channels.get(fieldname) != 1:
        raise VoxstreamError("time-histogram mode expects a scalar field")
    t0, t1 = ds.common_time_range
    n_axes = min(
        sum(1 for s in m.steps if t0 <= s.timestamp <= t1) for m in ds.members
    )
    if n_axes < 1:
        raise VoxstreamError("no common time steps for the time histogram")
    times = np.linspace(t0, t1, n_axes) if n_axes > 1 else np.asarray([t0])
    positions = sample_positions(ds, n_spatial, seed, mask)
    runs = ds.member_names()
    values = np.empty((len(runs), n_axes, 1, n_spatial), dtype=np.float32)
    axes = []
    for ti, t in enumerate(times):
        axes.append(AxisDesc(fieldname, 0, time_step=float(t)))
    for ri, run in enumerate(runs):
        member = ds.member(run)
        for ti, t in enumerate(times):
            si = _nearest_step(member, float(t))
            arr = ds.get_volume(run, si, fieldname)
            ref = ds.volume_ref(run, si, fieldname)
            zi, yi, xi = _voxel_indices(positions, ref.meta)
            values[ri, ti, 0] = arr[0, zi, yi, xi]
    return ParCoordsData(values, axes, runs, seed, times.tolist(), positions)


# -- brushing --------------------------------------------------------------------------


@dataclass
class BrushResult:
    selected: np.ndarray            # bool over lines, ordered (run, time, sample)
    per_axis_fraction: dict[int, float]
    fraction: float

    @property
    def count(self) -> int:
        return int(self.selected.sum())


def apply_brush(data: ParCoordsData, selection: BrushSelection) -> BrushResult:
    """A line is selected iff it lies inside every brushed axis's interval.

    Unbrushed axes impose no constraint; the axis display order never affects
    the result.
    """
    n_lines = data.line_count
    selected = np.ones(n_lines, dtype=bool)
    per_axis = {}
    for axis, (lo, hi) in selection.intervals.items():
        if not 0 <= axis < len(data.axes):
            raise VoxstreamError(f"axis {axis} out of range")
        v = data.line_values(axis)
        m = (v >= lo) & (v <= hi)
        per_axis[axis] = float(m.mean())
        selected &= m
    return BrushResult(selected, per_axis, float(selected.mean()))


def tf_clamp(selection: BrushSelection, tfs: dict[int, TransferFunction]
             ) -> dict[int, TransferFunction]:
    """Intersect each mapped transfer function's window with its axis brush.

    Brush intervals here are in the transfer functions' normalized domain. A
    disjoint brush/window pair yields a fully transparent function.
    """
    if len(tfs) > 4:
        raise TooManyAxes(f"{len(tfs)} transfer-function axes; at most 4")
    out = {}
    for axis, tf in tfs.items():
        if axis not in selection.intervals:
            out[axis] = tf
            continue
        blo, bhi = selection.intervals[axis]
        wlo, whi = tf.window
        lo, hi = max(wlo, blo), min(whi, bhi)
        if lo >= hi:
            out[axis] = TransferFunction(points=tf.points, window=(wlo, whi),
                                         transparent=True)
        else:
            out[axis] = TransferFunction(points=tf.points, window=(lo, hi))
    return out


# -- intersection mask -------------------------------------------------------------------


def intersection_mask(dataset: EnsembleDataset, member: str, time_index: int,
                      data: ParCoordsData, selection: BrushSelection,
                      out_path: str | os.PathLike,
                      progress=None, cancel: threading.Event | None = None
                      ) -> SliceVolume | None:
    """Binary volume of voxels satisfying every brushed axis's interval.

    Streams over the slices of all involved fields simultaneously; returns
    None when cancelled (no partial output is left in place).
    """
    brushed = sorted(selection.intervals)
    axes = [data.axes[a] for a in brushed]
    fields = sorted({a.field for a in axes})
    refs = {f: dataset.volume_ref(member, time_index, f) for f in fields}
    meta0 = next(iter(refs.values())).meta
    for f, r in refs.items():
        if r.meta.dimensions != meta0.dimensions:
            raise VoxstreamError(f"field {f!r} grid differs at {member}/{time_index}")

    out_meta = VolumeMeta(
        dimensions=meta0.dimensions,
        spacing_mm=meta0.spacing_mm,
        offset_mm=meta0.offset_mm,
        dtype="u8",
        channels=1,
    )
    writer = SliceWriter(out_meta, out_path)
    readers = {f: iter(refs[f].open().reader()) for f in fields}
    try:
        for z in range(meta0.nz):
            if cancel is not None and cancel.is_set():
                writer.abort()
                _remove_partial(out_path)
                return None
            slices = {f: next(readers[f])[1] for f in fields}
            keep = np.ones((meta0.ny, meta0.nx), dtype=bool)
            for a_idx, ax in zip(brushed, axes):
                lo, hi = selection.intervals[a_idx]
                v = slices[ax.field][ax.channel]
                keep &= (v >= lo) & (v <= hi)
            writer.write_slice((keep.astype(np.uint8) * 255)[np.newaxis])
            if progress is not None:
                progress((z + 1) / meta0.nz)
        return writer.finalize()
    except Exception:
        writer.abort()
        raise


def _remove_partial(out_path):
    import shutil

    shutil.rmtree(out_path, ignore_errors=True)
