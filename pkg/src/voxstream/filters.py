"""Streaming slice filters and single-pass filter stacks.

Every filter turns a window of z_extent consecutive input slices into one
output slice. A stack of filters is advanced one output slice at a time, so a
depth-n pipeline reads the input volume once and writes the result once, while
retaining at most sum(z_extent) slices in memory. Border handling is
clamp-to-edge on all axes.
"""
from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, replace

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import ndimage

from .errors import DtypeMismatch, EvenWindowSize, ProtocolError
from .volume import DTYPES, SliceVolume, SliceWriter, VolumeMeta, foreground_value


def cast_to_dtype(arr: np.ndarray, dtype: str) -> np.ndarray:
    """Cast a float accumulation to a native dtype; integers round half up."""
    if dtype == "f32":
        return np.asarray(arr, dtype=np.float32)
    info = np.iinfo(DTYPES[dtype])
    out = np.floor(np.asarray(arr, dtype=np.float64) + 0.5)
    return np.clip(out, info.min, info.max).astype(DTYPES[dtype])


def _triple(v) -> tuple:
    if np.isscalar(v):
        return (v, v, v)
    t = tuple(v)
    if len(t) != 3:
        raise ValueError(f"expected scalar or 3 values, got {v!r}")
    return t


class SliceFilter:
    """Base class: consumes z_extent input slices per output slice.

    Subclasses set z_extent (odd) and implement apply(window, meta) where
    window is (z_extent, channels, ny, nx) with border slices duplicated.
    """

    z_extent: int = 1
    input_dtypes: tuple | None = None  # None accepts any native dtype

    def output_meta(self, meta: VolumeMeta) -> VolumeMeta:
        if self.input_dtypes is not None and meta.dtype not in self.input_dtypes:
            raise DtypeMismatch(
                f"{type(self).__name__} requires dtype in {self.input_dtypes}, "
                f"got {meta.dtype}"
            )
        return meta

    def apply(self, window: np.ndarray, meta: VolumeMeta) -> np.ndarray:
        raise NotImplementedError

    def describe(self) -> dict:
        return {"filter": type(self).__name__, "z_extent": self.z_extent}


def _check_odd(size):
    for s in size:
        if s < 1 or s % 2 == 0:
            raise EvenWindowSize(f"window sizes must be odd and >= 1, got {size}")


# -- Gaussian (and derivative-of-Gaussian) ------------------------------------

def gaussian_kernel1d(sigma: float, order: int = 0, truncate: float = 3.0) -> np.ndarray:
    """Sampled Gaussian (or 1st/2nd derivative) kernel for convolution.

    Kernels are corrected so that smoothing preserves constants exactly, the
    first derivative maps a unit ramp to exactly 1, and the second derivative
    maps x^2 to exactly 2.
    """
    if sigma <= 0:
        raise ValueError(f"sigma must be > 0, got {sigma}")
    if order not in (0, 1, 2):
        raise ValueError(f"derivative order must be 0, 1 or 2, got {order}")
    radius = int(math.ceil(truncate * sigma))
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    g = np.exp(-0.5 * (x / sigma) ** 2)
    g /= g.sum()
    if order == 0:
        return g
    if order == 1:
        k = -x / sigma**2 * g
        k -= k.mean()
        s = -np.sum(x * k)
        return k / s
    k = (x**2 - sigma**2) / sigma**4 * g
    k -= k.mean()
    s = np.sum(x**2 * k)
    return 2.0 * k / s


class GaussianFilter(SliceFilter):
    """Separable Gaussian smoothing / derivative-of-Gaussian filter.

    sigma_xyz is in voxel units per axis; order_xyz selects the per-axis
    derivative order (0 = smoothing). Accumulation is f32; integer outputs
    round half up and clamp.
    """

    def __init__(self, sigma_xyz, truncate: float = 3.0, order_xyz=(0, 0, 0),
                 output_dtype: str | None = None):
        self.sigma = tuple(float(s) for s in _triple(sigma_xyz))
        self.order = tuple(int(o) for o in _triple(order_xyz))
        self.truncate = float(truncate)
        kx, ky, kz = (
            gaussian_kernel1d(s, o, truncate).astype(np.float32)
            for s, o in zip(self.sigma, self.order)
        )
        self.kx, self.ky, self.kz = kx, ky, kz
        self.z_extent = len(kz)
        self._derivative = any(o > 0 for o in self.order)
        self.output_dtype = output_dtype

    def output_meta(self, meta):
        meta = super().output_meta(meta)
        dtype = self.output_dtype
        if dtype is None:
            dtype = "f32" if self._derivative else meta.dtype
        return replace(meta, dtype=dtype, value_range=None)

    def apply(self, window, meta):
        w = np.asarray(window, dtype=np.float32)
        if self._derivative:
            # a derivative kernel annihilates constants; removing the window
            # mean makes that exact instead of leaving f32 kernel-sum residue
            w = w - w.mean(dtype=np.float64).astype(np.float32)
        out = np.tensordot(self.kz, w, axes=([0], [0]))  # (C, ny, nx)
        out = ndimage.convolve1d(out, self.ky, axis=1, mode="nearest")
        out = ndimage.convolve1d(out, self.kx, axis=2, mode="nearest")
        return cast_to_dtype(out, self.output_meta(meta).dtype)

    def describe(self):
        return {"filter": "gaussian", "sigma": list(self.sigma),
                "order": list(self.order), "z_extent": self.z_extent}


def gaussian_filter(sigma_xyz, truncate: float = 3.0, order_xyz=(0, 0, 0),
                    output_dtype: str | None = None) -> GaussianFilter:
    return GaussianFilter(sigma_xyz, truncate, order_xyz, output_dtype)


# -- rank / morphology ---------------------------------------------------------

class MedianFilter(SliceFilter):
    """Exact rank-order median over a size_xyz window (clamped at borders)."""

    def __init__(self, size_xyz):
        sx, sy, sz = (int(s) for s in _triple(size_xyz))
        _check_odd((sx, sy, sz))
        self.size = (sx, sy, sz)
        self.z_extent = sz

    def apply(self, window, meta):
        sx, sy, sz = self.size
        py, px = sy // 2, sx // 2
        padded = np.pad(window, ((0, 0), (0, 0), (py, py), (px, px)), mode="edge")
        view = sliding_window_view(padded, (sy, sx), axis=(2, 3))
        med = np.median(view, axis=(0, 4, 5))
        if meta.dtype == "f32":
            return med.astype(np.float32)
        return med.astype(meta.np_dtype)

    def describe(self):
        return {"filter": "median", "size": list(self.size)}


class BinaryMedianFilter(SliceFilter):
    """Majority vote over the window; input is assumed binary (0 / nonzero)."""

    def __init__(self, size_xyz):
        sx, sy, sz = (int(s) for s in _triple(size_xyz))
        _check_odd((sx, sy, sz))
        self.size = (sx, sy, sz)
        self.z_extent = sz

    def apply(self, window, meta):
        sx, sy, sz = self.size
        fg = (window != 0).sum(axis=0, dtype=np.int32)  # (C, ny, nx)
        ones_y = np.ones(sy, dtype=np.int32)
        ones_x = np.ones(sx, dtype=np.int32)
        count = ndimage.correlate1d(fg, ones_y, axis=1, mode="nearest")
        count = ndimage.correlate1d(count, ones_x, axis=2, mode="nearest")
        total = sx * sy * sz
        out = np.where(2 * count > total, foreground_value(meta.dtype), 0)
        return out.astype(meta.np_dtype)

    def describe(self):
        return {"filter": "binary_median", "size": list(self.size)}


class ThresholdFilter(SliceFilter):
    """Map values in [lo, hi] to the dtype's foreground value, others to 0."""

    z_extent = 1

    def __init__(self, lo: float, hi: float):
        if lo > hi:
            raise ValueError(f"threshold lo {lo} > hi {hi}")
        self.lo, self.hi = float(lo), float(hi)

    def apply(self, window, meta):
        v = window[0]
        mask = (v >= self.lo) & (v <= self.hi)
        out = np.where(mask, foreground_value(meta.dtype), 0)
        return out.astype(meta.np_dtype)

    def describe(self):
        return {"filter": "threshold", "lo": self.lo, "hi": self.hi}


class MorphologyFilter(SliceFilter):
    """Grayscale erosion (window min) or dilation (window max)."""

    def __init__(self, op: str, size_xyz):
        if op not in ("erode", "dilate"):
            raise ValueError(f"op must be 'erode' or 'dilate', got {op!r}")
        sx, sy, sz = (int(s) for s in _triple(size_xyz))
        _check_odd((sx, sy, sz))
        self.op = op
        self.size = (sx, sy, sz)
        self.z_extent = sz

    def apply(self, window, meta):
        sx, sy, sz = self.size
        if self.op == "erode":
            plane = window.min(axis=0)
            out = ndimage.minimum_filter(plane, size=(1, sy, sx), mode="nearest")
        else:
            plane = window.max(axis=0)
            out = ndimage.maximum_filter(plane, size=(1, sy, sx), mode="nearest")
        return out

    def describe(self):
        return {"filter": self.op, "size": list(self.size)}


class FunctionFilter(SliceFilter):
    """Wrap a plain function as a per-window slice filter."""

    def __init__(self, fn, z_extent: int = 1, output_dtype: str | None = None,
                 output_channels: int | None = None, input_dtypes=None, name="function"):
        if z_extent % 2 == 0:
            raise EvenWindowSize(f"z_extent must be odd, got {z_extent}")
        self.fn = fn
        self.z_extent = z_extent
        self.output_dtype = output_dtype
        self.output_channels = output_channels
        self.input_dtypes = tuple(input_dtypes) if input_dtypes else None
        self.name = name

    def output_meta(self, meta):
        meta = super().output_meta(meta)
        changes = {"value_range": None}
        if self.output_dtype:
            changes["dtype"] = self.output_dtype
        if self.output_channels:
            changes["channels"] = self.output_channels
        return replace(meta, **changes)

    def apply(self, window, meta):
        return self.fn(window, meta)

    def describe(self):
        return {"filter": self.name, "z_extent": self.z_extent}


def filter_from_json(doc: dict) -> SliceFilter:
    """Build a filter from its pipeline-config description, e.g.
    {"filter": "median", "size": [11, 11, 3]}."""
    doc = dict(doc)
    kind = doc.pop("filter", None)
    if kind == "gaussian":
        return GaussianFilter(doc.get("sigma", 1.0), doc.get("truncate", 3.0),
                              doc.get("order", (0, 0, 0)), doc.get("output_dtype"))
    if kind == "median":
        return MedianFilter(doc.get("size", 3))
    if kind == "binary_median":
        return BinaryMedianFilter(doc.get("size", 3))
    if kind == "threshold":
        return ThresholdFilter(doc["lo"], doc["hi"])
    if kind in ("erode", "dilate"):
        return MorphologyFilter(kind, doc.get("size", 3))
    if kind == "morphology":
        return MorphologyFilter(doc["op"], doc.get("size", 3))
    raise ProtocolError(f"unknown filter kind {kind!r}")


# convenience constructors mirroring the CLI names
def median_filter(size_xyz) -> MedianFilter:
    return MedianFilter(size_xyz)


def binary_median_filter(size_xyz) -> BinaryMedianFilter:
    return BinaryMedianFilter(size_xyz)


def threshold_filter(lo, hi) -> ThresholdFilter:
    return ThresholdFilter(lo, hi)


def morphology_filter(op, size_xyz) -> MorphologyFilter:
    return MorphologyFilter(op, size_xyz)


# -- stack evaluation ----------------------------------------------------------

@dataclass
class RunStats:
    input_slices_read: int = 0
    output_slices_written: int = 0
    window_high_water: int = 0


class _WindowTracker:
    def __init__(self):
        self.stages = []
        self.high_water = 0

    def note(self):
        total = sum(len(s._buf) for s in self.stages)
        if total > self.high_water:
            self.high_water = total


class _Stage:
    """One filter in the chain, buffering upstream slices it still needs."""

    def __init__(self, filt: SliceFilter, pull_upstream, in_meta: VolumeMeta,
                 tracker: _WindowTracker):
        self.filt = filt
        self.pull = pull_upstream  # () -> next upstream slice, sequential
        self.in_meta = in_meta
        self.out_meta = filt.output_meta(in_meta)
        self.r = (filt.z_extent - 1) // 2
        self.nz = in_meta.nz
        self._buf = deque()
        self._base = 0  # z index of _buf[0]
        self._pulled = 0
        self.tracker = tracker
        tracker.stages.append(self)

    def produce(self, k: int) -> np.ndarray:
        nz = self.nz
        # release first so the buffer never exceeds z_extent slices
        lo = max(k - self.r, 0)
        while self._base < lo:
            self._buf.popleft()
            self._base += 1
        hi = min(k + self.r, nz - 1)
        while self._pulled <= hi:
            self._buf.append(self.pull())
            self._pulled += 1
            self.tracker.note()
        idx = [min(max(k + d, 0), nz - 1) - self._base
               for d in range(-self.r, self.r + 1)]
        window = np.stack([self._buf[i] for i in idx])
        return self.filt.apply(window, self.in_meta)


class FilterStack:
    """Ordered filters applied in one streaming pass (first filter first)."""

    def __init__(self, filters):
        self.filters = list(filters)

    def output_meta(self, meta: VolumeMeta) -> VolumeMeta:
        for f in self.filters:
            meta = f.output_meta(meta)
        return meta

    def run(self, volume: SliceVolume, out_path) -> tuple[SliceVolume, RunStats]:
        return run_stack(volume, self.filters, out_path)


def stack_output_meta(volume: SliceVolume, filters) -> VolumeMeta:
    meta = volume.meta
    for f in filters:
        meta = f.output_meta(meta)
    return replace(meta, value_range=None)


def stack_slices(volume: SliceVolume, filters, stats: RunStats):
    """Generator of output slices of a filter stack, one streaming pass.

    Buffers at most sum(z_extent) slices across all stages; stats is updated
    as the stack advances.
    """
    filters = list(filters)
    tracker = _WindowTracker()
    in_meta = volume.meta
    reader_it = iter(volume.reader())

    def pull_source():
        _, arr = next(reader_it)
        stats.input_slices_read += 1
        return arr

    def make_stage_pull(stage):
        counter = iter(range(stage.nz))

        def pull_stage():
            return stage.produce(next(counter))

        return pull_stage

    pull = pull_source
    meta = in_meta
    stages = []
    for f in filters:
        stage = _Stage(f, pull, meta, tracker)
        stages.append(stage)
        meta = stage.out_meta
        pull = make_stage_pull(stage)

    last = stages[-1] if stages else None
    for k in range(in_meta.nz):
        out = last.produce(k) if last is not None else pull_source()
        stats.window_high_water = max(stats.window_high_water, tracker.high_water)
        yield out


def run_stack(volume: SliceVolume, filters, out_path) -> tuple[SliceVolume, RunStats]:
    """Evaluate a filter stack over a volume in a single streaming pass.

    The input is read exactly once and the output written exactly once; no
    intermediate volumes are materialized. Returns the output volume and run
    statistics including the slice-window high-water mark.
    """
    filters = list(filters)
    stats = RunStats()
    out_meta = stack_output_meta(volume, filters)
    writer = SliceWriter(out_meta, out_path)
    try:
        for out in stack_slices(volume, filters, stats):
            writer.write_slice(out)
            stats.output_slices_written += 1
        result = writer.finalize()
    except Exception:
        writer.abort()
        raise
    return result, stats
