"""Streaming voxel-wise comparison and summary statistics."""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import NonBinaryInput, ShapeMismatch
from .volume import DTYPES, SliceVolume


@dataclass
class ComparisonReport:
    dice: float | None = None
    mean_abs_diff: float | None = None
    count_a: int = 0
    count_b: int = 0
    count_intersection: int = 0

    def to_json(self, path=None):
        doc = {
            "dice": self.dice,
            "mean_abs_diff": self.mean_abs_diff,
            "count_a": self.count_a,
            "count_b": self.count_b,
            "count_intersection": self.count_intersection,
        }
        if path is not None:
            Path(path).write_text(json.dumps(doc, indent=1), encoding="utf-8")
        return doc


def compare(a: SliceVolume, b: SliceVolume, mode: str = "both",
            normalized: bool = False) -> ComparisonReport:
    """Compare two volumes in a single simultaneous pass.

    dice requires binary inputs (all nonzero voxels share one value per
    volume); mean absolute difference is computed on raw values unless
    normalized, which divides by the union of the value ranges.
    """
    if mode not in ("dice", "mad", "both"):
        raise ValueError(f"mode must be dice, mad or both, got {mode!r}")
    if a.meta.dimensions != b.meta.dimensions or a.meta.channels != b.meta.channels:
        raise ShapeMismatch(
            f"{a.meta.dimensions}x{a.meta.channels} vs {b.meta.dimensions}x{b.meta.channels}"
        )
    want_dice = mode in ("dice", "both")
    want_mad = mode in ("mad", "both")

    count_a = count_b = count_i = 0
    abs_sum = 0.0
    seen_a: set[float] = set()
    seen_b: set[float] = set()
    it_b = iter(b.reader())
    for (_, sa), (_, sb) in zip(a.reader(), it_b):
        fa = sa != 0
        fb = sb != 0
        count_a += int(fa.sum())
        count_b += int(fb.sum())
        count_i += int((fa & fb).sum())
        if want_dice:
            seen_a.update(float(v) for v in np.unique(sa[fa]))
            seen_b.update(float(v) for v in np.unique(sb[fb]))
            if len(seen_a) > 1 or len(seen_b) > 1:
                raise NonBinaryInput("dice requires binary inputs (0 / one value)")
        if want_mad:
            abs_sum += float(
                np.abs(sa.astype(np.float64) - sb.astype(np.float64)).sum()
            )

    report = ComparisonReport(count_a=count_a, count_b=count_b,
                              count_intersection=count_i)
    if want_dice:
        denom = count_a + count_b
        report.dice = 1.0 if denom == 0 else 2.0 * count_i / denom
    if want_mad:
        n = a.meta.voxel_count * a.meta.channels
        mad = abs_sum / n
        if normalized:
            if a.meta.dtype == "f32" or b.meta.dtype == "f32":
                ra = a.ensure_value_range()
                rb = b.ensure_value_range()
                lo = min(min(p) for p in ra + rb)
                hi = max(max(p) for p in ra + rb)
                span = hi - lo
            else:
                span = float(max(np.iinfo(DTYPES[a.meta.dtype]).max,
                                 np.iinfo(DTYPES[b.meta.dtype]).max))
            mad = mad / span if span > 0 else 0.0
        report.mean_abs_diff = mad
    return report


def mean_abs_diff(a: SliceVolume, b: SliceVolume, normalized: bool = False) -> float:
    return compare(a, b, "mad", normalized).mean_abs_diff


def dice(a: SliceVolume, b: SliceVolume) -> float:
    return compare(a, b, "dice").dice


@dataclass
class ChannelStats:
    min: float
    max: float
    mean: float
    histogram: np.ndarray  # 256 bins over [min, max]


def volume_stats(volume: SliceVolume, histogram: bool = False) -> list[ChannelStats]:
    """Exact per-channel min/max/mean in one pass; optional 256-bin histogram
    (over [min, max], which costs a second pass).

    The computed (min, max) is persisted into the volume's meta.json.
    """
    c = volume.meta.channels
    lo = np.full(c, np.inf)
    hi = np.full(c, -np.inf)
    total = np.zeros(c, dtype=np.float64)
    for _, sl in volume.reader():
        np.minimum(lo, sl.min(axis=(1, 2)), out=lo)
        np.maximum(hi, sl.max(axis=(1, 2)), out=hi)
        total += sl.sum(axis=(1, 2), dtype=np.float64)
    n = volume.meta.voxel_count
    hists = [None] * c
    if histogram:
        hists = [np.zeros(256, dtype=np.int64) for _ in range(c)]
        for _, sl in volume.reader():
            for ch in range(c):
                span = hi[ch] - lo[ch]
                edges_hi = hi[ch] if span > 0 else lo[ch] + 1
                h, _ = np.histogram(sl[ch], bins=256, range=(lo[ch], edges_hi))
                hists[ch] += h
    volume.meta.value_range = [(float(a), float(b)) for a, b in zip(lo, hi)]
    volume.persist_meta()
    return [
        ChannelStats(min=float(lo[ch]), max=float(hi[ch]),
                     mean=float(total[ch] / n), histogram=hists[ch])
        for ch in range(c)
    ]
