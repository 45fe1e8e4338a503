"""Multi-scale Hessian-based vessel enhancement (Sato 3-D line measure).

Each scale runs as one streaming filter stack: scale-normalized Gaussian second
derivatives assemble the Hessian, a closed-form symmetric eigensolve extracts
sorted eigenvalues, and the line measure turns them into a per-voxel response.
Scales update an on-disk running maximum, so only one scale's stack is ever in
flight and the output volume holds the final max over all scales.

Bright-on-dark polarity is fixed: responses are zero wherever the middle
eigenvalue is non-negative.
"""
from __future__ import annotations

import os
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import VoxstreamError
from .filters import (
    FunctionFilter,
    RunStats,
    SliceFilter,
    gaussian_kernel1d,
    stack_output_meta,
    stack_slices,
)
from .volume import SliceVolume, SliceWriter, VolumeMeta
from scipy import ndimage


@dataclass
class VesselnessParams:
    """Scales are physical (mm); exponents and asymmetry follow the 3-D line
    filter convention (gamma12, gamma23, alpha)."""

    scales: list[float] = field(default_factory=lambda: [1.0])
    gamma12: float = 1.0
    gamma23: float = 1.0
    alpha: float = 0.25

    def __post_init__(self):
        self.scales = [float(s) for s in self.scales]
        if not self.scales or any(s <= 0 for s in self.scales):
            raise VoxstreamError(f"scales must be non-empty and positive: {self.scales}")
        if self.alpha <= 0:
            raise VoxstreamError(f"alpha must be positive: {self.alpha}")


# Hessian channel order
HESSIAN_ORDERS = [
    (2, 0, 0),  # xx
    (1, 1, 0),  # xy
    (1, 0, 1),  # xz
    (0, 2, 0),  # yy
    (0, 1, 1),  # yz
    (0, 0, 2),  # zz
]


class HessianFilter(SliceFilter):
    """Six scale-normalized second derivatives of the Gaussian-smoothed input.

    sigma is physical; per-axis voxel sigmas are sigma / spacing, and each
    derivative of order d along axis i is multiplied by sigma_vox_i^d, which
    equals physical sigma^2 normalization of the full Hessian.
    """

    def __init__(self, sigma_mm: float, spacing_mm, truncate: float = 3.0):
        self.sigma_mm = float(sigma_mm)
        self.sigma_vox = tuple(self.sigma_mm / s for s in spacing_mm)
        self.truncate = truncate
        self._kernels = {}
        for axis, sv in enumerate(self.sigma_vox):
            for order in (0, 1, 2):
                k = gaussian_kernel1d(sv, order, truncate) * sv**order
                self._kernels[(axis, order)] = k.astype(np.float32)
        self.z_extent = len(self._kernels[(2, 0)])

    def output_meta(self, meta):
        meta = super().output_meta(meta)
        if meta.channels != 1:
            raise VoxstreamError("vesselness expects a single-channel volume")
        return replace(meta, dtype="f32", channels=6, value_range=None)

    def apply(self, window, meta):
        w = np.asarray(window, dtype=np.float32)[:, 0]  # (s, ny, nx)
        # every channel differentiates at least one axis, so constants must map
        # to exact zero; mean removal keeps f32 kernel-sum residue out
        w = w - w.mean(dtype=np.float64).astype(np.float32)
        out = np.empty((6, w.shape[1], w.shape[2]), dtype=np.float32)
        for i, (ox, oy, oz) in enumerate(HESSIAN_ORDERS):
            kz = self._kernels[(2, oz)]
            plane = np.tensordot(kz, w, axes=([0], [0]))
            plane = ndimage.convolve1d(plane, self._kernels[(1, oy)], axis=0,
                                       mode="nearest")
            plane = ndimage.convolve1d(plane, self._kernels[(0, ox)], axis=1,
                                       mode="nearest")
            out[i] = plane
        return out

    def describe(self):
        return {"filter": "hessian", "sigma_mm": self.sigma_mm,
                "z_extent": self.z_extent}


def eigvals_sym3(a11, a12, a13, a22, a23, a33):
    """Eigenvalues of symmetric 3x3 matrices, sorted descending.

    Closed-form trigonometric solve on float64; near-scalar matrices fall back
    to the exact diagonal answer.
    """
    a11, a12, a13, a22, a23, a33 = (
        np.asarray(a, dtype=np.float64) for a in (a11, a12, a13, a22, a23, a33)
    )
    q = (a11 + a22 + a33) / 3.0
    b11, b22, b33 = a11 - q, a22 - q, a33 - q
    off2 = a12**2 + a13**2 + a23**2
    p2 = b11**2 + b22**2 + b33**2 + 2.0 * off2
    p = np.sqrt(p2 / 6.0)
    scalar = p2 <= 1e-28 * np.maximum(q**2, 1e-300)
    safe_p = np.where(scalar, 1.0, p)
    det_b = (
        b11 * b22 * b33
        + 2.0 * a12 * a23 * a13
        - b11 * a23**2
        - b22 * a13**2
        - b33 * a12**2
    ) / safe_p**3
    r = np.clip(det_b / 2.0, -1.0, 1.0)
    phi = np.arccos(r) / 3.0
    e1 = q + 2.0 * p * np.cos(phi)
    e3 = q + 2.0 * p * np.cos(phi + 2.0 * np.pi / 3.0)
    e2 = 3.0 * q - e1 - e3
    e1 = np.where(scalar, q, e1)
    e2 = np.where(scalar, q, e2)
    e3 = np.where(scalar, q, e3)
    return e1, e2, e3


class EigenFilter(SliceFilter):
    """Per-voxel eigenvalues (descending) of the 6-channel Hessian slice."""

    z_extent = 1

    def output_meta(self, meta):
        if meta.channels != 6:
            raise VoxstreamError("eigen filter expects 6 Hessian channels")
        return replace(meta, dtype="f32", channels=3, value_range=None)

    def apply(self, window, meta):
        h = window[0]
        e1, e2, e3 = eigvals_sym3(h[0], h[1], h[2], h[3], h[4], h[5])
        return np.stack([e1, e2, e3]).astype(np.float32)


def sato_line_measure(e1, e2, e3, gamma12=1.0, gamma23=1.0, alpha=0.25):
    """3-D line measure from sorted eigenvalues (e1 >= e2 >= e3).

    Zero unless e2 < 0 (bright tube); |e3| * (e2/e3)^g23 modulated by the e1
    term, with asymmetry alpha on the positive-e1 side.
    """
    e1 = np.asarray(e1, dtype=np.float64)
    e2 = np.asarray(e2, dtype=np.float64)
    e3 = np.asarray(e3, dtype=np.float64)
    out = np.zeros(e1.shape, dtype=np.float64)
    tube = e2 < 0
    if not tube.any():
        return out
    l1, l2, l3 = e1[tube], e2[tube], e3[tube]
    base = np.abs(l3) * (l2 / l3) ** gamma23
    w = np.zeros(l1.shape)
    neg = l1 <= 0
    w[neg] = base[neg] * (1.0 + l1[neg] / np.abs(l2[neg])) ** gamma12
    mid = (~neg) & (l1 < np.abs(l2) / alpha)
    w[mid] = base[mid] * (1.0 - alpha * l1[mid] / np.abs(l2[mid])) ** gamma12
    out[tube] = w
    return out


class SatoFilter(SliceFilter):
    z_extent = 1

    def __init__(self, params: VesselnessParams):
        self.params = params

    def output_meta(self, meta):
        if meta.channels != 3:
            raise VoxstreamError("line measure expects 3 eigenvalue channels")
        return replace(meta, dtype="f32", channels=1, value_range=None)

    def apply(self, window, meta):
        e = window[0]
        p = self.params
        v = sato_line_measure(e[0], e[1], e[2], p.gamma12, p.gamma23, p.alpha)
        return v.astype(np.float32)[np.newaxis]


def scale_stack(volume_meta: VolumeMeta, sigma_mm: float, params: VesselnessParams,
                truncate: float = 3.0):
    return [
        HessianFilter(sigma_mm, volume_meta.spacing_mm, truncate),
        EigenFilter(),
        SatoFilter(params),
    ]


def hessian_eigenvalues(volume: SliceVolume, sigma_mm: float,
                        out_path: str | os.PathLike,
                        truncate: float = 3.0) -> SliceVolume:
    """Sorted eigenvalues of the scale-normalized Hessian as a 3-channel volume."""
    from .filters import run_stack

    filters = [HessianFilter(sigma_mm, volume.meta.spacing_mm, truncate), EigenFilter()]
    out, _ = run_stack(volume, filters, out_path)
    return out


def vesselness(volume: SliceVolume, params: VesselnessParams,
               out_path: str | os.PathLike, truncate: float = 3.0) -> SliceVolume:
    """Maximum line-measure response over all scales, streamed scale by scale.

    The first scale writes the output volume; every further scale updates it
    in place, slice by slice, with a running per-voxel maximum.
    """
    out_path = Path(out_path)
    first = True
    for sigma in params.scales:
        filters = scale_stack(volume.meta, sigma, params, truncate)
        stats = RunStats()
        slices = stack_slices(volume, filters, stats)
        if first:
            writer = SliceWriter(stack_output_meta(volume, filters), out_path)
            try:
                for sl in slices:
                    writer.write_slice(sl)
                result = writer.finalize()
            except Exception:
                writer.abort()
                raise
            first = False
        else:
            meta = result.meta
            with open(result.data_path, "r+b") as f:
                for z, sl in enumerate(slices):
                    f.seek(z * meta.slice_nbytes)
                    existing = np.fromfile(f, dtype=meta.np_dtype,
                                           count=meta.slice_voxels)
                    merged = np.maximum(existing.reshape(meta.ny, meta.nx), sl[0])
                    f.seek(z * meta.slice_nbytes)
                    f.write(merged.astype(meta.np_dtype).tobytes())
    return SliceVolume(out_path, result.meta)
