"""CPU octree raycaster: MIP/MOP/DVR stills, slice extraction, keyframe animation.

Rays march front to back through the volume's physical bounding box, sampling
the brick octree at a fixed level of detail with trilinear interpolation that
clamps at brick borders (no apron voxels; coarse levels may show seams).
Channels can be sampled with an individual world-space shift to compensate
acquisition misalignment. A dense in-core sampler shares the interpolation
arithmetic so renders can be validated against an oracle path.
"""
from __future__ import annotations

import math
import os
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import ChannelMismatch, ConfigError, NonMonotoneKeyframes, OutOfRange, VoxstreamError
from .octree import BrickOctree

OPACITY_CUTOFF = 0.99


# -- scene types -----------------------------------------------------------------


@dataclass
class Camera:
    position: tuple[float, float, float]
    look_at: tuple[float, float, float]
    up: tuple[float, float, float] = (0.0, 1.0, 0.0)
    projection: tuple = ("ortho", 100.0)  # ("ortho", width_mm) | ("persp", vfov_deg)
    image_size: tuple[int, int] = (64, 64)

    def basis(self):
        pos = np.asarray(self.position, dtype=np.float64)
        fwd = np.asarray(self.look_at, dtype=np.float64) - pos
        dist = np.linalg.norm(fwd)
        if dist == 0:
            raise VoxstreamError("camera position equals look_at")
        fwd = fwd / dist
        up = np.asarray(self.up, dtype=np.float64)
        right = np.cross(fwd, up)
        nr = np.linalg.norm(right)
        if nr < 1e-9:
            raise VoxstreamError("up vector is parallel to the view direction")
        right /= nr
        true_up = np.cross(right, fwd)
        return pos, fwd, right, true_up, dist


@dataclass
class TransferFunction:
    """Piecewise-linear map from windowed normalized intensity to RGBA."""

    points: list[tuple] = field(default_factory=lambda: [
        (0.0, 0.0, 0.0, 0.0, 0.0), (1.0, 1.0, 1.0, 1.0, 1.0)
    ])
    window: tuple[float, float] = (0.0, 1.0)
    transparent: bool = False

    def __post_init__(self):
        pts = [tuple(float(v) for v in p) for p in self.points]
        if any(len(p) != 5 for p in pts):
            raise VoxstreamError("transfer function points are (pos, r, g, b, a)")
        if pts != sorted(pts, key=lambda p: p[0]):
            raise VoxstreamError("transfer function points must be sorted by position")
        if any(not 0.0 <= p[4] <= 1.0 for p in pts):
            raise VoxstreamError("opacity must lie in [0, 1]")
        self.points = pts

    def lookup(self, u: np.ndarray) -> np.ndarray:
        """(n, 4) straight RGBA for normalized intensities u."""
        if self.transparent:
            return np.zeros(u.shape + (4,), dtype=np.float64)
        lo, hi = self.window
        span = hi - lo
        t = np.clip((u - lo) / span, 0.0, 1.0) if span > 0 else np.zeros_like(u)
        xs = np.asarray([p[0] for p in self.points])
        out = np.empty(u.shape + (4,), dtype=np.float64)
        for c in range(4):
            ys = np.asarray([p[1 + c] for p in self.points])
            out[..., c] = np.interp(t, xs, ys)
        return out

    def to_json(self) -> dict:
        return {"window": list(self.window),
                "points": [list(p) for p in self.points]}

    @classmethod
    def from_json(cls, doc: dict) -> "TransferFunction":
        return cls(points=[tuple(p) for p in doc["points"]],
                   window=tuple(doc.get("window", (0.0, 1.0))))

    @classmethod
    def grayscale(cls, opacity: float = 1.0) -> "TransferFunction":
        return cls(points=[(0.0, 0.0, 0.0, 0.0, opacity),
                           (1.0, 1.0, 1.0, 1.0, opacity)])


def load_tf_set(doc: dict) -> list[TransferFunction]:
    """Parse the tf.json schema: {"channels": [{"window": .., "points": ..}]}."""
    return [TransferFunction.from_json(ch) for ch in doc["channels"]]


@dataclass
class RenderSettings:
    mode: str = "dvr"  # mip | mop | dvr
    step: float = 0.5  # fraction of the smallest voxel spacing
    lod: int = 0
    channel_shift: list | None = None  # per-channel (dx, dy, dz) mm
    background: tuple[float, float, float] = (0.0, 0.0, 0.0)
    early_termination: bool = True

    def __post_init__(self):
        if self.mode not in ("mip", "mop", "dvr"):
            raise VoxstreamError(f"mode must be mip, mop or dvr, got {self.mode!r}")
        if self.step <= 0:
            raise VoxstreamError("sampling step must be > 0")


# -- samplers --------------------------------------------------------------------


def _trilinear_setup(coords: np.ndarray, res):
    """Shared interpolation arithmetic: clamp, split into base index + fraction."""
    res = np.asarray(res)
    c = np.clip(coords, 0.0, res - 1.0)
    i0 = np.floor(c).astype(np.int64)
    i0 = np.minimum(i0, np.maximum(res - 2, 0))
    frac = c - i0
    return i0, frac


def _trilinear_mix(corner, frac):
    """corner[(dz, dy, dx)] -> interpolated values; frac columns are (x, y, z)."""
    fx, fy, fz = frac[:, 0], frac[:, 1], frac[:, 2]
    c00 = corner[(0, 0, 0)] * (1 - fx) + corner[(0, 0, 1)] * fx
    c01 = corner[(0, 1, 0)] * (1 - fx) + corner[(0, 1, 1)] * fx
    c10 = corner[(1, 0, 0)] * (1 - fx) + corner[(1, 0, 1)] * fx
    c11 = corner[(1, 1, 0)] * (1 - fx) + corner[(1, 1, 1)] * fx
    c0 = c00 * (1 - fy) + c01 * fy
    c1 = c10 * (1 - fy) + c11 * fy
    return c0 * (1 - fz) + c1 * fz


class OctreeSampler:
    """Trilinear sampling from octree bricks at one LOD, clamped per brick."""

    def __init__(self, octree: BrickOctree, lod: int = 0):
        if not 0 <= lod < octree.level_count:
            raise OutOfRange(f"lod {lod} outside [0,{octree.level_count})")
        self.octree = octree
        self.lod = lod
        self.res = np.asarray(octree.levels[lod])
        self.grid = np.asarray(octree.grids[lod])
        self.spacing = np.asarray(octree.meta.spacing_mm) * (2**lod)
        self.offset = np.asarray(octree.meta.offset_mm)
        self.touched: set = set()

    def sample(self, pts_mm: np.ndarray, channel: int) -> np.ndarray:
        b = self.octree.brick_size
        coords = (pts_mm - self.offset) / self.spacing - 0.5
        coords = np.clip(coords, 0.0, self.res - 1.0)
        brick = np.clip((coords // b).astype(np.int64), 0, self.grid - 1)
        local = coords - brick * b
        i0, frac = _trilinear_setup(local, np.asarray([b, b, b]))
        out = np.empty(len(pts_mm), dtype=np.float64)
        keys = (brick[:, 2] * self.grid[1] + brick[:, 1]) * self.grid[0] + brick[:, 0]
        for key in np.unique(keys):
            sel = keys == key
            bc = brick[sel][0]
            self.touched.add((self.lod, int(bc[0]), int(bc[1]), int(bc[2])))
            block = self.octree.fetch_brick(self.lod, (int(bc[0]), int(bc[1]),
                                                       int(bc[2])))[channel]
            ii, ff = i0[sel], frac[sel]
            corner = {}
            for dz in (0, 1):
                for dy in (0, 1):
                    for dx in (0, 1):
                        corner[(dz, dy, dx)] = block[
                            np.minimum(ii[:, 2] + dz, b - 1),
                            np.minimum(ii[:, 1] + dy, b - 1),
                            np.minimum(ii[:, 0] + dx, b - 1),
                        ].astype(np.float64)
            out[sel] = _trilinear_mix(corner, ff)
        return out

    def touched_payload_bytes(self) -> int:
        count = 0
        for lod, bx, by, bz in self.touched:
            node = self.octree.node_id(lod, (bx, by, bz))
            if not self.octree.is_constant(node):
                count += 1
        return count * self.octree._brick_nbytes


class DenseSampler:
    """Oracle-side sampler over an in-core array, sharing the trilinear core."""

    def __init__(self, array: np.ndarray, meta):
        self.array = array  # (C, nz, ny, nx)
        self.res = np.asarray(meta.dimensions)
        self.spacing = np.asarray(meta.spacing_mm)
        self.offset = np.asarray(meta.offset_mm)

    def sample(self, pts_mm: np.ndarray, channel: int) -> np.ndarray:
        coords = (pts_mm - self.offset) / self.spacing - 0.5
        i0, frac = _trilinear_setup(coords, self.res)
        arr = self.array[channel]
        nx, ny, nz = self.res
        corner = {}
        for dz in (0, 1):
            for dy in (0, 1):
                for dx in (0, 1):
                    corner[(dz, dy, dx)] = arr[
                        np.minimum(i0[:, 2] + dz, nz - 1),
                        np.minimum(i0[:, 1] + dy, ny - 1),
                        np.minimum(i0[:, 0] + dx, nx - 1),
                    ].astype(np.float64)
        return _trilinear_mix(corner, frac)


# -- ray generation ----------------------------------------------------------------


def _camera_rays(camera: Camera):
    pos, fwd, right, up, _ = camera.basis()
    w, h = camera.image_size
    xs = (np.arange(w) + 0.5) / w - 0.5
    ys = 0.5 - (np.arange(h) + 0.5) / h
    px, py = np.meshgrid(xs, ys)
    kind, value = camera.projection
    if kind == "ortho":
        width = float(value)
        height = width * h / w
        origins = (pos[None, :]
                   + px.reshape(-1, 1) * width * right[None, :]
                   + py.reshape(-1, 1) * height * up[None, :])
        dirs = np.broadcast_to(fwd, origins.shape).copy()
    elif kind == "persp":
        vfov = math.radians(float(value))
        half_h = math.tan(vfov / 2)
        half_w = half_h * w / h
        dirs = (fwd[None, :]
                + px.reshape(-1, 1) * 2 * half_w * right[None, :]
                + py.reshape(-1, 1) * 2 * half_h * up[None, :])
        dirs = dirs / np.linalg.norm(dirs, axis=1, keepdims=True)
        origins = np.broadcast_to(pos, dirs.shape).copy()
    else:
        raise VoxstreamError(f"unknown projection {kind!r}")
    return origins, dirs


def _ray_box(origins, dirs, lo, hi):
    """Slab intersection; returns (tmin, tmax) with tmin<tmax where hit."""
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
        t1 = (lo[None, :] - origins) * inv
        t2 = (hi[None, :] - origins) * inv
    tmin = np.nanmax(np.minimum(t1, t2), axis=1)
    tmax = np.nanmin(np.maximum(t1, t2), axis=1)
    tmin = np.maximum(tmin, 0.0)
    return tmin, tmax


# -- rendering ------------------------------------------------------------------------


def _normalizers(octree: BrickOctree):
    vr = octree.meta.value_range
    if vr is None:
        vr = [(float(octree.node_min[-1][c]), float(octree.node_max[-1][c]))
              for c in range(octree.meta.channels)]
    return vr


def render(octree: BrickOctree, camera: Camera, tfs, settings: RenderSettings,
           sampler=None) -> np.ndarray:
    """Raycast an RGBA image (h, w, 4) uint8.

    `sampler` defaults to the octree sampler at settings.lod; passing a
    DenseSampler renders the oracle path with identical sampling arithmetic.
    """
    if isinstance(tfs, TransferFunction):
        tfs = [tfs]
    channels = octree.meta.channels
    if len(tfs) != channels:
        raise ChannelMismatch(f"{len(tfs)} transfer functions for {channels} channels")
    if octree.cache.budget < octree._brick_nbytes:
        raise ConfigError(
            f"brick cache budget {octree.cache.budget} below one brick "
            f"({octree._brick_nbytes} bytes)"
        )
    if sampler is None:
        sampler = OctreeSampler(octree, settings.lod)

    meta = octree.meta
    lo = np.asarray(meta.offset_mm, dtype=np.float64)
    hi = lo + np.asarray(meta.dimensions) * np.asarray(meta.spacing_mm)
    origins, dirs = _camera_rays(camera)
    n = len(origins)
    t0, t1 = _ray_box(origins, dirs, lo, hi)
    hit = t0 < t1

    step_mm = settings.step * float(min(meta.spacing_mm))
    shifts = settings.channel_shift
    if shifts is None:
        shifts = [(0.0, 0.0, 0.0)] * channels
    vr = _normalizers(octree)

    acc_rgb = np.zeros((n, 3))
    acc_a = np.zeros(n)
    max_u = np.zeros((n, channels))
    mop_best = np.zeros((n, channels, 4))
    mop_alpha = np.full((n, channels), -1.0)
    finished = ~hit

    max_steps = 0
    if hit.any():
        max_steps = int(np.ceil((t1[hit] - t0[hit]).max() / step_mm))
    for k in range(max_steps):
        t = t0 + (k + 0.5) * step_mm
        active = ~finished & (t <= t1)
        if not active.any():
            break
        pts = origins[active] + dirs[active] * t[active, None]
        sample_rgba = np.zeros((int(active.sum()), channels, 4))
        u_all = np.zeros((int(active.sum()), channels))
        for c in range(channels):
            vlo, vhi = vr[c]
            span = (vhi - vlo) or 1.0
            vals = sampler.sample(pts + np.asarray(shifts[c])[None, :], c)
            u = np.clip((vals - vlo) / span, 0.0, 1.0)
            u_all[:, c] = u
            sample_rgba[:, c] = tfs[c].lookup(u)
        if settings.mode == "mip":
            max_u[active] = np.maximum(max_u[active], u_all)
        elif settings.mode == "mop":
            better = sample_rgba[:, :, 3] > mop_alpha[active]
            cur = mop_best[active]
            cur[better] = sample_rgba[better]
            mop_best[active] = cur
            mop_alpha[active] = np.maximum(mop_alpha[active], sample_rgba[:, :, 3])
        else:  # dvr
            a_c = sample_rgba[:, :, 3]
            one_minus = np.prod(1.0 - a_c, axis=1)
            a_s = 1.0 - one_minus
            rgb_s = np.sum(sample_rgba[:, :, :3] * a_c[:, :, None], axis=1)
            a_corr = 1.0 - (1.0 - a_s) ** settings.step
            scale = np.where(a_s > 0, a_corr / np.maximum(a_s, 1e-30), 0.0)
            rgb_corr = rgb_s * scale[:, None]
            trans = 1.0 - acc_a[active]
            acc_rgb[active] += trans[:, None] * rgb_corr
            acc_a[active] += trans * a_corr
            if settings.early_termination:
                done = acc_a >= OPACITY_CUTOFF
                finished |= done

    bg = np.asarray(settings.background, dtype=np.float64)
    if settings.mode == "mip":
        rgba = np.zeros((n, channels, 4))
        for c in range(channels):
            rgba[:, c] = tfs[c].lookup(max_u[:, c])
        a_c = rgba[:, :, 3]
        a = 1.0 - np.prod(1.0 - a_c, axis=1)
        rgb = np.sum(rgba[:, :, :3] * a_c[:, :, None], axis=1)
    elif settings.mode == "mop":
        valid = mop_alpha > 0
        a_c = np.where(valid, mop_best[:, :, 3], 0.0)
        a = 1.0 - np.prod(1.0 - a_c, axis=1)
        rgb = np.sum(mop_best[:, :, :3] * a_c[:, :, None], axis=1)
    else:
        rgb, a = acc_rgb, acc_a
    rgb = np.where(hit[:, None], rgb, 0.0)
    a = np.where(hit, a, 0.0)
    out = rgb + bg[None, :] * (1.0 - a[:, None])
    w, h = camera.image_size
    img = np.empty((h, w, 4), dtype=np.uint8)
    img[..., :3] = np.clip(np.round(out * 255.0), 0, 255).reshape(h, w, 3)
    img[..., 3] = 255
    return img


def save_png(image: np.ndarray, path: str | os.PathLike):
    from PIL import Image

    Image.fromarray(image, mode="RGBA").save(Path(path))


# -- slice extraction -------------------------------------------------------------------


def extract_slice(octree: BrickOctree, axis: str = "z", index: int = 0,
                  lod: int = 0) -> np.ndarray:
    """Axis-aligned slice of one LOD as raw intensities (channels, h, w).

    Only bricks intersecting the slice plane are fetched; the z axis at LOD 0
    reproduces the source volume slice bit-exactly.
    """
    if axis not in ("x", "y", "z"):
        raise VoxstreamError(f"axis must be x, y or z, got {axis!r}")
    if not 0 <= lod < octree.level_count:
        raise OutOfRange(f"lod {lod} outside [0,{octree.level_count})")
    rx, ry, rz = octree.levels[lod]
    gx, gy, gz = octree.grids[lod]
    b = octree.brick_size
    c = octree.meta.channels
    ax_i = {"x": 0, "y": 1, "z": 2}[axis]
    size = (rx, ry, rz)[ax_i]
    if not 0 <= index < size:
        raise OutOfRange(f"{axis}-slice {index} outside [0,{size})")
    bslice = index // b
    local = index % b
    if axis == "z":
        out = np.empty((c, ry, rx), dtype=octree._np_dtype)
        for by in range(gy):
            vy = min(b, ry - by * b)
            for bx in range(gx):
                vx = min(b, rx - bx * b)
                blk = octree.fetch_brick(lod, (bx, by, bslice))
                out[:, by * b:by * b + vy, bx * b:bx * b + vx] = blk[:, local, :vy, :vx]
        return out
    if axis == "y":
        out = np.empty((c, rz, rx), dtype=octree._np_dtype)
        for bz in range(gz):
            vz = min(b, rz - bz * b)
            for bx in range(gx):
                vx = min(b, rx - bx * b)
                blk = octree.fetch_brick(lod, (bx, bslice, bz))
                out[:, bz * b:bz * b + vz, bx * b:bx * b + vx] = blk[:, :vz, local, :vx]
        return out
    out = np.empty((c, rz, ry), dtype=octree._np_dtype)
    for bz in range(gz):
        vz = min(b, rz - bz * b)
        for by in range(gy):
            vy = min(b, ry - by * b)
            blk = octree.fetch_brick(lod, (bslice, by, bz))
            out[:, bz * b:bz * b + vz, by * b:by * b + vy] = blk[:, :vz, :vy, local]
    return out


def extract_oblique(octree: BrickOctree, origin_mm, normal, size_px: tuple[int, int],
                    pixel_mm: float, lod: int = 0) -> np.ndarray:
    """Trilinearly sampled oblique plane; fetches only intersecting bricks."""
    normal = np.asarray(normal, dtype=np.float64)
    nn = np.linalg.norm(normal)
    if nn == 0:
        raise VoxstreamError("plane normal must be nonzero")
    normal = normal / nn
    helper = np.array([1.0, 0.0, 0.0])
    if abs(normal @ helper) > 0.9:
        helper = np.array([0.0, 1.0, 0.0])
    u = np.cross(normal, helper)
    u /= np.linalg.norm(u)
    v = np.cross(normal, u)
    w, h = size_px
    xs = (np.arange(w) - (w - 1) / 2) * pixel_mm
    ys = (np.arange(h) - (h - 1) / 2) * pixel_mm
    px, py = np.meshgrid(xs, ys)
    pts = (np.asarray(origin_mm)[None, :]
           + px.reshape(-1, 1) * u[None, :]
           + py.reshape(-1, 1) * v[None, :])
    sampler = OctreeSampler(octree, lod)
    c = octree.meta.channels
    out = np.empty((c, h, w), dtype=np.float32)
    for ch in range(c):
        out[ch] = sampler.sample(pts, ch).reshape(h, w).astype(np.float32)
    return out


def save_pgm(image: np.ndarray, path: str | os.PathLike):
    """Store a single-channel u8/u16 slice as binary PGM."""
    if image.ndim == 3:
        image = image[0]
    if image.dtype == np.uint8:
        maxval = 255
        payload = image.tobytes()
    elif image.dtype == np.uint16:
        maxval = 65535
        payload = image.astype(">u2").tobytes()
    else:
        raise VoxstreamError(f"PGM supports u8/u16, got {image.dtype}")
    h, w = image.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n{maxval}\n".encode("ascii"))
        f.write(payload)


# -- animation -----------------------------------------------------------------------


@dataclass
class Keyframe:
    time: float
    camera: Camera
    tf_window: tuple[float, float] | None = None
    settings: dict = field(default_factory=dict)


def _camera_rotation(camera: Camera) -> np.ndarray:
    _, fwd, right, up, _ = camera.basis()
    return np.stack([right, up, -fwd], axis=1)


def interpolate_keyframes(keyframes: list[Keyframe], t: float):
    """Camera/window/settings at time t: linear for positions and scalars,
    spherical-linear for orientation. Exact at keyframe times."""
    from scipy.spatial.transform import Rotation, Slerp

    if len(keyframes) < 2:
        raise NonMonotoneKeyframes("need at least 2 keyframes")
    times = [k.time for k in keyframes]
    if any(b <= a for a, b in zip(times, times[1:])):
        raise NonMonotoneKeyframes(f"keyframe times must strictly increase: {times}")
    t = min(max(t, times[0]), times[-1])
    for k in keyframes:
        if k.time == t:
            return k.camera, k.tf_window, dict(k.settings)
    hi = next(i for i, kt in enumerate(times) if kt > t)
    k0, k1 = keyframes[hi - 1], keyframes[hi]
    f = (t - k0.time) / (k1.time - k0.time)

    p0, p1 = np.asarray(k0.camera.position), np.asarray(k1.camera.position)
    pos = p0 * (1 - f) + p1 * f
    d0 = k0.camera.basis()[4]
    d1 = k1.camera.basis()[4]
    dist = d0 * (1 - f) + d1 * f
    rot = Slerp([0.0, 1.0], Rotation.from_matrix(
        np.stack([_camera_rotation(k0.camera), _camera_rotation(k1.camera)])
    ))(f).as_matrix()
    fwd = -rot[:, 2]
    up = rot[:, 1]
    proj0, proj1 = k0.camera.projection, k1.camera.projection
    if proj0[0] == proj1[0]:
        proj = (proj0[0], proj0[1] * (1 - f) + proj1[1] * f)
    else:
        proj = proj0
    camera = Camera(
        position=tuple(pos),
        look_at=tuple(pos + fwd * dist),
        up=tuple(up),
        projection=proj,
        image_size=k0.camera.image_size,
    )
    window = None
    if k0.tf_window is not None and k1.tf_window is not None:
        window = tuple(a * (1 - f) + b * f for a, b in zip(k0.tf_window, k1.tf_window))
    elif k0.tf_window is not None:
        window = k0.tf_window
    settings = dict(k0.settings)
    for key, v1 in k1.settings.items():
        v0 = settings.get(key, v1)
        if isinstance(v0, float) and isinstance(v1, float):
            settings[key] = v0 * (1 - f) + v1 * f
        else:
            settings[key] = v0
    return camera, window, settings


def animate(octree: BrickOctree, keyframes: list[Keyframe], tfs,
            settings: RenderSettings, fps: float = 24.0,
            duration: float | None = None,
            out_dir: str | os.PathLike | None = None):
    """Render the keyframe animation as an image sequence.

    Returns the frame arrays, or the written file paths when out_dir is given.
    """
    if isinstance(tfs, TransferFunction):
        tfs = [tfs]
    t_start = keyframes[0].time if keyframes else 0.0
    t_end = (t_start + duration) if duration is not None else keyframes[-1].time
    n_frames = max(2, int(round((t_end - t_start) * fps)) + 1)
    results = []
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
    for i in range(n_frames):
        t = t_start + i / fps
        t = min(t, t_end)
        camera, window, overrides = interpolate_keyframes(keyframes, t)
        frame_settings = replace(settings, **{
            k: v for k, v in overrides.items() if hasattr(settings, k)
        })
        frame_tfs = tfs
        if window is not None:
            frame_tfs = [replace(tf, window=tuple(window)) for tf in tfs]
        img = render(octree, camera, frame_tfs, frame_settings)
        if out_dir is not None:
            p = out_dir / f"frame_{i:04d}.png"
            save_png(img, p)
            results.append(p)
        else:
            results.append(img)
    return results
