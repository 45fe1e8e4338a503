"""Seeded foreground/background segmentation with the random-walker method.

The in-core solver fixes seed voxels to 1/0 and solves the combinatorial
Dirichlet problem on the 6-neighbor intensity-weighted graph with conjugate
gradient. The hierarchical variant walks an intensity brick octree top-down:
the coarsest brick is solved globally with the user seeds, each finer brick is
solved with Dirichlet boundary values trilinearly sampled from its parent's
probabilities (plus any user seeds inside), bricks under homogeneous parent
regions are pruned to constants, and bricks whose inputs did not change since
the previous result are reused wholesale, which is what makes repeated label
editing interactive.
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import sparse
from scipy.sparse.linalg import cg

from .errors import MissingSeeds, NonConvergence, VoxstreamError
from .octree import (
    ABSENT_CHILD,
    CONSTANT_BRICK,
    BrickOctree,
    OctreeMeta,
    OCTREE_JSON,
    NODES_BIN,
    BRICKS_BIN,
    level_grid,
    node_record_dtype,
    plan_levels,
)
from .volume import SliceVolume, SliceWriter, VolumeMeta


@dataclass
class RwParams:
    beta: float = 4000.0
    cg_tolerance: float = 1e-6
    theta_low: float = 0.01
    theta_high: float = 0.99
    min_edge_weight: float = 1e-6
    reuse_tolerance: float = 1e-3

    def __post_init__(self):
        if not self.theta_low < self.theta_high:
            raise VoxstreamError("theta_low must be < theta_high")
        if self.beta <= 0:
            raise VoxstreamError("beta must be > 0")

    def key(self):
        return (self.beta, self.cg_tolerance, self.theta_low, self.theta_high,
                self.min_edge_weight, self.reuse_tolerance)


class LabelSet:
    """Disjoint foreground/background seed voxel sets with a revision counter."""

    def __init__(self, foreground=(), background=(), revision: int = 0):
        self.foreground = {tuple(int(c) for c in p) for p in foreground}
        self.background = {tuple(int(c) for c in p) for p in background}
        self.revision = revision
        self._check()

    def _check(self):
        overlap = self.foreground & self.background
        if overlap:
            raise VoxstreamError(f"seeds labeled both ways: {sorted(overlap)[:3]}")

    def add(self, kind: str, positions):
        target = self.foreground if kind == "foreground" else self.background
        other = self.background if kind == "foreground" else self.foreground
        for p in positions:
            p = tuple(int(c) for c in p)
            other.discard(p)
            target.add(p)
        self.revision += 1

    def remove(self, kind: str, positions):
        target = self.foreground if kind == "foreground" else self.background
        for p in positions:
            target.discard(tuple(int(c) for c in p))
        self.revision += 1

    def copy(self) -> "LabelSet":
        return LabelSet(self.foreground, self.background, self.revision)

    def changed_positions(self, other: "LabelSet") -> np.ndarray:
        """Voxel coordinates whose label assignment differs, as an (n, 3) array."""
        diff = (self.foreground ^ other.foreground) | (self.background ^ other.background)
        if not diff:
            return np.empty((0, 3), dtype=np.int64)
        return np.asarray(sorted(diff), dtype=np.int64)

    def to_json(self) -> dict:
        return {
            "foreground": sorted(list(p) for p in self.foreground),
            "background": sorted(list(p) for p in self.background),
        }

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_json()), encoding="utf-8")

    @classmethod
    def from_json(cls, doc: dict) -> "LabelSet":
        return cls(doc.get("foreground", ()), doc.get("background", ()))

    @classmethod
    def load(cls, path) -> "LabelSet":
        return cls.from_json(json.loads(Path(path).read_text(encoding="utf-8")))


# -- core Dirichlet solver -----------------------------------------------------


def _solve_dirichlet(intensity: np.ndarray, fixed_mask: np.ndarray,
                     fixed_values: np.ndarray, params: RwParams) -> np.ndarray:
    """Solve the random-walker system on a normalized intensity block.

    fixed_mask marks Dirichlet voxels (seeds or boundary conditions) whose
    values are taken from fixed_values; all other voxels are solved for.
    Returns probabilities in [0, 1] with fixed voxels exact.
    """
    shape = intensity.shape
    n = intensity.size
    out = np.where(fixed_mask, fixed_values, 0.5).astype(np.float64)
    unk = np.flatnonzero(~fixed_mask.ravel())
    if unk.size == 0:
        return out
    if fixed_mask.sum() == 0:
        raise MissingSeeds("no fixed voxels in random-walker system")

    I = intensity.astype(np.float64)
    idx = np.arange(n).reshape(shape)
    rows, cols, vals = [], [], []
    deg = np.zeros(n)
    for axis in range(3):
        sl_a = [slice(None)] * 3
        sl_b = [slice(None)] * 3
        sl_a[axis] = slice(None, -1)
        sl_b[axis] = slice(1, None)
        diff = I[tuple(sl_a)] - I[tuple(sl_b)]
        w = np.maximum(params.min_edge_weight, np.exp(-params.beta * diff**2)).ravel()
        a = idx[tuple(sl_a)].ravel()
        b = idx[tuple(sl_b)].ravel()
        rows.append(a)
        cols.append(b)
        vals.append(w)
        deg += np.bincount(a, weights=w, minlength=n)
        deg += np.bincount(b, weights=w, minlength=n)
    r = np.concatenate(rows)
    c = np.concatenate(cols)
    v = np.concatenate(vals)
    L = sparse.coo_matrix(
        (np.concatenate([-v, -v, deg]),
         (np.concatenate([r, c, np.arange(n)]),
          np.concatenate([c, r, np.arange(n)]))),
        shape=(n, n),
    ).tocsr()

    fix = np.flatnonzero(fixed_mask.ravel())
    L_uu = L[unk][:, unk]
    rhs = -L[unk][:, fix] @ out.ravel()[fix]
    precond = sparse.diags(1.0 / L_uu.diagonal())
    maxiter = max(200, int(round(1000 * unk.size ** (1.0 / 3.0))))
    x, info = cg(L_uu, rhs, x0=np.full(unk.size, 0.5), rtol=params.cg_tolerance,
                 atol=0.0, maxiter=maxiter, M=precond)
    if info != 0:
        raise NonConvergence(f"conjugate gradient returned info={info}")
    flat = out.ravel()
    flat[unk] = np.clip(x, 0.0, 1.0)
    return flat.reshape(shape)


def _normalize(arr: np.ndarray, vmin: float, vmax: float) -> np.ndarray:
    span = vmax - vmin
    if span <= 0:
        return np.zeros(arr.shape, dtype=np.float64)
    return (arr.astype(np.float64) - vmin) / span


def rw_solve_incore(volume: SliceVolume, labels: LabelSet,
                    params: RwParams | None = None) -> np.ndarray:
    """Exact in-core solve; returns an (nz, ny, nx) float32 probability array."""
    params = params or RwParams()
    if not labels.foreground or not labels.background:
        raise MissingSeeds("need at least one foreground and one background seed")
    if volume.meta.channels != 1:
        raise VoxstreamError("random walker expects a single-channel volume")
    vmin, vmax = volume.ensure_value_range()[0]
    data = volume.read_full()[0]
    intensity = _normalize(data, vmin, vmax)
    nx, ny, nz = volume.meta.dimensions
    fixed = np.zeros((nz, ny, nx), dtype=bool)
    values = np.zeros((nz, ny, nx), dtype=np.float64)
    for x, y, z in labels.background:
        fixed[z, y, x] = True
        values[z, y, x] = 0.0
    for x, y, z in labels.foreground:
        fixed[z, y, x] = True
        values[z, y, x] = 1.0
    return _solve_dirichlet(intensity, fixed, values, params).astype(np.float32)


# -- hierarchical scheme ---------------------------------------------------------


@dataclass
class ProbNode:
    level: int
    coords: tuple[int, int, int]
    data: np.ndarray | None = None      # (vz, vy, vx) f32 over the valid region
    constant: float | None = None
    boundary: np.ndarray | None = None  # Dirichlet vector used for the solve
    revision: int = 0


class ProbabilityOctree:
    """Foreground-probability octree mirroring the intensity octree topology."""

    def __init__(self, octree: BrickOctree, labels: LabelSet, params: RwParams,
                 revision: int = 0):
        self.octree_path = str(octree.path)
        self.levels = octree.levels
        self.grids = octree.grids
        self.brick_size = octree.brick_size
        self.dimensions = octree.meta.dimensions
        self.labels = labels.copy()
        self.params_key = params.key()
        self.revision = revision
        self.nodes: dict[tuple, ProbNode] = {}
        self.bricks_solved = 0

    @property
    def level_count(self) -> int:
        return len(self.levels)

    def node_for(self, level: int, coords) -> ProbNode | None:
        """Deepest stored node governing (level, coords)."""
        bx, by, bz = coords
        for lv in range(level, self.level_count):
            shift = lv - level
            key = (lv, (bx >> shift, by >> shift, bz >> shift))
            node = self.nodes.get(key)
            if node is not None:
                return node
        return None

    def compatible(self, octree: BrickOctree, params: RwParams) -> bool:
        return (self.octree_path == str(octree.path)
                and self.params_key == params.key())

    def valid_size(self, level, coords):
        b = self.brick_size
        res = self.levels[level]
        return tuple(min(b, r - c * b) for r, c in zip(res, coords))

    def reconstruct(self) -> np.ndarray:
        """Full-resolution (nz, ny, nx) float32 probability array."""
        nx, ny, nz = self.dimensions
        out = np.empty((nz, ny, nx), dtype=np.float32)
        b = self.brick_size
        gx, gy, gz = self.grids[0]
        for bz in range(gz):
            for by in range(gy):
                for bx in range(gx):
                    vx, vy, vz = self.valid_size(0, (bx, by, bz))
                    block = self._level0_block((bx, by, bz), (vx, vy, vz))
                    out[bz * b:bz * b + vz, by * b:by * b + vy,
                        bx * b:bx * b + vx] = block
        return out

    def _level0_block(self, coords, valid):
        node = self.node_for(0, coords)
        if node is None:
            raise VoxstreamError(f"probability octree does not cover brick {coords}")
        vx, vy, vz = valid
        if node.constant is not None:
            return np.full((vz, vy, vx), node.constant, dtype=np.float32)
        if node.level == 0:
            return node.data
        # constant nodes are the only internal leaves, handled above
        raise VoxstreamError("internal node without children or constant")


def _seed_fixed_arrays(labels: LabelSet, level: int, origin, valid):
    """Boolean/value arrays of user seeds mapped into a level-l brick region.

    origin/valid are in level-l voxel coordinates, (x, y, z) order. Foreground
    wins where both classes collapse onto one coarse voxel.
    """
    ox, oy, oz = origin
    vx, vy, vz = valid
    fixed = np.zeros((vz, vy, vx), dtype=bool)
    values = np.zeros((vz, vy, vx), dtype=np.float64)
    scale = 1 << level
    for coords, val in ((labels.background, 0.0), (labels.foreground, 1.0)):
        for x, y, z in coords:
            lx, ly, lz = x // scale - ox, y // scale - oy, z // scale - oz
            if 0 <= lx < vx and 0 <= ly < vy and 0 <= lz < vz:
                fixed[lz, ly, lx] = True
                values[lz, ly, lx] = val
    return fixed, values


def _shell_mask(shape) -> np.ndarray:
    m = np.zeros(shape, dtype=bool)
    m[0, :, :] = m[-1, :, :] = True
    m[:, 0, :] = m[:, -1, :] = True
    m[:, :, 0] = m[:, :, -1] = True
    return m


def _trilinear(data: np.ndarray, z, y, x) -> np.ndarray:
    """Clamped trilinear sampling of a (nz, ny, nx) array at float coords."""
    nz, ny, nx = data.shape
    z = np.clip(z, 0.0, nz - 1.0)
    y = np.clip(y, 0.0, ny - 1.0)
    x = np.clip(x, 0.0, nx - 1.0)
    z0 = np.clip(np.floor(z).astype(np.int64), 0, max(nz - 2, 0))
    y0 = np.clip(np.floor(y).astype(np.int64), 0, max(ny - 2, 0))
    x0 = np.clip(np.floor(x).astype(np.int64), 0, max(nx - 2, 0))
    z1 = np.minimum(z0 + 1, nz - 1)
    y1 = np.minimum(y0 + 1, ny - 1)
    x1 = np.minimum(x0 + 1, nx - 1)
    fz, fy, fx = z - z0, y - y0, x - x0
    c000 = data[z0, y0, x0]
    c001 = data[z0, y0, x1]
    c010 = data[z0, y1, x0]
    c011 = data[z0, y1, x1]
    c100 = data[z1, y0, x0]
    c101 = data[z1, y0, x1]
    c110 = data[z1, y1, x0]
    c111 = data[z1, y1, x1]
    c00 = c000 * (1 - fx) + c001 * fx
    c01 = c010 * (1 - fx) + c011 * fx
    c10 = c100 * (1 - fx) + c101 * fx
    c11 = c110 * (1 - fx) + c111 * fx
    c0 = c00 * (1 - fy) + c01 * fy
    c1 = c10 * (1 - fy) + c11 * fy
    return c0 * (1 - fz) + c1 * fz


def _parent_shell_values(tree: ProbabilityOctree, level, coords, valid,
                         parent: ProbNode, labels: LabelSet):
    """Dirichlet data for a brick: shell sampled from the parent, seeds on top.

    Returns (fixed_mask, values, boundary_vector); the boundary vector is the
    flat list of fixed values on the shell, used for the reuse comparison.
    """
    b = tree.brick_size
    vx, vy, vz = valid
    ox, oy, oz = coords[0] * b, coords[1] * b, coords[2] * b
    shell = _shell_mask((vz, vy, vx))
    zz, yy, xx = np.nonzero(shell)
    # voxel centers of this level in parent-level continuous coordinates
    px = (xx + ox) / 2.0 - 0.25
    py = (yy + oy) / 2.0 - 0.25
    pz = (zz + oz) / 2.0 - 0.25
    pc = parent.coords
    px -= pc[0] * b
    py -= pc[1] * b
    pz -= pc[2] * b
    vals = _trilinear(parent.data.astype(np.float64), pz, py, px)
    fixed = shell.copy()
    values = np.zeros((vz, vy, vx), dtype=np.float64)
    values[zz, yy, xx] = vals
    sfix, sval = _seed_fixed_arrays(labels, level, (coords[0] * b, coords[1] * b,
                                                    coords[2] * b), valid)
    values[sfix] = sval[sfix]
    fixed |= sfix
    boundary = values[zz, yy, xx].astype(np.float32)
    return fixed, values, boundary


def _region_bounds(level, coords, valid, brick_size):
    scale = 1 << level
    lo = tuple(c * brick_size * scale for c in coords)
    hi = tuple(l + v * scale for l, v in zip(lo, valid))
    return lo, hi


def _changed_in_region(changed: np.ndarray, level, coords, valid, brick_size) -> bool:
    if changed.size == 0:
        return False
    (x0, y0, z0), (x1, y1, z1) = _region_bounds(level, coords, valid, brick_size)
    inside = (
        (changed[:, 0] >= x0) & (changed[:, 0] < x1)
        & (changed[:, 1] >= y0) & (changed[:, 1] < y1)
        & (changed[:, 2] >= z0) & (changed[:, 2] < z1)
    )
    return bool(inside.any())


def _region_has_seeds(labels: LabelSet, level, coords, valid, brick_size) -> bool:
    (x0, y0, z0), (x1, y1, z1) = _region_bounds(level, coords, valid, brick_size)
    for x, y, z in labels.foreground | labels.background:
        if x0 <= x < x1 and y0 <= y < y1 and z0 <= z < z1:
            return True
    return False


def hrw_update(octree: BrickOctree, labels: LabelSet, params: RwParams | None = None,
               prev: ProbabilityOctree | None = None) -> ProbabilityOctree:
    """Hierarchical random-walker update over an intensity octree.

    With prev supplied, unchanged subtrees (boundary drift within the reuse
    tolerance, no nearby label edits) are taken over verbatim, so the number of
    solved bricks tracks the size of the edit rather than the volume.
    """
    params = params or RwParams()
    if not labels.foreground or not labels.background:
        raise MissingSeeds("need at least one foreground and one background seed")
    if octree.meta.channels != 1:
        raise VoxstreamError("hierarchical random walker expects a single channel")

    if prev is not None and not prev.compatible(octree, params):
        prev = None
    changed = (labels.changed_positions(prev.labels)
               if prev is not None else np.empty((0, 3), dtype=np.int64))
    if prev is not None and changed.size == 0:
        result = ProbabilityOctree(octree, labels, params, prev.revision)
        result.nodes = dict(prev.nodes)
        result.bricks_solved = 0
        return result

    vr = octree.meta.value_range
    vmin, vmax = (vr[0] if vr else (float(octree.node_min[-1][0]),
                                    float(octree.node_max[-1][0])))
    tree = ProbabilityOctree(octree, labels, params,
                             (prev.revision + 1) if prev is not None else 0)
    top = octree.level_count - 1
    b = octree.brick_size

    def brick_intensity(level, coords, valid):
        vx, vy, vz = valid
        block = octree.fetch_brick(level, coords)[0, :vz, :vy, :vx]
        return _normalize(block, vmin, vmax)

    def solve_node(level, coords, fixed, values, boundary):
        valid = octree.valid_size(level, coords)
        intensity = brick_intensity(level, coords, valid)
        prob = _solve_dirichlet(intensity, fixed, values, params)
        tree.bricks_solved += 1
        node = ProbNode(level, tuple(coords), data=prob.astype(np.float32),
                        boundary=boundary, revision=tree.revision)
        tree.nodes[(level, tuple(coords))] = node
        return node

    def copy_subtree(src: ProbabilityOctree, level, coords):
        for key, node in src.nodes.items():
            lv, c = key
            if lv > level:
                continue
            shift = level - lv
            if (c[0] >> shift, c[1] >> shift, c[2] >> shift) == tuple(coords):
                tree.nodes[key] = node

    def descend(parent_node: ProbNode):
        level = parent_node.level
        if level == 0:
            return
        child_level = level - 1
        cgx, cgy, cgz = octree.grids[child_level]
        pb = parent_node.coords
        half = b // 2
        for dz in range(2):
            for dy in range(2):
                for dx in range(2):
                    cc = (2 * pb[0] + dx, 2 * pb[1] + dy, 2 * pb[2] + dz)
                    if cc[0] >= cgx or cc[1] >= cgy or cc[2] >= cgz:
                        continue
                    cvalid = octree.valid_size(child_level, cc)
                    seeds_here = _region_has_seeds(labels, child_level, cc,
                                                   cvalid, b)
                    # pruning: homogeneous parent region and no user seeds
                    rx = slice(dx * half, dx * half + (cvalid[0] + 1) // 2)
                    ry = slice(dy * half, dy * half + (cvalid[1] + 1) // 2)
                    rz = slice(dz * half, dz * half + (cvalid[2] + 1) // 2)
                    region = parent_node.data[rz, ry, rx]
                    if not seeds_here and (
                        (region < params.theta_low).all()
                        or (region > params.theta_high).all()
                    ):
                        tree.nodes[(child_level, cc)] = ProbNode(
                            child_level, cc, constant=float(region.mean()),
                            revision=tree.revision,
                        )
                        continue
                    fixed, values, boundary = _parent_shell_values(
                        tree, child_level, cc, cvalid, parent_node, labels
                    )
                    if prev is not None:
                        pn = prev.nodes.get((child_level, cc))
                        if (
                            pn is not None
                            and pn.data is not None
                            and pn.boundary is not None
                            and pn.boundary.shape == boundary.shape
                            and not _changed_in_region(changed, child_level, cc,
                                                       cvalid, b)
                            and float(np.abs(pn.boundary - boundary).max(initial=0.0))
                            <= params.reuse_tolerance
                        ):
                            copy_subtree(prev, child_level, cc)
                            continue
                    child = solve_node(child_level, cc, fixed, values, boundary)
                    descend(child)

    # root: coarsest brick with user seeds only
    rvalid = octree.valid_size(top, (0, 0, 0))
    rfixed, rvalues = _seed_fixed_arrays(labels, top, (0, 0, 0), rvalid)
    if not rfixed.any():
        raise MissingSeeds("no seeds map into the coarsest level")
    root = solve_node(top, (0, 0, 0), rfixed, rvalues,
                      rvalues[rfixed].astype(np.float32))
    descend(root)
    return tree


# -- binarization / persistence ----------------------------------------------------


def binarize_array(prob: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    return (prob >= threshold).astype(np.uint8) * 255


def binarize_probability(prob: SliceVolume, out_path: str | os.PathLike,
                         threshold: float = 0.5) -> SliceVolume:
    """Streaming threshold of a probability volume into a binary u8 mask."""
    meta = VolumeMeta(
        dimensions=prob.meta.dimensions,
        spacing_mm=prob.meta.spacing_mm,
        offset_mm=prob.meta.offset_mm,
        dtype="u8",
        channels=prob.meta.channels,
    )
    writer = SliceWriter(meta, out_path)
    try:
        for _, sl in prob.reader():
            writer.write_slice((sl >= threshold).astype(np.uint8) * 255)
        return writer.finalize()
    except Exception:
        writer.abort()
        raise


def save_probability_volume(prob: np.ndarray, meta_like: VolumeMeta,
                            path: str | os.PathLike) -> SliceVolume:
    """Persist an in-core probability array as an f32 native volume."""
    from .volume import write_full

    meta = VolumeMeta(
        dimensions=meta_like.dimensions,
        spacing_mm=meta_like.spacing_mm,
        offset_mm=meta_like.offset_mm,
        dtype="f32",
        channels=1,
    )
    return write_full(prob.astype(np.float32), path, meta=meta)


def save_probability_octree(tree: ProbabilityOctree, path: str | os.PathLike):
    """Persist a ProbabilityOctree in the standard on-disk octree layout (f32)."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    grids = tree.grids
    level_offsets = []
    off = 0
    for g in grids:
        level_offsets.append(off)
        off += g[0] * g[1] * g[2]
    node_count = off
    b = tree.brick_size
    children = np.full((node_count, 8), ABSENT_CHILD, dtype=np.uint32)
    brick = np.full(node_count, CONSTANT_BRICK, dtype=np.uint64)
    minv = np.zeros((node_count, 1), dtype=np.float32)
    maxv = np.zeros((node_count, 1), dtype=np.float32)
    const = np.full(node_count, np.nan, dtype=np.float32)

    def nid(level, c):
        gx, gy, _ = grids[level]
        return level_offsets[level] + (c[2] * gy + c[1]) * gx + c[0]

    written = 0
    with open(path / BRICKS_BIN, "wb") as bricks:
        for level in range(len(grids)):
            gx, gy, gz = grids[level]
            for bz in range(gz):
                for by in range(gy):
                    for bx in range(gx):
                        c = (bx, by, bz)
                        i = nid(level, c)
                        if level > 0:
                            cg = grids[level - 1]
                            for dz in range(2):
                                for dy in range(2):
                                    for dx in range(2):
                                        cc = (2 * bx + dx, 2 * by + dy, 2 * bz + dz)
                                        if cc[0] < cg[0] and cc[1] < cg[1] and cc[2] < cg[2]:
                                            children[i][(dz * 2 + dy) * 2 + dx] = nid(level - 1, cc)
                        node = tree.node_for(level, c)
                        if node is None:
                            raise VoxstreamError(f"uncovered brick {c} at level {level}")
                        if node.constant is not None or (node.level, node.coords) != (level, c):
                            # covered by a pruned ancestor (or itself constant)
                            value = (node.constant if node.constant is not None
                                     else float(node.data.mean()))
                            minv[i] = maxv[i] = const[i] = np.float32(value)
                            continue
                        data = node.data
                        minv[i] = data.min()
                        maxv[i] = data.max()
                        vz, vy, vx = data.shape
                        block = np.pad(
                            data[np.newaxis],
                            ((0, 0), (0, b - vz), (0, b - vy), (0, b - vx)),
                            mode="edge",
                        )
                        brick[i] = written
                        payload = block.astype("<f4").tobytes()
                        bricks.write(payload)
                        written += len(payload)

    rec = np.zeros(node_count, dtype=node_record_dtype(1))
    rec["children"] = children
    rec["brick"] = brick
    rec["minmax"][:, :, 0] = minv
    rec["minmax"][:, :, 1] = maxv
    rec["const"] = const
    rec.tofile(path / NODES_BIN)
    meta = OctreeMeta(
        brick_size=b,
        level_count=len(grids),
        node_count=node_count,
        source_hash=f"probability-{tree.revision}",
        channels=1,
        dtype="f32",
        dimensions=tree.dimensions,
        value_range=[(0.0, 1.0)],
    )
    (path / OCTREE_JSON).write_text(json.dumps(meta.to_json(), indent=1),
                                    encoding="utf-8")
    tree.labels.save(path / "labels.json")
    (path / "revision.json").write_text(json.dumps({"revision": tree.revision}),
                                        encoding="utf-8")
