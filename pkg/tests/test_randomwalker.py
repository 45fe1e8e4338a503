import numpy as np
import pytest

from voxstream import randomwalker as rw
from voxstream.errors import MissingSeeds, VoxstreamError
from voxstream.octree import BrickOctree, build_octree
from voxstream.volume import SliceVolume, VolumeMeta, write_full
from conftest import make_volume


def dense_rw_oracle(intensity, fixed, values, beta=4000.0, eps=1e-6):
    """Dense Gaussian-elimination solve of the same Dirichlet system."""
    nz, ny, nx = intensity.shape
    n = intensity.size
    idx = np.arange(n).reshape(intensity.shape)
    L = np.zeros((n, n))
    for axis, (da, db, dc) in enumerate([(1, 0, 0), (0, 1, 0), (0, 0, 1)]):
        for z in range(nz):
            for y in range(ny):
                for x in range(nx):
                    az, ay, ax = z + da, y + db, x + dc
                    if az >= nz or ay >= ny or ax >= nx:
                        continue
                    w = max(eps, np.exp(-beta * (intensity[z, y, x]
                                                 - intensity[az, ay, ax]) ** 2))
                    a, bb = idx[z, y, x], idx[az, ay, ax]
                    L[a, bb] -= w
                    L[bb, a] -= w
                    L[a, a] += w
                    L[bb, bb] += w
    fflat = fixed.ravel()
    vflat = values.ravel()
    unk = np.flatnonzero(~fflat)
    fix = np.flatnonzero(fflat)
    rhs = -L[np.ix_(unk, fix)] @ vflat[fix]
    x = np.linalg.solve(L[np.ix_(unk, unk)], rhs)
    out = vflat.astype(np.float64).copy()
    out[unk] = x
    return out.reshape(intensity.shape)


def test_symmetric_midpoint(tmp_path):
    arr = np.full((1, 1, 3), 100, dtype=np.uint8)
    vol = make_volume(tmp_path / "v", arr)
    labels = rw.LabelSet(foreground=[(0, 0, 0)], background=[(2, 0, 0)])
    prob = rw.rw_solve_incore(vol, labels)
    assert prob[0, 0, 0] == 1.0
    assert prob[0, 0, 2] == 0.0
    assert abs(prob[0, 0, 1] - 0.5) <= 1e-6


def test_all_seeded_is_indicator(tmp_path):
    arr = np.arange(8, dtype=np.uint8).reshape(2, 2, 2)
    vol = make_volume(tmp_path / "v", arr)
    fg = [(0, 0, 0), (1, 1, 0), (0, 1, 1)]
    bg = [(1, 0, 0), (0, 1, 0), (1, 1, 1), (0, 0, 1), (1, 0, 1)]
    prob = rw.rw_solve_incore(vol, rw.LabelSet(fg, bg))
    want = np.zeros((2, 2, 2), dtype=np.float32)
    for x, y, z in fg:
        want[z, y, x] = 1.0
    assert np.array_equal(prob, want)


def test_missing_seeds(tmp_path):
    vol = make_volume(tmp_path / "v", np.zeros((2, 2, 2), dtype=np.uint8))
    with pytest.raises(MissingSeeds):
        rw.rw_solve_incore(vol, rw.LabelSet([(0, 0, 0)], []))


def test_label_set_disjoint_and_diff():
    with pytest.raises(VoxstreamError):
        rw.LabelSet([(0, 0, 0)], [(0, 0, 0)])
    a = rw.LabelSet([(0, 0, 0)], [(1, 0, 0)])
    b = a.copy()
    b.add("foreground", [(2, 0, 0)])
    changed = b.changed_positions(a)
    assert changed.shape == (1, 3)
    assert tuple(changed[0]) == (2, 0, 0)


def test_label_set_json_roundtrip(tmp_path):
    a = rw.LabelSet([(1, 2, 3), (0, 0, 0)], [(4, 5, 6)])
    a.save(tmp_path / "labels.json")
    b = rw.LabelSet.load(tmp_path / "labels.json")
    assert a.foreground == b.foreground
    assert a.background == b.background


def test_incore_matches_dense_oracle(tmp_path, rng):
    arr = rng.integers(0, 256, size=(8, 8, 8), dtype=np.uint8)
    vol = make_volume(tmp_path / "v", arr)
    labels = rw.LabelSet(foreground=[(1, 1, 1), (2, 2, 2)],
                         background=[(7, 7, 7), (0, 7, 6)])
    prob = rw.rw_solve_incore(vol, labels)

    vmin, vmax = vol.meta.value_range[0]
    intensity = (arr.astype(np.float64) - vmin) / (vmax - vmin)
    fixed = np.zeros(arr.shape, dtype=bool)
    values = np.zeros(arr.shape)
    for x, y, z in labels.foreground:
        fixed[z, y, x] = True
        values[z, y, x] = 1.0
    for x, y, z in labels.background:
        fixed[z, y, x] = True
    want = dense_rw_oracle(intensity, fixed, values)
    assert np.abs(prob - want).max() <= 1e-4


def test_harmonicity_residual(tmp_path, rng):
    arr = rng.integers(0, 256, size=(8, 8, 8), dtype=np.uint8)
    vol = make_volume(tmp_path / "v", arr)
    labels = rw.LabelSet(foreground=[(0, 0, 0)], background=[(7, 7, 7)])
    prob = rw.rw_solve_incore(vol, labels).astype(np.float64)

    vmin, vmax = vol.meta.value_range[0]
    I = (arr.astype(np.float64) - vmin) / (vmax - vmin)
    nz, ny, nx = I.shape
    fixed = {(0, 0, 0), (7, 7, 7)}
    worst = 0.0
    for z in range(nz):
        for y in range(ny):
            for x in range(nx):
                if (z, y, x) in fixed:
                    continue
                wsum = psum = 0.0
                for dz, dy, dx in ((1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0),
                                   (0, 0, 1), (0, 0, -1)):
                    az, ay, ax = z + dz, y + dy, x + dx
                    if 0 <= az < nz and 0 <= ay < ny and 0 <= ax < nx:
                        w = max(1e-6, np.exp(-4000.0 * (I[z, y, x] - I[az, ay, ax]) ** 2))
                        wsum += w
                        psum += w * prob[az, ay, ax]
                worst = max(worst, abs(prob[z, y, x] - psum / wsum))
    assert worst <= 1e-4


def test_probabilities_in_range(tmp_path, rng):
    arr = rng.integers(0, 256, size=(6, 6, 6), dtype=np.uint8)
    vol = make_volume(tmp_path / "v", arr)
    prob = rw.rw_solve_incore(vol, rw.LabelSet([(0, 0, 0)], [(5, 5, 5)]))
    assert prob.min() >= 0.0 and prob.max() <= 1.0


def sphere_volume(n=64, radius=18.0, inside=220, outside=30):
    z, y, x = np.mgrid[0:n, 0:n, 0:n].astype(np.float64)
    r = np.sqrt((x - n / 2) ** 2 + (y - n / 2) ** 2 + (z - n / 2) ** 2)
    return np.where(r <= radius, inside, outside).astype(np.uint8), r <= radius


def test_hierarchical_single_brick_matches_incore(tmp_path, rng):
    arr = rng.integers(0, 256, size=(32, 32, 32), dtype=np.uint8)
    vol = make_volume(tmp_path / "v", arr)
    tree = build_octree(vol, 32)
    labels = rw.LabelSet(foreground=[(5, 5, 5)], background=[(30, 30, 30)])
    pot = rw.hrw_update(tree, labels)
    hier = pot.reconstruct()
    incore = rw.rw_solve_incore(SliceVolume(tmp_path / "v"), labels)
    assert np.abs(hier - incore).max() <= 1e-4
    assert pot.bricks_solved == 1


def test_sphere_phantom_dice(tmp_path):
    arr, mask = sphere_volume()
    vol = make_volume(tmp_path / "v", arr)
    tree = build_octree(vol, 32)
    labels = rw.LabelSet(foreground=[(32, 32, 32)],
                         background=[(2, 2, 2), (60, 60, 60), (2, 60, 32)])
    pot = rw.hrw_update(tree, labels)
    seg = pot.reconstruct() >= 0.5
    inter = (seg & mask).sum()
    dice = 2 * inter / (seg.sum() + mask.sum())
    assert dice >= 0.95


def test_full_reuse_on_unchanged_labels(tmp_path, rng):
    arr = rng.integers(0, 256, size=(48, 48, 48), dtype=np.uint8)
    vol = make_volume(tmp_path / "v", arr)
    tree = build_octree(vol, 16)
    labels = rw.LabelSet(foreground=[(10, 10, 10)], background=[(40, 40, 40)])
    first = rw.hrw_update(tree, labels)
    assert first.bricks_solved > 0
    again = rw.hrw_update(tree, labels.copy(), prev=first)
    assert again.bricks_solved == 0
    assert np.array_equal(again.reconstruct(), first.reconstruct())


def test_incremental_equals_scratch(tmp_path):
    arr, _ = sphere_volume(n=32, radius=9.0)
    vol = make_volume(tmp_path / "v", arr)
    tree = build_octree(vol, 16)
    labels = rw.LabelSet(foreground=[(16, 16, 16)], background=[(1, 1, 1)])
    params = rw.RwParams()
    pot = rw.hrw_update(tree, labels, params)
    solved_scratch_first = pot.bricks_solved

    edits = [("foreground", (17, 16, 16)), ("background", (30, 30, 30)),
             ("background", (2, 28, 3)), ("foreground", (15, 15, 17))]
    for kind, seed in edits:
        labels = labels.copy()
        labels.add(kind, [seed])
        pot = rw.hrw_update(tree, labels, params, prev=pot)
        # a local edit never costs more bricks than a from-scratch solve
        scratch = rw.hrw_update(tree, labels, params)
        assert pot.bricks_solved <= scratch.bricks_solved
    final_scratch = rw.hrw_update(tree, labels, params)
    diff = np.abs(pot.reconstruct() - final_scratch.reconstruct()).max()
    assert diff <= 1e-3
    assert solved_scratch_first > 0


def test_probability_octree_pruning(tmp_path):
    # homogeneous background far from the object collapses to constant nodes
    arr, _ = sphere_volume(n=64, radius=8.0)
    vol = make_volume(tmp_path / "v", arr)
    tree = build_octree(vol, 16)
    labels = rw.LabelSet(foreground=[(32, 32, 32)], background=[(2, 2, 2)])
    pot = rw.hrw_update(tree, labels)
    constants = [n for n in pot.nodes.values() if n.constant is not None]
    assert constants, "expected pruned constant nodes in homogeneous regions"
    for n in constants:
        assert n.constant <= 0.01 or n.constant >= 0.99
    total_level0 = tree.grids[0][0] * tree.grids[0][1] * tree.grids[0][2]
    level0_solved = sum(
        1 for (lv, _), n in pot.nodes.items() if lv == 0 and n.data is not None
    )
    assert level0_solved < total_level0
    assert pot.bricks_solved < sum(g[0] * g[1] * g[2] for g in tree.grids)


def test_binarize(tmp_path, rng):
    prob = rng.random((6, 6, 6), dtype=np.float32)
    meta = VolumeMeta(dimensions=(6, 6, 6), dtype="f32")
    vol = write_full(prob, tmp_path / "p", meta=meta)
    out = rw.binarize_probability(vol, tmp_path / "b", threshold=0.5)
    assert np.array_equal(out.read_full()[0] != 0, prob >= 0.5)
    out0 = rw.binarize_probability(SliceVolume(tmp_path / "p"), tmp_path / "b0",
                                   threshold=0.0)
    assert (out0.read_full() != 0).all()


def test_save_and_load_probability_octree(tmp_path, rng):
    arr = rng.integers(0, 256, size=(32, 32, 32), dtype=np.uint8)
    vol = make_volume(tmp_path / "v", arr)
    tree = build_octree(vol, 16)
    labels = rw.LabelSet(foreground=[(8, 8, 8)], background=[(30, 30, 30)])
    pot = rw.hrw_update(tree, labels)
    rw.save_probability_octree(pot, tmp_path / "prob_octree")

    stored = BrickOctree(tmp_path / "prob_octree")
    assert stored.meta.dtype == "f32"
    from voxstream.octree import reconstruct_level
    got = reconstruct_level(stored, 0)[0]
    assert np.abs(got - pot.reconstruct()).max() <= 1e-6
    assert rw.LabelSet.load(tmp_path / "prob_octree" / "labels.json").foreground == labels.foreground
