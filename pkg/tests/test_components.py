import numpy as np
import pytest

from voxstream import components as cca
from voxstream.volume import SliceVolume, write_full
from conftest import make_volume


def neighbor_offsets(connectivity):
    offs = []
    for dz in (-1, 0, 1):
        for dy in (-1, 0, 1):
            for dx in (-1, 0, 1):
                if dz == dy == dx == 0:
                    continue
                manhattan = abs(dx) + abs(dy) + abs(dz)
                if connectivity == 6 and manhattan > 1:
                    continue
                if connectivity == 18 and manhattan > 2:
                    continue
                offs.append((dz, dy, dx))
    return offs


def flood_fill_oracle(mask, connectivity):
    """Brute-force BFS labeling of a (nz, ny, nx) boolean mask."""
    offs = neighbor_offsets(connectivity)
    nz, ny, nx = mask.shape
    labels = np.zeros(mask.shape, dtype=np.int64)
    cur = 0
    for z in range(nz):
        for y in range(ny):
            for x in range(nx):
                if not mask[z, y, x] or labels[z, y, x]:
                    continue
                cur += 1
                stack = [(z, y, x)]
                labels[z, y, x] = cur
                while stack:
                    cz, cy, cx = stack.pop()
                    for dz, dy, dx in offs:
                        az, ay, ax = cz + dz, cy + dy, cx + dx
                        if 0 <= az < nz and 0 <= ay < ny and 0 <= ax < nx:
                            if mask[az, ay, ax] and not labels[az, ay, ax]:
                                labels[az, ay, ax] = cur
                                stack.append((az, ay, ax))
    return labels, cur


def partitions_equal(a, b):
    """Same partition up to label renaming (bijection between label sets)."""
    if not np.array_equal(a > 0, b > 0):
        return False
    fa, fb = a[a > 0], b[b > 0]
    pairs = np.unique(np.stack([fa, fb], axis=1), axis=0)
    return (
        len(np.unique(pairs[:, 0])) == len(pairs)
        and len(np.unique(pairs[:, 1])) == len(pairs)
    )


def test_all_zero(tmp_path):
    vol = make_volume(tmp_path / "v", np.zeros((6, 6, 6), dtype=np.uint8))
    labels, table = cca.label_components(vol, 26, tmp_path / "lab")
    assert len(table) == 0
    assert not labels.read_full().any()


def test_all_foreground(tmp_path):
    n = 5
    vol = make_volume(tmp_path / "v", np.full((n, n, n), 255, dtype=np.uint8))
    labels, table = cca.label_components(vol, 6, tmp_path / "lab")
    assert len(table) == 1
    c = table[0]
    assert c.voxels == n**3
    assert (c.centroid_x, c.centroid_y, c.centroid_z) == ((n - 1) / 2,) * 3
    assert (c.min_x, c.min_y, c.min_z, c.max_x, c.max_y, c.max_z) == (0, 0, 0, 4, 4, 4)


@pytest.mark.parametrize("connectivity", [6, 18, 26])
def test_partition_matches_flood_fill(tmp_path, connectivity):
    rng = np.random.default_rng(connectivity)
    for trial in range(5):
        mask = rng.random((20, 20, 20)) < 0.08
        vol = make_volume(tmp_path / f"v{connectivity}_{trial}",
                          np.where(mask, 255, 0).astype(np.uint8))
        labels, table = cca.label_components(vol, connectivity,
                                             tmp_path / f"lab{connectivity}_{trial}")
        got = labels.read_full()[0].astype(np.int64)
        want, k = flood_fill_oracle(mask, connectivity)
        assert partitions_equal(got, want)
        assert len(table) == k
        assert sum(c.voxels for c in table) == int(mask.sum())


def test_two_input_passes(tmp_path, rng):
    mask = rng.random((16, 16, 16)) < 0.1
    vol = make_volume(tmp_path / "v", np.where(mask, 255, 0).astype(np.uint8))
    cca.label_components(vol, 26, tmp_path / "lab")
    assert vol.read_slice_count == 2 * 16


def test_ids_dense_and_first_touch_order(tmp_path):
    arr = np.zeros((1, 5, 9), dtype=np.uint8)
    arr[0, 0, 0] = 255   # first touched
    arr[0, 0, 4] = 255   # second
    arr[0, 4, 8] = 255   # third
    vol = make_volume(tmp_path / "v", arr)
    labels, table = cca.label_components(vol, 26, tmp_path / "lab")
    got = labels.read_full()[0]
    assert got[0, 0, 0] == 1
    assert got[0, 0, 4] == 2
    assert got[0, 4, 8] == 3
    assert [c.id for c in table] == [1, 2, 3]


def test_filter_components_speck(tmp_path):
    arr = np.zeros((5, 5, 5), dtype=np.uint8)
    arr[2, 2, 2] = 255
    vol = make_volume(tmp_path / "v", arr)
    out = cca.filter_components(vol, 26, min_voxels=2, out_path=tmp_path / "f")
    assert not out.read_full().any()


def test_filter_components_identity_and_oracle(tmp_path, rng):
    mask = rng.random((18, 18, 18)) < 0.1
    arr = np.where(mask, 200, 0).astype(np.uint8)
    vol = make_volume(tmp_path / "v", arr)
    out1 = cca.filter_components(vol, 26, min_voxels=1, out_path=tmp_path / "f1")
    assert np.array_equal(out1.read_full()[0], arr)

    min_voxels = 3
    out = cca.filter_components(SliceVolume(tmp_path / "v"), 26, min_voxels,
                                out_path=tmp_path / "f3")
    want_lab, k = flood_fill_oracle(mask, 26)
    sizes = np.bincount(want_lab.ravel(), minlength=k + 1)
    keep = np.isin(want_lab, np.flatnonzero(sizes >= min_voxels)[1:]) & mask
    assert np.array_equal(out.read_full()[0] != 0, keep)


def test_fill_cavities_hollow_cube(tmp_path):
    arr = np.zeros((9, 9, 9), dtype=np.uint8)
    arr[2:7, 2:7, 2:7] = 255
    arr[3:6, 3:6, 3:6] = 0  # cavity
    vol = make_volume(tmp_path / "v", arr)
    out = cca.fill_cavities(vol, out_path=tmp_path / "f")
    got = out.read_full()[0]
    expect = np.zeros_like(arr)
    expect[2:7, 2:7, 2:7] = 255
    assert np.array_equal(got, expect)


def test_fill_cavities_solid_identity(tmp_path):
    arr = np.full((6, 6, 6), 255, dtype=np.uint8)
    vol = make_volume(tmp_path / "v", arr)
    out = cca.fill_cavities(vol, out_path=tmp_path / "f")
    assert np.array_equal(out.read_full()[0], arr)


def test_fill_cavities_matches_border_seeded_oracle(tmp_path, rng):
    mask = rng.random((14, 14, 14)) < 0.35
    arr = np.where(mask, 255, 0).astype(np.uint8)
    vol = make_volume(tmp_path / "v", arr)
    out = cca.fill_cavities(vol, 6, out_path=tmp_path / "f")

    bg_lab, k = flood_fill_oracle(~mask, 6)
    border_ids = set()
    for sl in (bg_lab[0], bg_lab[-1], bg_lab[:, 0], bg_lab[:, -1],
               bg_lab[:, :, 0], bg_lab[:, :, -1]):
        border_ids.update(int(v) for v in np.unique(sl) if v)
    filled = mask.copy()
    for cid in range(1, k + 1):
        if cid not in border_ids:
            filled |= bg_lab == cid
    assert np.array_equal(out.read_full()[0] != 0, filled)


def test_root_merge_files_removed_on_success(tmp_path, rng):
    mask = rng.random((8, 8, 8)) < 0.1
    vol = make_volume(tmp_path / "v", np.where(mask, 255, 0).astype(np.uint8))
    cca.label_components(vol, 26, tmp_path / "lab")
    assert not (tmp_path / "lab.root").exists()
    assert not (tmp_path / "lab.merge").exists()


def test_csv_and_json_export(tmp_path, rng):
    mask = rng.random((10, 10, 10)) < 0.08
    vol = make_volume(tmp_path / "v", np.where(mask, 255, 0).astype(np.uint8))
    _, table = cca.label_components(vol, 26, tmp_path / "lab")
    table.to_csv(tmp_path / "t.csv")
    rows = table.to_json(tmp_path / "t.json")
    header = (tmp_path / "t.csv").read_text().splitlines()[0]
    assert header == "id,voxels,min_x,min_y,min_z,max_x,max_y,max_z,centroid_x,centroid_y,centroid_z"
    assert len(rows) == len(table)
