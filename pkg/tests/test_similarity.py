import numpy as np
import pytest

from voxstream import ensemble as ens
from voxstream import similarity as sim
from voxstream.errors import (
    DegenerateInput,
    EmptySampleDomain,
    IncompleteFeatures,
    SampleMismatch,
)
from voxstream.volume import write_full, VolumeMeta
from conftest import build_ensemble


def blob_fn(dims, n_members=3, n_steps=4):
    nx, ny, nz = dims
    z, y, x = np.mgrid[0:nz, 0:ny, 0:nx].astype(np.float64)

    def fn(mi, si, fname):
        cx = 2 + mi + 0.3 * si
        blob = np.exp(-((x - cx) ** 2 + (y - ny / 2) ** 2 + (z - nz / 2) ** 2) / 8.0)
        if fname == "vel":
            vx = np.gradient(blob, axis=2)
            vy = np.gradient(blob, axis=1)
            vz = np.gradient(blob, axis=0)
            return np.stack([vx, vy, vz]).astype(np.float32)
        return blob.astype(np.float32)
    return fn


@pytest.fixture
def dataset(tmp_path):
    dims = (10, 9, 8)
    build_ensemble(tmp_path / "e", 3, 4, dims, {"press": 1, "vel": 3},
                   blob_fn(dims))
    return ens.scan_ensemble(tmp_path / "e")


def test_extract_exhaustive_equals_all_voxels(dataset, tmp_path):
    files = sim.extract_features(dataset, ["press"], 0, seed=7,
                                 out_dir=tmp_path / "f", exhaustive=True)
    ff = files["press"]
    assert ff.n_samples == 10 * 9 * 8
    rec = ff.record(0)
    vol = dataset.get_volume(dataset.member_names()[0], 0, "press")
    assert np.array_equal(rec, vol[0].ravel())


def test_exhaustive_distance_matches_dense_oracle(dataset, tmp_path):
    files = sim.extract_features(dataset, ["press"], 0, seed=7,
                                 out_dir=tmp_path / "f", exhaustive=True)
    ff = files["press"]
    a = dataset.get_volume("run00", 0, "press")[0].astype(np.float64)
    b = dataset.get_volume("run02", 3, "press")[0].astype(np.float64)
    lo, hi = ff.normalization()
    want = np.mean(np.abs(a - b)) / (hi - lo)
    got = ff.distance(0, 11)  # run00 step0 vs run02 step3 (3 members x 4 steps)
    assert abs(got - want) <= 1e-12


def test_metric_axioms_exhaustive(dataset, tmp_path, rng):
    files = sim.extract_features(dataset, ["press"], 0, seed=7,
                                 out_dir=tmp_path / "f", exhaustive=True)
    ff = files["press"]
    n = len(ff.records)
    for _ in range(30):
        i, j, k = rng.integers(0, n, size=3)
        dij, djk, dik = ff.distance(i, j), ff.distance(j, k), ff.distance(i, k)
        assert ff.distance(i, i) == 0.0
        assert abs(dij - ff.distance(j, i)) == 0.0
        assert dik <= dij + djk + 1e-12
        assert 0.0 <= dij <= 1.0


def test_distance_normalization_endpoints(tmp_path):
    dims = (4, 4, 4)

    def fn(mi, si, fname):
        return np.full((1, 4, 4, 4), float(mi), dtype=np.float32)

    build_ensemble(tmp_path / "e", 2, 1, dims, {"f": 1}, fn)
    ds = ens.scan_ensemble(tmp_path / "e")
    files = sim.extract_features(ds, ["f"], 16, seed=1, out_dir=tmp_path / "ft")
    # constant 0 vs constant 1 with ensemble range [0, 1] -> distance 1
    assert files["f"].distance(0, 1) == 1.0


def test_vector_distance_cases():
    mag = np.ones(4)
    d = np.tile([1.0, 0.0, 0.0], (4, 1))
    assert sim.vector_distance(mag, d, mag, d, 0.0, 1.0) == 0.0
    flipped = -d
    got = sim.vector_distance(mag, d, mag, flipped, 0.0, 1.0)
    assert abs(got - 0.5) <= 1e-12  # same magnitude, opposite direction
    zero = np.zeros(4)
    zdir = np.zeros((4, 3))
    got = sim.vector_distance(mag, d, zero, zdir, 0.0, 1.0)
    assert abs(got - (0.5 * 1.0 + 0.5 * 1.0)) <= 1e-12  # mag 1 apart + angle pi
    assert sim.vector_distance(zero, zdir, zero, zdir, 0.0, 1.0) == 0.0


def test_sampling_deterministic_and_masked(dataset, tmp_path):
    p1 = sim.sample_positions(dataset, 64, seed=3)
    p2 = sim.sample_positions(dataset, 64, seed=3)
    assert np.array_equal(p1, p2)
    lo, hi = dataset.common_bounds
    assert (p1 >= lo).all() and (p1 <= hi).all()

    mask = np.zeros((8, 9, 10), dtype=np.uint8)
    mask[:, :, :5] = 255
    mvol = write_full(mask, tmp_path / "mask",
                      meta=VolumeMeta(dimensions=(10, 9, 8), dtype="u8"))
    pm = sim.sample_positions(dataset, 64, seed=3, mask=mvol)
    assert (pm[:, 0] <= 5.0).all()

    empty = write_full(np.zeros((8, 9, 10), dtype=np.uint8), tmp_path / "m0",
                       meta=VolumeMeta(dimensions=(10, 9, 8), dtype="u8"))
    with pytest.raises(EmptySampleDomain):
        sim.sample_positions(dataset, 8, seed=3, mask=empty)


def test_resume_bit_identical(dataset, tmp_path):
    full = sim.extract_features(dataset, ["press"], 32, seed=9,
                                out_dir=tmp_path / "full")

    calls = {"n": 0}

    def bomb(frac):
        calls["n"] += 1
        if calls["n"] == 5:
            raise KeyboardInterrupt

    with pytest.raises(KeyboardInterrupt):
        sim.extract_features(dataset, ["press"], 32, seed=9,
                             out_dir=tmp_path / "part", progress=bomb)
    part = sim.FeatureFile.open(tmp_path / "part" / "press.feat")
    assert not part.is_complete()
    del part
    sim.extract_features(dataset, ["press"], 32, seed=9, out_dir=tmp_path / "part")
    a = (tmp_path / "full" / "press.feat").read_bytes()
    b = (tmp_path / "part" / "press.feat").read_bytes()
    assert a == b


def test_incomplete_features_rejected(dataset, tmp_path):
    def bomb(frac):
        raise KeyboardInterrupt

    with pytest.raises(KeyboardInterrupt):
        sim.extract_features(dataset, ["press"], 16, seed=2,
                             out_dir=tmp_path / "p", progress=bomb)
    ff = sim.FeatureFile.open(tmp_path / "p" / "press.feat")
    with pytest.raises(IncompleteFeatures):
        sim.distance_matrix(ff)


def test_distance_matrix_properties(dataset, tmp_path):
    files = sim.extract_features(dataset, ["press", "vel"], 64, seed=5,
                                 out_dir=tmp_path / "f")
    dm = sim.distance_matrix(files, ["press", "vel"], path=tmp_path / "m.dist")
    n = dm.n
    assert n == 12
    full = dm.full()
    assert np.array_equal(full, full.T)
    assert (np.diag(full) == 0).all()
    assert full.min() >= 0 and full.max() <= 1

    # matches the pairwise oracle loop (averaged over both fields)
    for i, j in [(0, 1), (2, 7), (3, 11)]:
        want = (files["press"].distance(i, j) + files["vel"].distance(i, j)) / 2
        assert abs(dm.at(i, j) - want) <= 1e-6

    loaded = sim.DistanceMatrix.load(tmp_path / "m.dist")
    assert np.array_equal(loaded.tri, dm.tri)
    assert loaded.index == dm.index


def test_identical_steps_zero_matrix(tmp_path):
    dims = (4, 4, 4)
    base = np.random.default_rng(3).random((1, 4, 4, 4), dtype=np.float32)

    def fn(mi, si, fname):
        return base

    build_ensemble(tmp_path / "e", 2, 3, dims, {"f": 1}, fn)
    ds = ens.scan_ensemble(tmp_path / "e")
    files = sim.extract_features(ds, ["f"], 16, seed=1, out_dir=tmp_path / "ft")
    dm = sim.distance_matrix(files)
    assert (dm.tri == 0).all()


def test_mds_zero_matrix():
    dm = sim.DistanceMatrix([("a", 0, 0.0), ("a", 1, 1.0), ("b", 0, 0.0)],
                            np.zeros(3, dtype=np.float32))
    emb = sim.mds_embed(dm, 2)
    assert np.allclose(emb.points, 0)
    assert np.allclose(emb.spectrum, 0)


def test_mds_collinear_sign_rule():
    d = np.array([[0.0, 1.0, 2.0], [1.0, 0.0, 1.0], [2.0, 1.0, 0.0]])
    emb = sim.mds_embed(d, 1)
    got = emb.points[:, 0]
    assert np.allclose(got, [1.0, 0.0, -1.0], atol=1e-9)


def test_mds_reconstructs_euclidean_configs(rng):
    for n, k in [(10, 2), (30, 3), (50, 3)]:
        pts = rng.normal(size=(n, k))
        d = np.sqrt(((pts[:, None] - pts[None]) ** 2).sum(-1))
        emb = sim.mds_embed(d, k)
        rec = np.sqrt(((emb.points[:, None] - emb.points[None]) ** 2).sum(-1))
        assert np.abs(rec - d).max() <= 1e-9


def test_mds_degenerate():
    dm = sim.DistanceMatrix([("a", 0, 0.0)], np.zeros(0, dtype=np.float32))
    with pytest.raises(DegenerateInput):
        sim.mds_embed(dm, 2)


def test_jacobi_matches_lapack(rng):
    for n in (3, 10, 40):
        a = rng.normal(size=(n, n))
        a = (a + a.T) / 2
        w, v = sim.jacobi_eigh(a)
        want = np.sort(np.linalg.eigvalsh(a))[::-1]
        assert np.abs(w - want).max() <= 1e-9
        assert np.abs(a @ v - v @ np.diag(w)).max() <= 1e-9


def test_reembed_selection(dataset, tmp_path):
    files = sim.extract_features(dataset, ["press"], 32, seed=4,
                                 out_dir=tmp_path / "f")
    dm = sim.distance_matrix(files)
    full_emb = sim.mds_embed(dm, 2)
    all_again = sim.reembed_selection(dm, dataset.member_names(), 2)
    assert np.allclose(full_emb.points, all_again.points)

    sub = sim.reembed_selection(dm, ["run01"], 2)
    keep = [i for i, (m, _, _) in enumerate(dm.index) if m == "run01"]
    oracle = sim.mds_embed(dm.submatrix(keep), 2)
    assert np.allclose(sub.points, oracle.points)
    assert len(sub.index) == 4


def test_embedding_curves(dataset, tmp_path):
    files = sim.extract_features(dataset, ["press"], 16, seed=4,
                                 out_dir=tmp_path / "f")
    dm = sim.distance_matrix(files)
    emb = sim.mds_embed(dm, 2)
    curves = sim.embedding_curves(emb)
    assert len(curves) == 3
    assert all(len(c["points"]) == 4 for c in curves)
    assert sum(len(c["points"]) for c in curves) == len(emb.index)
    for c in curves:
        assert c["t_norm"] == sorted(c["t_norm"])
        assert c["t_norm"][0] == 0.0 and c["t_norm"][-1] == 1.0


def test_determinism_across_threads(dataset, tmp_path):
    a = sim.extract_features(dataset, ["press", "vel"], 48, seed=11,
                             out_dir=tmp_path / "t1", threads=1)
    b = sim.extract_features(dataset, ["press", "vel"], 48, seed=11,
                             out_dir=tmp_path / "t4", threads=4)
    for f in ("press", "vel"):
        b1 = (tmp_path / "t1" / f"{f}.feat").read_bytes()
        b4 = (tmp_path / "t4" / f"{f}.feat").read_bytes()
        assert b1 == b4
    m1 = sim.distance_matrix(a, threads=1)
    m4 = sim.distance_matrix(b, threads=4)
    assert np.array_equal(m1.tri, m4.tri)
    e1, e4 = sim.mds_embed(m1, 3), sim.mds_embed(m4, 3)
    assert np.array_equal(e1.points, e4.points)


def test_record_length_8192_samples(dataset, tmp_path):
    files = sim.extract_features(dataset, ["press"], 8192, seed=21,
                                 out_dir=tmp_path / "f8k")
    ff = files["press"]
    assert ff.n_samples == 8192
    assert ff.record(0).shape == (8192,)


def test_mismatched_records_rejected(dataset, tmp_path):
    files = sim.extract_features(dataset, ["press"], 16, seed=1,
                                 out_dir=tmp_path / "a")
    sub = ens.filter_dataset(dataset, members=["run00"])
    other = sim.extract_features(sub, ["press"], 16, seed=1,
                                 out_dir=tmp_path / "b")
    with pytest.raises(SampleMismatch):
        sim.distance_matrix({"press": files["press"], "x": other["press"]},
                            ["press", "x"])
