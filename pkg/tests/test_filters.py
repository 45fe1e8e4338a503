import numpy as np
import pytest
from scipy import ndimage

from voxstream import filters as flt
from voxstream.errors import DtypeMismatch, EvenWindowSize
from voxstream.volume import SliceVolume, write_full
from conftest import random_array


def run_materialized(volume, filter_list, tmp_path):
    """Oracle: apply each filter as its own full read+write pass."""
    cur = volume
    reads = writes = 0
    for i, f in enumerate(filter_list):
        cur, stats = flt.run_stack(cur, [f], tmp_path / f"mat_{i}")
        reads += stats.input_slices_read
        writes += stats.output_slices_written
    return cur, reads, writes


def dense_median_oracle(arr, size_xyz):
    """Brute-force clamped-window median on a (nz, ny, nx) array."""
    sx, sy, sz = size_xyz
    nz, ny, nx = arr.shape
    out = np.empty_like(arr)
    rz, ry, rx = sz // 2, sy // 2, sx // 2
    for z in range(nz):
        for y in range(ny):
            for x in range(nx):
                zs = np.clip(np.arange(z - rz, z + rz + 1), 0, nz - 1)
                ys = np.clip(np.arange(y - ry, y + ry + 1), 0, ny - 1)
                xs = np.clip(np.arange(x - rx, x + rx + 1), 0, nx - 1)
                win = arr[np.ix_(zs, ys, xs)]
                out[z, y, x] = np.median(win)
    return out


def test_empty_stack_is_identity(tmp_path, rng):
    arr = random_array(rng, (8, 7, 6), dtype="u16", channels=2)
    vol = write_full(arr, tmp_path / "v")
    out, stats = flt.run_stack(vol, [], tmp_path / "out")
    assert np.array_equal(out.read_full(), arr)
    assert stats.input_slices_read == 6
    assert stats.output_slices_written == 6


def test_gaussian_constant_preserved(tmp_path):
    for dtype, c in (("u8", 77), ("u16", 1234), ("f32", 0.5)):
        arr = np.full((1, 9, 9, 9), c, dtype=flt.DTYPES[dtype])
        vol = write_full(arr, tmp_path / f"v_{dtype}")
        out, _ = flt.run_stack(vol, [flt.gaussian_filter(1.5)], tmp_path / f"o_{dtype}")
        res = out.read_full()
        assert np.allclose(res, c, atol=1e-4 if dtype == "f32" else 0)


def test_gaussian_derivative_constant_zero(tmp_path):
    arr = np.full((1, 9, 9, 9), 100, dtype=np.uint8)
    vol = write_full(arr, tmp_path / "v")
    for order in [(1, 0, 0), (0, 2, 0), (0, 0, 1)]:
        out, _ = flt.run_stack(
            vol, [flt.gaussian_filter(1.0, order_xyz=order)], tmp_path / f"o{order[0]}{order[1]}{order[2]}"
        )
        assert np.allclose(out.read_full(), 0.0, atol=1e-3)


def test_gaussian_impulse_matches_dense_convolution(tmp_path):
    arr = np.zeros((17, 17, 17), dtype=np.float32)
    arr[8, 8, 8] = 1.0
    vol = write_full(arr, tmp_path / "v")
    out, _ = flt.run_stack(vol, [flt.gaussian_filter(1.0)], tmp_path / "o")
    got = out.read_full()[0]

    kx = flt.gaussian_kernel1d(1.0, 0)
    kernel3d = kx[:, None, None] * kx[None, :, None] * kx[None, None, :]
    expect = ndimage.convolve(arr.astype(np.float64), kernel3d, mode="nearest")
    assert np.allclose(got, expect, atol=1e-6)


def test_gaussian_derivative_polynomial_response():
    # x ramp -> first derivative 1; x^2 -> second derivative 2
    k1 = flt.gaussian_kernel1d(1.3, 1)
    k2 = flt.gaussian_kernel1d(1.3, 2)
    n = len(k1)
    x = np.arange(-(n // 2), n // 2 + 1, dtype=np.float64)
    assert abs(np.sum(k1)) < 1e-12
    assert abs(-np.sum(x * k1) - 1.0) < 1e-12
    n2 = len(k2)
    x2 = np.arange(-(n2 // 2), n2 // 2 + 1, dtype=np.float64)
    assert abs(np.sum(k2)) < 1e-12
    assert abs(np.sum(x2**2 * k2) - 2.0) < 1e-12


def test_median_matches_bruteforce(tmp_path, rng):
    arr = rng.integers(0, 256, size=(16, 16, 16), dtype=np.uint8)
    vol = write_full(arr, tmp_path / "v")
    out, _ = flt.run_stack(vol, [flt.median_filter(3)], tmp_path / "o")
    assert np.array_equal(out.read_full()[0], dense_median_oracle(arr, (3, 3, 3)))


def test_binary_median_removes_speck(tmp_path):
    arr = np.zeros((7, 7, 7), dtype=np.uint8)
    arr[3, 3, 3] = 255
    vol = write_full(arr, tmp_path / "v")
    out, _ = flt.run_stack(vol, [flt.binary_median_filter(3)], tmp_path / "o")
    assert not out.read_full().any()


def test_binary_median_equals_median_on_binary(tmp_path, rng):
    arr = np.where(rng.random((12, 12, 12)) < 0.5, 255, 0).astype(np.uint8)
    vol = write_full(arr, tmp_path / "v")
    a, _ = flt.run_stack(vol, [flt.binary_median_filter((3, 3, 5))], tmp_path / "a")
    b, _ = flt.run_stack(vol, [flt.median_filter((3, 3, 5))], tmp_path / "b")
    assert np.array_equal(a.read_full(), b.read_full())


def test_threshold_constant(tmp_path):
    arr = np.full((4, 4, 4), 5, dtype=np.uint8)
    vol = write_full(arr, tmp_path / "v")
    out, _ = flt.run_stack(vol, [flt.threshold_filter(0, 10)], tmp_path / "o")
    assert (out.read_full() == 255).all()
    out2, _ = flt.run_stack(vol, [flt.threshold_filter(6, 10)], tmp_path / "o2")
    assert not out2.read_full().any()


def test_morphology_matches_scipy(tmp_path, rng):
    arr = rng.integers(0, 256, size=(10, 11, 12), dtype=np.uint8)
    vol = write_full(arr, tmp_path / "v")
    out, _ = flt.run_stack(vol, [flt.morphology_filter("erode", 3)], tmp_path / "o")
    expect = ndimage.minimum_filter(arr, size=3, mode="nearest")
    assert np.array_equal(out.read_full()[0], expect)
    out2, _ = flt.run_stack(vol, [flt.morphology_filter("dilate", (3, 5, 3))], tmp_path / "o2")
    expect2 = ndimage.maximum_filter(arr, size=(3, 5, 3), mode="nearest")
    assert np.array_equal(out2.read_full()[0], expect2)


def _random_filter(rng):
    kind = rng.integers(0, 4)
    if kind == 0:
        return flt.gaussian_filter(float(rng.uniform(0.5, 1.5)))
    if kind == 1:
        return flt.median_filter(tuple(rng.choice([1, 3], size=3)))
    if kind == 2:
        return flt.morphology_filter(
            ["erode", "dilate"][rng.integers(0, 2)], tuple(rng.choice([1, 3], size=3))
        )
    return flt.threshold_filter(0, float(rng.integers(50, 250)))


@pytest.mark.parametrize("depth", [1, 2, 3, 4])
def test_stream_equals_materialized(tmp_path, depth):
    rng = np.random.default_rng(depth)
    arr = rng.integers(0, 256, size=(12, 12, 12), dtype=np.uint8)
    vol = write_full(arr, tmp_path / "v")
    stack = [_random_filter(rng) for _ in range(depth)]

    streamed, stats = flt.run_stack(vol, stack, tmp_path / "stream")
    vol2 = SliceVolume(tmp_path / "v")
    mat, reads, writes = run_materialized(vol2, stack, tmp_path)

    a, b = streamed.read_full(), mat.read_full()
    if a.dtype == np.float32:
        assert np.allclose(a, b, rtol=1e-6)
    else:
        assert np.array_equal(a, b)

    # I/O algebra: streaming does one read and one write; materialized n and n
    nz = vol.meta.nz
    assert stats.input_slices_read == nz
    assert stats.output_slices_written == nz
    assert reads == depth * nz
    assert writes == depth * nz
    # window bound
    assert stats.window_high_water <= sum(f.z_extent for f in stack)


def test_stream_equals_materialized_f32(tmp_path, rng):
    arr = rng.random((12, 12, 12), dtype=np.float32)
    vol = write_full(arr, tmp_path / "v")
    stack = [flt.gaussian_filter(0.8), flt.median_filter(3),
             flt.gaussian_filter(1.2)]
    streamed, _ = flt.run_stack(vol, stack, tmp_path / "s")
    mat, _, _ = run_materialized(SliceVolume(tmp_path / "v"), stack, tmp_path)
    a, b = streamed.read_full(), mat.read_full()
    assert np.allclose(a, b, rtol=1e-6, atol=1e-7)


def test_window_high_water_353(tmp_path, rng):
    arr = random_array(rng, (16, 16, 16))
    vol = write_full(arr, tmp_path / "v")
    stack = [flt.median_filter((3, 3, 3)), flt.median_filter((3, 3, 5)),
             flt.median_filter((3, 3, 3))]
    _, stats = flt.run_stack(vol, stack, tmp_path / "o")
    assert sum(f.z_extent for f in stack) == 11
    assert stats.window_high_water <= 11
    assert stats.input_slices_read == 16


def test_shift_equivariance_interior(tmp_path, rng):
    arr = rng.integers(0, 256, size=(14, 10, 10), dtype=np.uint8)
    shifted = np.roll(arr, 1, axis=0)
    va = write_full(arr, tmp_path / "a")
    vb = write_full(shifted, tmp_path / "b")
    f = [flt.gaussian_filter(1.0), flt.median_filter(3)]
    oa, _ = flt.run_stack(va, f, tmp_path / "oa")
    ob, _ = flt.run_stack(vb, f, tmp_path / "ob")
    ra, rb = oa.read_full()[0], ob.read_full()[0]
    # interior region (away from the wrapped border and filter support)
    assert np.array_equal(ra[4:9], rb[5:10])


def test_dtype_mismatch_between_stages(tmp_path, rng):
    arr = random_array(rng, (6, 6, 6), dtype="u8")
    vol = write_full(arr, tmp_path / "v")
    needs_f32 = flt.FunctionFilter(lambda w, m: w[0], input_dtypes=("f32",))
    with pytest.raises(DtypeMismatch):
        flt.run_stack(vol, [needs_f32], tmp_path / "o")
    # after a gaussian that outputs f32 it is accepted
    ok = [flt.gaussian_filter(1.0, output_dtype="f32"), needs_f32]
    flt.run_stack(SliceVolume(tmp_path / "v"), ok, tmp_path / "o2")


def test_even_window_rejected():
    with pytest.raises(EvenWindowSize):
        flt.median_filter((2, 3, 3))
    with pytest.raises(EvenWindowSize):
        flt.morphology_filter("erode", 4)
