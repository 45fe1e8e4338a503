import json

import numpy as np
import pytest
from PIL import Image

from voxstream import volume as vio
from voxstream.errors import (
    InconsistentSliceShape,
    MalformedMeta,
    MissingFile,
    ProtocolError,
    SizeMismatch,
)
from conftest import DTYPES, random_array


def test_read_meta_consistent(tmp_path):
    arr = np.arange(64, dtype=np.uint8).reshape(1, 4, 4, 4)
    vio.write_full(arr, tmp_path / "v")
    meta = vio.read_meta(tmp_path / "v")
    assert meta.dimensions == (4, 4, 4)
    assert meta.dtype == "u8"
    assert meta.payload_nbytes == 64


def test_read_meta_size_mismatch(tmp_path):
    arr = np.arange(64, dtype=np.uint8).reshape(1, 4, 4, 4)
    vio.write_full(arr, tmp_path / "v")
    data = tmp_path / "v" / "data.raw"
    data.write_bytes(data.read_bytes()[:-1])
    with pytest.raises(SizeMismatch):
        vio.read_meta(tmp_path / "v")


def test_read_meta_missing_and_malformed(tmp_path):
    with pytest.raises(MissingFile):
        vio.read_meta(tmp_path / "nothing")
    d = tmp_path / "v"
    d.mkdir()
    (d / "meta.json").write_text("{not json")
    (d / "data.raw").write_bytes(b"")
    with pytest.raises(MalformedMeta):
        vio.read_meta(d)
    (d / "meta.json").write_text(json.dumps({"dimensions": [4, 4]}))
    with pytest.raises(MalformedMeta):
        vio.read_meta(d)


def test_meta_physical_extent_microscopy_spacing():
    # 750 nm x 750 nm x 3 um spacing; extent = dims * spacing
    meta = vio.VolumeMeta(
        dimensions=(9070, 12723, 1634),
        spacing_mm=(0.75e-3, 0.75e-3, 3e-3),
        dtype="u16",
    )
    ext = meta.physical_extent_mm
    assert abs(ext[0] - 6.8025) < 1e-9
    assert abs(ext[1] - 9.54225) < 1e-9
    assert abs(ext[2] - 4.902) < 1e-9


def test_meta_invariants():
    with pytest.raises(MalformedMeta):
        vio.VolumeMeta(dimensions=(0, 4, 4))
    with pytest.raises(MalformedMeta):
        vio.VolumeMeta(dimensions=(4, 4, 4), spacing_mm=(0, 1, 1))
    with pytest.raises(MalformedMeta):
        vio.VolumeMeta(dimensions=(4, 4, 4), channels=0)
    with pytest.raises(MalformedMeta):
        vio.VolumeMeta(dimensions=(4, 4, 4), value_range=[(2.0, 1.0)])


def test_reader_slice_count_and_zrange(tmp_path, rng):
    arr = random_array(rng, (4, 4, 4))
    vol = vio.write_full(arr, tmp_path / "v")
    slices = list(vol.reader())
    assert len(slices) == 4
    assert all(s.shape == (1, 4, 4) for _, s in slices)
    sub = [z for z, _ in vol.reader((1, 3))]
    assert sub == [1, 2]

    vol2 = vio.SliceVolume(tmp_path / "v")
    for _ in vol2.reader():
        pass
    for _ in vol2.reader():
        pass
    assert vol2.read_slice_count == 2 * 4


@pytest.mark.parametrize("dtype", DTYPES)
@pytest.mark.parametrize("channels", [1, 2, 3])
def test_round_trip_bit_exact(tmp_path, rng, dtype, channels):
    arr = random_array(rng, (5, 3, 6), dtype=dtype, channels=channels)
    vol = vio.write_full(arr, tmp_path / "v")
    back = vio.SliceVolume(tmp_path / "v").read_full()
    assert back.dtype == arr.dtype
    assert np.array_equal(back, arr)
    assert vol.meta.channels == channels


def test_slice_addressability(tmp_path, rng):
    arr = random_array(rng, (6, 5, 7), dtype="u16", channels=2)
    vol = vio.write_full(arr, tmp_path / "v")
    full = vol.read_full()
    for z in (0, 3, 6):
        assert np.array_equal(vol.read_slice(z), full[:, z])


def test_writer_protocol_error(tmp_path):
    meta = vio.VolumeMeta(dimensions=(4, 4, 4))
    w = vio.SliceWriter(meta, tmp_path / "v")
    for _ in range(3):
        w.write_slice(np.zeros((1, 4, 4), dtype=np.uint8))
    with pytest.raises(ProtocolError):
        w.finalize()


def test_writer_rejects_extra_slices(tmp_path):
    meta = vio.VolumeMeta(dimensions=(2, 2, 1))
    with vio.SliceWriter(meta, tmp_path / "v") as w:
        w.write_slice(np.zeros((1, 2, 2), dtype=np.uint8))
        with pytest.raises(ProtocolError):
            w.write_slice(np.zeros((1, 2, 2), dtype=np.uint8))


def test_value_range_lazy_persist(tmp_path, rng):
    arr = random_array(rng, (4, 4, 4), dtype="u16")
    vol = vio.write_full(arr, tmp_path / "v")
    assert vol.meta.value_range is None
    vr = vol.ensure_value_range()
    assert vr[0] == (float(arr.min()), float(arr.max()))
    # persisted into meta.json
    again = vio.read_meta(tmp_path / "v")
    assert again.value_range is not None


def test_import_tiff_stack(tmp_path, rng):
    d = tmp_path / "stack"
    d.mkdir()
    slices = [rng.integers(0, 65535, size=(8, 8), dtype=np.uint16) for _ in range(3)]
    for i, s in enumerate(slices):
        Image.fromarray(s).save(d / f"slice_{i:03d}.tif")
    vol = vio.import_tiff_stack(d, tmp_path / "vol")
    assert vol.meta.dimensions == (8, 8, 3)
    assert vol.meta.dtype == "u16"
    full = vol.read_full()
    for i, s in enumerate(slices):
        assert np.array_equal(full[0, i], s)


def test_import_tiff_stack_inconsistent(tmp_path, rng):
    d = tmp_path / "stack"
    d.mkdir()
    Image.fromarray(np.zeros((8, 8), dtype=np.uint8)).save(d / "a.tif")
    Image.fromarray(np.zeros((4, 4), dtype=np.uint8)).save(d / "b.tif")
    with pytest.raises(InconsistentSliceShape):
        vio.import_tiff_stack(d, tmp_path / "vol")


def test_import_tiff_stack_empty(tmp_path):
    d = tmp_path / "stack"
    d.mkdir()
    with pytest.raises(MissingFile):
        vio.import_tiff_stack(d, tmp_path / "vol")
