from pathlib import Path

import numpy as np
import pytest

from voxstream.volume import VolumeMeta, write_full

DTYPES = ["u8", "u16", "f32"]


def random_array(rng, dims, dtype="u8", channels=1):
    """Random payload shaped (channels, nz, ny, nx) for dims = (nx, ny, nz)."""
    nx, ny, nz = dims
    shape = (channels, nz, ny, nx)
    if dtype == "u8":
        return rng.integers(0, 256, size=shape, dtype=np.uint8)
    if dtype == "u16":
        return rng.integers(0, 65536, size=shape, dtype=np.uint16)
    return rng.random(size=shape, dtype=np.float32)


def make_volume(path, array, **meta_kwargs):
    return write_full(np.asarray(array), path, **meta_kwargs)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def build_ensemble(root, n_members, n_steps, dims, fields, value_fn,
                   spacing=(1.0, 1.0, 1.0), timestamps=True):
    """Synthetic ensemble tree: root/<member>/<step>[/<field>] volume dirs.

    fields maps field name -> channel count; value_fn(member_i, step_i, field)
    returns the (channels, nz, ny, nx) payload. Single-field ensembles place
    the volume directly in the step directory.
    """
    root = Path(root)
    multi = len(fields) > 1
    for mi in range(n_members):
        for si in range(n_steps):
            sdir = root / f"run{mi:02d}" / f"t{si:03d}"
            for fname, channels in fields.items():
                arr = np.asarray(value_fn(mi, si, fname), dtype=np.float32)
                if arr.ndim == 3:
                    arr = arr[np.newaxis]
                vdir = sdir / fname if multi else sdir
                meta = VolumeMeta(
                    dimensions=dims,
                    spacing_mm=spacing,
                    dtype="f32",
                    channels=channels,
                    timestamp_s=float(si) if timestamps else None,
                    field=fname,
                )
                write_full(arr, vdir, meta=meta)
    return root
