import json

import numpy as np
from click.testing import CliRunner
from PIL import Image

from voxstream.cli import main
from voxstream.volume import SliceVolume
from conftest import build_ensemble, make_volume


def test_convert_octree_render(tmp_path):
    stack = tmp_path / "stack"
    stack.mkdir()
    arr = np.zeros((16, 16), dtype=np.uint8)
    arr[4:12, 4:12] = 180
    for z in range(16):
        Image.fromarray(arr).save(stack / f"s{z:02d}.tif")

    runner = CliRunner()
    r = runner.invoke(main, ["convert", "--input", str(stack),
                             "--output", str(tmp_path / "vol")])
    assert r.exit_code == 0, r.output
    assert SliceVolume(tmp_path / "vol").meta.dimensions == (16, 16, 16)

    r = runner.invoke(main, ["octree", "--volume", str(tmp_path / "vol"),
                             "--brick-size", "16"])
    assert r.exit_code == 0, r.output

    r = runner.invoke(main, [
        "render", "--octree", str(tmp_path / "vol" / "octree_b16"),
        "--camera", "pos=8,8,40 look=8,8,8", "--proj", "ortho:width=16",
        "--size", "16,16", "--mode", "mip", "--out", str(tmp_path / "f.png"),
    ])
    assert r.exit_code == 0, r.output
    assert (tmp_path / "f.png").is_file()


def test_filter_and_cca_and_quantify(tmp_path):
    arr = np.zeros((12, 12, 12), dtype=np.uint8)
    arr[2:5, 2:5, 2:5] = 210
    arr[8:10, 8:10, 8:10] = 210
    make_volume(tmp_path / "vol", arr)

    runner = CliRunner()
    r = runner.invoke(main, ["filter", "--volume", str(tmp_path / "vol"),
                             "--output", str(tmp_path / "thr"),
                             "--filter", "threshold:100,255"])
    assert r.exit_code == 0, r.output

    r = runner.invoke(main, ["cca", "label", "--volume", str(tmp_path / "thr"),
                             "--output", str(tmp_path / "labels"),
                             "--csv", str(tmp_path / "t.csv")])
    assert r.exit_code == 0, r.output
    assert "2 components" in r.output

    r = runner.invoke(main, ["quantify", "compare", str(tmp_path / "thr"),
                             str(tmp_path / "thr"), "--mode", "dice"])
    assert r.exit_code == 0, r.output
    assert json.loads(r.output)["dice"] == 1.0


def test_json_errors_flag(tmp_path):
    make_volume(tmp_path / "vol", np.zeros((4, 4, 4), dtype=np.uint8))
    runner = CliRunner()
    r = runner.invoke(main, ["--json-errors", "quantify", "compare",
                             str(tmp_path / "vol")])
    assert r.exit_code == 1
    doc = json.loads(r.stderr)
    assert doc["error"] == "VoxstreamError"


def test_ensemble_and_embed_commands(tmp_path):
    dims = (6, 6, 6)

    def fn(mi, si, fname):
        rng = np.random.default_rng(mi * 10 + si)
        return rng.random((1, 6, 6, 6), dtype=np.float32)

    build_ensemble(tmp_path / "ens", 2, 3, dims, {"f": 1}, fn)
    runner = CliRunner()
    r = runner.invoke(main, ["ensemble", "scan", str(tmp_path / "ens")])
    assert r.exit_code == 0, r.output
    assert json.loads(r.output)["members"] == 2

    r = runner.invoke(main, ["embed", "extract", str(tmp_path / "ens"),
                             "--fields", "f", "--samples", "32",
                             "--out", str(tmp_path / "feats")])
    assert r.exit_code == 0, r.output
    r = runner.invoke(main, ["embed", "matrix", str(tmp_path / "feats"),
                             "--out", str(tmp_path / "m.dist")])
    assert r.exit_code == 0, r.output
    r = runner.invoke(main, ["embed", "mds", str(tmp_path / "m.dist"),
                             "-k", "2", "--out", str(tmp_path / "emb.json")])
    assert r.exit_code == 0, r.output
    emb = json.loads((tmp_path / "emb.json").read_text())
    assert len(emb["points"]) == 6


def test_vesselness_and_segment_and_fill(tmp_path):
    arr = np.zeros((16, 16, 16), dtype=np.uint8)
    arr[4:12, 4:12, 4:12] = 220
    arr[7:9, 7:9, 7:9] = 0  # cavity
    make_volume(tmp_path / "vol", arr)
    runner = CliRunner()

    r = runner.invoke(main, ["vesselness", "--volume", str(tmp_path / "vol"),
                             "--output", str(tmp_path / "ves"),
                             "--scales", "1.5,2.5"])
    assert r.exit_code == 0, r.output
    assert SliceVolume(tmp_path / "ves").meta.dtype == "f32"

    r = runner.invoke(main, ["cca", "fill", "--volume", str(tmp_path / "vol"),
                             "--output", str(tmp_path / "filled")])
    assert r.exit_code == 0, r.output
    filled = SliceVolume(tmp_path / "filled").read_full()[0]
    assert filled[8, 8, 8] != 0  # cavity closed

    from voxstream.randomwalker import LabelSet
    LabelSet(foreground=[(8, 8, 8)], background=[(0, 0, 0)]).save(
        tmp_path / "labels.json")
    r = runner.invoke(main, ["segment", "--volume", str(tmp_path / "vol"),
                             "--labels", str(tmp_path / "labels.json"),
                             "--output", str(tmp_path / "prob"),
                             "--mask", str(tmp_path / "seg")])
    assert r.exit_code == 0, r.output
    seg = SliceVolume(tmp_path / "seg").read_full()[0]
    assert seg[8, 8, 8] != 0 and seg[0, 0, 0] == 0


def test_animate_command(tmp_path, rng):
    from conftest import random_array

    arr = random_array(rng, (16, 16, 16))
    make_volume(tmp_path / "vol", arr)
    runner = CliRunner()
    r = runner.invoke(main, ["octree", "--volume", str(tmp_path / "vol"),
                             "--brick-size", "16",
                             "--output", str(tmp_path / "tree")])
    assert r.exit_code == 0, r.output
    kfs = [
        {"time": 0.0, "position": [8, 8, 40], "look_at": [8, 8, 8],
         "projection": ["ortho", 20.0], "image_size": [16, 16]},
        {"time": 1.0, "position": [40, 8, 8], "look_at": [8, 8, 8],
         "projection": ["ortho", 20.0], "image_size": [16, 16]},
    ]
    (tmp_path / "kf.json").write_text(json.dumps(kfs))
    r = runner.invoke(main, ["animate", "--octree", str(tmp_path / "tree"),
                             "--keyframes", str(tmp_path / "kf.json"),
                             "--fps", "4", "--mode", "mip",
                             "--out", str(tmp_path / "frames")])
    assert r.exit_code == 0, r.output
    assert len(list((tmp_path / "frames").glob("frame_*.png"))) == 5


def test_exhaustive_extract_and_aggregate(tmp_path):
    def fn(mi, si, fname):
        return np.full((1, 4, 4, 4), float(mi + si), dtype=np.float32)

    build_ensemble(tmp_path / "ens", 2, 2, (4, 4, 4), {"f": 1}, fn)
    runner = CliRunner()
    r = runner.invoke(main, ["embed", "extract", str(tmp_path / "ens"),
                             "--fields", "f", "--exhaustive",
                             "--out", str(tmp_path / "feats")])
    assert r.exit_code == 0, r.output
    from voxstream.similarity import FeatureFile
    assert FeatureFile.open(tmp_path / "feats" / "f.feat").n_samples == 64

    r = runner.invoke(main, ["ensemble", "aggregate", str(tmp_path / "ens"),
                             "--field", "f", "--stat", "stddev",
                             "--out", str(tmp_path / "agg")])
    assert r.exit_code == 0, r.output
    assert SliceVolume(tmp_path / "agg").meta.dtype == "f32"


def test_pipeline_command(tmp_path):
    arr = np.zeros((8, 8, 8), dtype=np.uint8)
    arr[2:6, 2:6, 2:6] = 200
    make_volume(tmp_path / "vol", arr)
    config = {
        "steps": [
            {"name": "thr", "op": "threshold", "params": {"lo": 100, "hi": 255},
             "inputs": {"volume": str(tmp_path / "vol")},
             "outputs": {"volume": "mask"}},
        ],
    }
    (tmp_path / "p.json").write_text(json.dumps(config))
    runner = CliRunner()
    r = runner.invoke(main, ["pipeline", "run", str(tmp_path / "p.json"),
                             "--out", str(tmp_path / "out"),
                             "--set", "thr.lo=250"])
    assert r.exit_code == 0, r.output
    manifest = json.loads((tmp_path / "out" / "manifest.json").read_text())
    assert manifest["overrides"]["thr.lo"] == 250
    assert not SliceVolume(tmp_path / "out" / "mask").read_full().any()
