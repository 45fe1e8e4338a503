"""Headless command-line driver for all operations."""
from __future__ import annotations

import json
import sys
from pathlib import Path

import click

from .errors import VoxstreamError
from .pipeline import PipelineConfig, RunContext, error_json, run_bulk, run_pipeline
from .volume import SliceVolume


class Ctx:
    def __init__(self, memory_budget, threads, seed, json_errors):
        self.memory_budget = memory_budget
        self.threads = threads
        self.seed = seed
        self.json_errors = json_errors

    def run_context(self, workdir=".") -> RunContext:
        return RunContext(workdir=Path(workdir), seed=self.seed,
                          threads=self.threads, memory_budget=self.memory_budget)


def _fail(ctx: Ctx, exc: Exception):
    if ctx.json_errors:
        print(error_json(exc), file=sys.stderr)
    else:
        print(f"error: {exc}", file=sys.stderr)
    sys.exit(1)


def _guard(fn):
    import functools

    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        ctx = click.get_current_context().obj
        try:
            return fn(*args, **kwargs)
        except VoxstreamError as exc:
            _fail(ctx, exc)

    return wrapper


@click.group()
@click.option("--memory-budget", type=int, default=1024**3, show_default=True,
              help="Byte budget for volume/brick caches.")
@click.option("--threads", type=int, default=1, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--json-errors", is_flag=True, help="Machine-readable errors on stderr.")
@click.pass_context
def main(ctx, memory_budget, threads, seed, json_errors):
    """Out-of-core volume processing and ensemble analysis."""
    ctx.obj = Ctx(memory_budget, threads, seed, json_errors)


@main.command()
@click.option("--input", "input_dir", required=True, type=click.Path(exists=True))
@click.option("--output", required=True, type=click.Path())
@click.option("--spacing", default="1,1,1", help="Voxel spacing in mm (x,y,z).")
@_guard
def convert(input_dir, output, spacing):
    """Import a TIFF stack directory into the native volume format."""
    from .volume import import_tiff_stack

    sp = tuple(float(v) for v in spacing.split(","))
    vol = import_tiff_stack(input_dir, output, spacing_mm=sp)
    click.echo(f"imported {vol.meta.dimensions} {vol.meta.dtype} -> {output}")


@main.command()
@click.option("--volume", required=True, type=click.Path(exists=True))
@click.option("--brick-size", default=32, show_default=True)
@click.option("--output", type=click.Path(), default=None,
              help="Octree directory (default: cached next to the volume).")
@click.pass_obj
@_guard
def octree(ctx, volume, brick_size, output):
    """Convert a volume into its multi-resolution brick octree."""
    from .octree import build_octree

    tree = build_octree(SliceVolume(volume), brick_size, cache_dir=output,
                        cache_budget=ctx.memory_budget)
    click.echo(f"octree: {tree.meta.node_count} nodes, "
               f"{tree.meta.level_count} levels -> {tree.path}")


@main.command("filter")
@click.option("--volume", required=True, type=click.Path(exists=True))
@click.option("--output", required=True, type=click.Path())
@click.option("--stack", "stack_path", type=click.Path(exists=True),
              help="JSON list of filter descriptions.")
@click.option("--filter", "specs", multiple=True,
              help='Inline spec like "median:3,3,3" or "threshold:10,255".')
@_guard
def filter_cmd(volume, output, stack_path, specs):
    """Run a filter stack over a volume in one streaming pass."""
    from .filters import filter_from_json, run_stack

    docs = []
    if stack_path:
        docs.extend(json.loads(Path(stack_path).read_text()))
    for spec in specs:
        kind, _, args = spec.partition(":")
        vals = [float(v) for v in args.split(",")] if args else []
        if kind in ("median", "binary_median", "erode", "dilate"):
            docs.append({"filter": kind, "size": [int(v) for v in vals] or 3})
        elif kind == "gaussian":
            docs.append({"filter": "gaussian", "sigma": vals or 1.0})
        elif kind == "threshold":
            docs.append({"filter": "threshold", "lo": vals[0], "hi": vals[1]})
        else:
            raise VoxstreamError(f"unknown filter spec {spec!r}")
    out, stats = run_stack(SliceVolume(volume),
                           [filter_from_json(d) for d in docs], output)
    click.echo(f"filtered -> {output} (reads={stats.input_slices_read}, "
               f"window high-water={stats.window_high_water})")


@main.command()
@click.option("--volume", required=True, type=click.Path(exists=True))
@click.option("--output", required=True, type=click.Path())
@click.option("--scales", default="1.0", help="Comma-separated sigma list (mm).")
@click.option("--alpha", default=0.25, show_default=True)
@click.option("--gamma12", default=1.0, show_default=True)
@click.option("--gamma23", default=1.0, show_default=True)
@_guard
def vesselness(volume, output, scales, alpha, gamma12, gamma23):
    """Multi-scale tube enhancement (running max over scales)."""
    from .vesselness import VesselnessParams, vesselness as run

    params = VesselnessParams(scales=[float(s) for s in scales.split(",")],
                              gamma12=gamma12, gamma23=gamma23, alpha=alpha)
    run(SliceVolume(volume), params, output)
    click.echo(f"vesselness -> {output}")


@main.command()
@click.argument("action", type=click.Choice(["label", "filter", "fill"]))
@click.option("--volume", required=True, type=click.Path(exists=True))
@click.option("--output", required=True, type=click.Path())
@click.option("--connectivity", default=26, show_default=True)
@click.option("--min-voxels", default=1, show_default=True)
@click.option("--csv", "csv_path", type=click.Path())
@click.option("--json", "json_path", type=click.Path())
@_guard
def cca(action, volume, output, connectivity, min_voxels, csv_path, json_path):
    """Streaming connected-component labeling and mask post-processing."""
    from . import components

    vol = SliceVolume(volume)
    if action == "label":
        labels, table = components.label_components(vol, connectivity, output)
        if csv_path:
            table.to_csv(csv_path)
        if json_path:
            table.to_json(json_path)
        click.echo(f"{len(table)} components -> {output}")
    elif action == "filter":
        components.filter_components(vol, connectivity, min_voxels, output)
        click.echo(f"filtered (min {min_voxels} voxels) -> {output}")
    else:
        components.fill_cavities(vol, 6 if connectivity == 26 else connectivity,
                                 output)
        click.echo(f"cavities filled -> {output}")


@main.command()
@click.option("--volume", type=click.Path(exists=True))
@click.option("--octree", "octree_path", type=click.Path(exists=True))
@click.option("--labels", required=True, type=click.Path(exists=True))
@click.option("--output", required=True, type=click.Path())
@click.option("--mask", type=click.Path(), help="Also write a 0.5-threshold mask.")
@click.option("--beta", default=4000.0, show_default=True)
@click.option("--incore", is_flag=True, help="Exact in-core solve.")
@click.pass_obj
@_guard
def segment(ctx, volume, octree_path, labels, output, mask, beta, incore):
    """Seeded random-walker segmentation (hierarchical by default)."""
    from .pipeline import OPS

    params = {"hierarchical": not incore, "beta": beta}
    inputs = {"labels": labels}
    if octree_path:
        inputs["octree"] = octree_path
    if volume:
        inputs["volume"] = volume
    outputs = {"probability": output}
    if mask:
        outputs["mask"] = mask
    OPS["segment"](ctx.run_context(), params, inputs, outputs)
    click.echo(f"probability -> {output}")


@main.command()
@click.argument("action", type=click.Choice(["compare", "stats"]))
@click.argument("paths", nargs=-1, type=click.Path(exists=True))
@click.option("--mode", default="both", show_default=True)
@click.option("--normalized", is_flag=True)
@click.option("--out", type=click.Path())
@_guard
def quantify(action, paths, mode, normalized, out):
    """Voxel-wise volume comparison and per-channel statistics."""
    from .quantify import compare, volume_stats

    if action == "compare":
        if len(paths) != 2:
            raise VoxstreamError("compare needs exactly two volume paths")
        rep = compare(SliceVolume(paths[0]), SliceVolume(paths[1]), mode,
                      normalized)
        doc = rep.to_json(out)
        click.echo(json.dumps(doc))
    else:
        if len(paths) != 1:
            raise VoxstreamError("stats needs exactly one volume path")
        stats = volume_stats(SliceVolume(paths[0]))
        doc = [{"min": s.min, "max": s.max, "mean": s.mean} for s in stats]
        if out:
            Path(out).write_text(json.dumps(doc, indent=1))
        click.echo(json.dumps(doc))


def _parse_camera(spec: str, image_size, proj):
    from .render import Camera

    parts = dict(kv.split("=", 1) for kv in spec.split(" ") if kv)
    def vec(s):
        return tuple(float(v) for v in s.split(","))
    kind, _, val = proj.partition(":")
    projection = (kind, float(val.split("=", 1)[-1]))
    return Camera(position=vec(parts["pos"]), look_at=vec(parts["look"]),
                  up=vec(parts.get("up", "0,1,0")), projection=projection,
                  image_size=tuple(image_size))


@main.command()
@click.option("--octree", "octree_path", required=True, type=click.Path(exists=True))
@click.option("--camera", required=True,
              help='e.g. "pos=32,32,-50 look=32,32,32 up=0,1,0"')
@click.option("--proj", default="ortho:width=100", show_default=True)
@click.option("--size", default="256,256", show_default=True)
@click.option("--tf", "tf_path", type=click.Path(exists=True))
@click.option("--mode", default="dvr", show_default=True)
@click.option("--lod", default=0, show_default=True)
@click.option("--step", default=0.5, show_default=True)
@click.option("--out", required=True, type=click.Path())
@click.pass_obj
@_guard
def render(ctx, octree_path, camera, proj, size, tf_path, mode, lod, step, out):
    """Raycast a still image from an octree."""
    from .octree import BrickOctree
    from .render import RenderSettings, TransferFunction, load_tf_set, render as run, save_png

    tree = BrickOctree(octree_path, cache_budget=ctx.memory_budget)
    cam = _parse_camera(camera, [int(v) for v in size.split(",")], proj)
    if tf_path:
        tfs = load_tf_set(json.loads(Path(tf_path).read_text()))
    else:
        tfs = [TransferFunction.grayscale() for _ in range(tree.meta.channels)]
    img = run(tree, cam, tfs, RenderSettings(mode=mode, lod=lod, step=step))
    save_png(img, out)
    click.echo(f"rendered -> {out}")


@main.command()
@click.option("--octree", "octree_path", required=True, type=click.Path(exists=True))
@click.option("--keyframes", required=True, type=click.Path(exists=True),
              help="JSON list of keyframes.")
@click.option("--tf", "tf_path", type=click.Path(exists=True))
@click.option("--fps", default=24.0, show_default=True)
@click.option("--duration", type=float, default=None)
@click.option("--mode", default="dvr", show_default=True)
@click.option("--out", required=True, type=click.Path())
@click.pass_obj
@_guard
def animate(ctx, octree_path, keyframes, tf_path, fps, duration, mode, out):
    """Render a keyframe animation as an image sequence."""
    from .octree import BrickOctree
    from .render import (Camera, Keyframe, RenderSettings, TransferFunction,
                         animate as run, load_tf_set)

    tree = BrickOctree(octree_path, cache_budget=ctx.memory_budget)
    docs = json.loads(Path(keyframes).read_text())
    kfs = []
    for doc in docs:
        cam = Camera(position=tuple(doc["position"]),
                     look_at=tuple(doc["look_at"]),
                     up=tuple(doc.get("up", (0, 1, 0))),
                     projection=tuple(doc.get("projection", ("ortho", 100.0))),
                     image_size=tuple(doc.get("image_size", (256, 256))))
        kfs.append(Keyframe(time=float(doc["time"]), camera=cam,
                            tf_window=tuple(doc["tf_window"]) if doc.get("tf_window") else None,
                            settings=doc.get("settings", {})))
    if tf_path:
        tfs = load_tf_set(json.loads(Path(tf_path).read_text()))
    else:
        tfs = [TransferFunction.grayscale() for _ in range(tree.meta.channels)]
    frames = run(tree, kfs, tfs, RenderSettings(mode=mode), fps=fps,
                 duration=duration, out_dir=out)
    click.echo(f"{len(frames)} frames -> {out}")


@main.group()
def ensemble():
    """Ensemble scanning and aggregation."""


@ensemble.command("scan")
@click.argument("root", type=click.Path(exists=True))
@click.pass_obj
@_guard
def ensemble_scan(ctx, root):
    from .ensemble import scan_ensemble

    ds = scan_ensemble(root, cache_budget=ctx.memory_budget)
    click.echo(json.dumps({
        "members": len(ds.members),
        "steps": sum(len(m.steps) for m in ds.members),
        "common_fields": sorted(ds.common_fields),
        "cached": ds.scan_stats.from_cache,
    }))


@ensemble.command("aggregate")
@click.argument("root", type=click.Path(exists=True))
@click.option("--field", required=True)
@click.option("--stat", default="mean", show_default=True)
@click.option("--members", default="")
@click.option("--t0", type=float, default=None)
@click.option("--t1", type=float, default=None)
@click.option("--out", required=True, type=click.Path())
@click.pass_obj
@_guard
def ensemble_aggregate(ctx, root, field, stat, members, t0, t1, out):
    from .ensemble import aggregate, scan_ensemble

    ds = scan_ensemble(root, cache_budget=ctx.memory_budget)
    window = (t0, t1) if t0 is not None and t1 is not None else None
    subset = [m for m in members.split(",") if m] or None
    aggregate(ds, field, members=subset, time_window=window, stat=stat, out=out)
    click.echo(f"{stat}({field}) -> {out}")


@main.group()
def embed():
    """Similarity features, distance matrices, and MDS embeddings."""


@embed.command("extract")
@click.argument("root", type=click.Path(exists=True))
@click.option("--fields", required=True)
@click.option("--samples", default=8192, show_default=True)
@click.option("--out", required=True, type=click.Path())
@click.option("--exhaustive", is_flag=True)
@click.pass_obj
@_guard
def embed_extract(ctx, root, fields, samples, out, exhaustive):
    from .ensemble import scan_ensemble
    from .similarity import extract_features

    ds = scan_ensemble(root, cache_budget=ctx.memory_budget)
    files = extract_features(ds, fields.split(","), samples, ctx.seed, out,
                             exhaustive=exhaustive, threads=ctx.threads)
    click.echo(f"extracted {sorted(files)} -> {out}")


@embed.command("matrix")
@click.argument("features_dir", type=click.Path(exists=True))
@click.option("--fields", default="")
@click.option("--out", required=True, type=click.Path())
@click.pass_obj
@_guard
def embed_matrix(ctx, features_dir, fields, out):
    from .similarity import FeatureFile, distance_matrix

    files = {}
    for p in sorted(Path(features_dir).glob("*.feat")):
        ff = FeatureFile.open(p, mode="r")
        files[ff.field] = ff
    names = [f for f in fields.split(",") if f] or sorted(files)
    dm = distance_matrix(files, names, threads=ctx.threads, path=out)
    click.echo(f"{dm.n}x{dm.n} matrix -> {out}")


@embed.command("mds")
@click.argument("matrix_path", type=click.Path(exists=True))
@click.option("-k", default=3, show_default=True)
@click.option("--out", required=True, type=click.Path())
@click.option("--csv", "csv_path", type=click.Path())
@_guard
def embed_mds(matrix_path, k, out, csv_path):
    from .similarity import DistanceMatrix, mds_embed

    emb = mds_embed(DistanceMatrix.load(matrix_path), k)
    emb.to_json(out)
    if csv_path:
        emb.to_csv(csv_path)
    click.echo(f"embedding ({len(emb.index)} points, k={k}) -> {out}")


@main.command()
@click.argument("root", type=click.Path(exists=True))
@click.option("--fields", required=True)
@click.option("-n", "n_spatial", default=16384, show_default=True)
@click.option("-t", "t_samples", default=100, show_default=True)
@click.option("--out", required=True, type=click.Path())
@click.pass_obj
@_guard
def parcoords(ctx, root, fields, n_spatial, t_samples, out):
    """Extract parallel-coordinates data over fields and time."""
    from .ensemble import scan_ensemble
    from .parcoords import extract_parcoords

    ds = scan_ensemble(root, cache_budget=ctx.memory_budget)
    data = extract_parcoords(ds, fields.split(","), n_spatial, t_samples,
                             ctx.seed)
    data.save(out)
    click.echo(json.dumps(data.summary()))


@main.group()
def pipeline():
    """Pipeline-config execution."""


@pipeline.command("run")
@click.argument("config_path", type=click.Path(exists=True))
@click.option("--out", default="pipeline_out", show_default=True)
@click.option("--set", "sets", multiple=True, help="Override step.param=value.")
@click.option("--bulk", type=click.Path(exists=True),
              help="File with one dataset path per line.")
@click.pass_obj
def pipeline_run(ctx, config_path, out, sets, bulk):
    overrides = {}
    for kv in sets:
        key, _, value = kv.partition("=")
        try:
            overrides[key] = json.loads(value)
        except json.JSONDecodeError:
            overrides[key] = value
    try:
        config = PipelineConfig.load(config_path)
        if bulk:
            datasets = [l.strip() for l in Path(bulk).read_text().splitlines()
                        if l.strip()]
            summary = run_bulk(config, datasets, out, overrides,
                               ctx.run_context(out))
            failed = sum(1 for v in summary.values() if v["status"] == "failed")
            click.echo(json.dumps(summary))
            sys.exit(1 if failed == len(summary) else 0)
        else:
            run_pipeline(config, out, overrides, ctx.run_context(out))
            click.echo(f"pipeline done -> {out}")
    except VoxstreamError as exc:
        # pipeline failures are always machine-readable on stderr
        print(error_json(exc), file=sys.stderr)
        sys.exit(1)


@main.command()
@click.argument("root", type=click.Path(exists=True))
@click.option("--bind", default="127.0.0.1:8000", show_default=True)
@click.option("--static", "static_dir", type=click.Path(), default=None,
              help="Directory with the explorer UI bundle.")
@click.pass_obj
@_guard
def serve(ctx, root, bind, static_dir):
    """Serve the ensemble HTTP API (and the UI, when a bundle is given)."""
    from .server import serve as run

    run(root, bind, volume_budget=ctx.memory_budget, static_dir=static_dir)


if __name__ == "__main__":
    main()
