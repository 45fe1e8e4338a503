"""Pipeline-config execution and bulk processing.

A pipeline is an ordered list of steps {name, op, params, inputs, outputs}.
Input values reference either filesystem paths (with ${var} substitution) or
earlier steps' outputs via "@step.output". Validation rejects unknown ops,
reference cycles, and forward references before anything executes; on a step
failure, outputs of earlier steps are retained and a machine-readable error is
reported. Every run writes a manifest (config + overrides + seed + version)
that reproduces the run.
"""
from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from pathlib import Path

from . import __version__
from .errors import ConfigError, StepError, VoxstreamError
from .volume import SliceVolume, import_tiff_stack


@dataclass
class RunContext:
    workdir: Path
    seed: int = 0
    threads: int = 1
    memory_budget: int = 1024**3


@dataclass
class Step:
    name: str
    op: str
    params: dict = field(default_factory=dict)
    inputs: dict = field(default_factory=dict)
    outputs: dict = field(default_factory=dict)


class PipelineConfig:
    def __init__(self, steps: list[Step], variables: dict | None = None):
        self.steps = steps
        self.variables = dict(variables or {})

    @classmethod
    def from_json(cls, doc: dict) -> "PipelineConfig":
        if not isinstance(doc, dict) or "steps" not in doc:
            raise ConfigError("pipeline config must be an object with 'steps'")
        steps = []
        for i, sdoc in enumerate(doc["steps"]):
            try:
                steps.append(Step(
                    name=sdoc.get("name", f"step{i}"),
                    op=sdoc["op"],
                    params=dict(sdoc.get("params", {})),
                    inputs=dict(sdoc.get("inputs", {})),
                    outputs=dict(sdoc.get("outputs", {})),
                ))
            except KeyError as exc:
                raise ConfigError(f"step {i}: missing {exc}") from exc
        return cls(steps, doc.get("variables"))

    @classmethod
    def load(cls, path) -> "PipelineConfig":
        try:
            return cls.from_json(json.loads(Path(path).read_text(encoding="utf-8")))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc

    def to_json(self) -> dict:
        return {
            "variables": self.variables,
            "steps": [
                {"name": s.name, "op": s.op, "params": s.params,
                 "inputs": s.inputs, "outputs": s.outputs}
                for s in self.steps
            ],
        }


_REF = re.compile(r"^@([A-Za-z0-9_\-]+)\.([A-Za-z0-9_\-]+)$")
_VAR = re.compile(r"\$\{([A-Za-z0-9_\-]+)\}")


def _apply_overrides(config: PipelineConfig, overrides: dict) -> PipelineConfig:
    """Overrides map 'step.param' (or 'var') to values."""
    cfg = PipelineConfig(
        [Step(s.name, s.op, dict(s.params), dict(s.inputs), dict(s.outputs))
         for s in config.steps],
        dict(config.variables),
    )
    by_name = {s.name: s for s in cfg.steps}
    for key, value in overrides.items():
        if "." in key:
            step_name, param = key.split(".", 1)
            if step_name not in by_name:
                raise ConfigError(f"override {key!r}: no step named {step_name!r}")
            by_name[step_name].params[param] = value
        else:
            cfg.variables[key] = value
    return cfg


def _substitute(value: str, variables: dict) -> str:
    def repl(m):
        name = m.group(1)
        if name not in variables:
            raise ConfigError(f"undefined variable ${{{name}}}")
        return str(variables[name])

    return _VAR.sub(repl, value)


def validate(config: PipelineConfig):
    """Schema, op, uniqueness, and reference-graph checks (cycles, forward refs)."""
    names = [s.name for s in config.steps]
    if len(set(names)) != len(names):
        raise ConfigError(f"duplicate step names: {names}")
    for s in config.steps:
        if s.op not in OPS:
            raise ConfigError(f"step {s.name!r}: unknown op {s.op!r}")
    order = {s.name: i for i, s in enumerate(config.steps)}
    by_name = {s.name: s for s in config.steps}
    graph = {}
    for s in config.steps:
        deps = set()
        for v in s.inputs.values():
            m = _REF.match(str(v))
            if m:
                ref_step, ref_out = m.group(1), m.group(2)
                if ref_step not in order:
                    raise ConfigError(
                        f"step {s.name!r}: reference to unknown step {ref_step!r}")
                if ref_out not in by_name[ref_step].outputs:
                    raise ConfigError(
                        f"step {s.name!r}: {ref_step!r} has no output {ref_out!r}")
                deps.add(ref_step)
        graph[s.name] = deps
    # cycle detection
    state = {n: 0 for n in graph}

    def visit(n):
        if state[n] == 1:
            raise ConfigError(f"cyclic step references involving {n!r}")
        if state[n] == 2:
            return
        state[n] = 1
        for d in graph[n]:
            visit(d)
        state[n] = 2

    for n in graph:
        visit(n)
    for s in config.steps:
        for d in graph[s.name]:
            if order[d] >= order[s.name]:
                raise ConfigError(
                    f"step {s.name!r} references {d!r}, which runs later")


def run_pipeline(config: PipelineConfig, out_dir, overrides: dict | None = None,
                 ctx: RunContext | None = None) -> dict:
    """Execute steps in order; returns the run manifest."""
    overrides = overrides or {}
    config = _apply_overrides(config, overrides)
    validate(config)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    ctx = ctx or RunContext(workdir=out_dir)
    manifest = {
        "config": config.to_json(),
        "overrides": {k: v for k, v in overrides.items()},
        "seed": ctx.seed,
        "threads": ctx.threads,
        "version": __version__,
        "steps": [],
    }
    produced: dict[tuple[str, str], str] = {}
    for step in config.steps:
        inputs = {}
        for k, v in step.inputs.items():
            v = str(v)
            m = _REF.match(v)
            if m:
                inputs[k] = produced[(m.group(1), m.group(2))]
            else:
                inputs[k] = _substitute(v, config.variables)
        outputs = {}
        for k, v in step.outputs.items():
            p = out_dir / _substitute(str(v), config.variables)
            p.parent.mkdir(parents=True, exist_ok=True)
            outputs[k] = str(p)
            produced[(step.name, k)] = str(p)
        try:
            OPS[step.op](ctx, step.params, inputs, outputs)
        except VoxstreamError:
            raise
        except Exception as exc:
            raise StepError(f"step {step.name!r} ({step.op}): {exc}") from exc
        manifest["steps"].append({"name": step.name, "op": step.op,
                                  "params": step.params, "outputs": outputs})
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=1),
                                           encoding="utf-8")
    return manifest


def run_bulk(config: PipelineConfig, datasets: list[str], out_root,
             overrides: dict | None = None, ctx: RunContext | None = None) -> dict:
    """Independent per-dataset runs; one failure does not abort the rest."""
    if not datasets:
        raise ConfigError("bulk run needs a non-empty dataset list")
    out_root = Path(out_root)
    summary = {}
    for ds in datasets:
        name = Path(ds).name or str(ds).replace("/", "_")
        run_over = dict(overrides or {})
        run_over["dataset"] = str(ds)
        try:
            run_pipeline(config, out_root / name, run_over, ctx)
            summary[str(ds)] = {"status": "done", "output": str(out_root / name)}
        except VoxstreamError as exc:
            summary[str(ds)] = {"status": "failed",
                                "error": f"{type(exc).__name__}: {exc}"}
    out_root.mkdir(parents=True, exist_ok=True)
    (out_root / "summary.json").write_text(json.dumps(summary, indent=1),
                                           encoding="utf-8")
    return summary


def error_json(exc: Exception) -> str:
    return json.dumps({"error": type(exc).__name__, "message": str(exc)})


# -- operations ------------------------------------------------------------------------


def _op_import_tiff(ctx, params, inputs, outputs):
    import_tiff_stack(inputs["dir"], outputs["volume"],
                      spacing_mm=tuple(params.get("spacing_mm", (1.0, 1.0, 1.0))))


def _op_filter_stack(ctx, params, inputs, outputs):
    from .filters import filter_from_json, run_stack

    filters = [filter_from_json(doc) for doc in params.get("filters", [])]
    run_stack(SliceVolume(inputs["volume"]), filters, outputs["volume"])


def _op_threshold(ctx, params, inputs, outputs):
    from .filters import run_stack, threshold_filter

    run_stack(SliceVolume(inputs["volume"]),
              [threshold_filter(params["lo"], params["hi"])], outputs["volume"])


def _op_octree(ctx, params, inputs, outputs):
    from .octree import build_octree

    build_octree(SliceVolume(inputs["volume"]),
                 brick_size=int(params.get("brick_size", 32)),
                 cache_dir=outputs["octree"],
                 cache_budget=ctx.memory_budget)


def _op_vesselness(ctx, params, inputs, outputs):
    from .vesselness import VesselnessParams, vesselness

    p = VesselnessParams(
        scales=[float(s) for s in params.get("scales", [1.0])],
        gamma12=float(params.get("gamma12", 1.0)),
        gamma23=float(params.get("gamma23", 1.0)),
        alpha=float(params.get("alpha", 0.25)),
    )
    vesselness(SliceVolume(inputs["volume"]), p, outputs["volume"])


def _op_cca_label(ctx, params, inputs, outputs):
    from .components import label_components

    labels, table = label_components(
        SliceVolume(inputs["volume"]),
        connectivity=int(params.get("connectivity", 26)),
        out_path=outputs["labels"],
    )
    if "csv" in outputs:
        table.to_csv(outputs["csv"])
    if "json" in outputs:
        table.to_json(outputs["json"])


def _op_cca_filter(ctx, params, inputs, outputs):
    from .components import filter_components

    filter_components(
        SliceVolume(inputs["volume"]),
        connectivity=int(params.get("connectivity", 26)),
        min_voxels=int(params.get("min_voxels", 1)),
        out_path=outputs["volume"],
    )


def _op_fill_cavities(ctx, params, inputs, outputs):
    from .components import fill_cavities

    fill_cavities(
        SliceVolume(inputs["volume"]),
        background_connectivity=int(params.get("background_connectivity", 6)),
        out_path=outputs["volume"],
    )


def _op_segment(ctx, params, inputs, outputs):
    from .octree import BrickOctree, build_octree
    from .randomwalker import (LabelSet, RwParams, binarize_array, hrw_update,
                               rw_solve_incore, save_probability_volume)
    from .volume import write_full

    labels = LabelSet.load(inputs["labels"])
    rw_params = RwParams(beta=float(params.get("beta", 4000.0)))
    if params.get("hierarchical", True):
        if "octree" in inputs:
            tree = BrickOctree(inputs["octree"], cache_budget=ctx.memory_budget)
        else:
            tree = build_octree(SliceVolume(inputs["volume"]),
                                cache_budget=ctx.memory_budget)
        pot = hrw_update(tree, labels, rw_params)
        prob = pot.reconstruct()
        meta = tree.source_volume_meta()
    else:
        vol = SliceVolume(inputs["volume"])
        prob = rw_solve_incore(vol, labels, rw_params)
        meta = vol.meta
    save_probability_volume(prob, meta, outputs["probability"])
    if "mask" in outputs:
        mask = binarize_array(prob, float(params.get("threshold", 0.5)))
        write_full(mask, outputs["mask"])


def _op_compare(ctx, params, inputs, outputs):
    from .quantify import compare

    report = compare(SliceVolume(inputs["a"]), SliceVolume(inputs["b"]),
                     mode=params.get("mode", "both"),
                     normalized=bool(params.get("normalized", False)))
    report.to_json(outputs["report"])


def _op_stats(ctx, params, inputs, outputs):
    from .quantify import volume_stats

    stats = volume_stats(SliceVolume(inputs["volume"]),
                         histogram=bool(params.get("histogram", False)))
    doc = [
        {"min": s.min, "max": s.max, "mean": s.mean,
         "histogram": s.histogram.tolist() if s.histogram is not None else None}
        for s in stats
    ]
    Path(outputs["report"]).write_text(json.dumps(doc, indent=1), encoding="utf-8")


def _op_aggregate(ctx, params, inputs, outputs):
    from .ensemble import aggregate, scan_ensemble

    ds = scan_ensemble(inputs["ensemble"], cache_budget=ctx.memory_budget)
    aggregate(ds, params["field"],
              members=params.get("members"),
              time_window=tuple(params["time_window"]) if params.get("time_window") else None,
              stat=params.get("stat", "mean"),
              out=outputs["volume"])


def _op_render(ctx, params, inputs, outputs):
    from .octree import BrickOctree
    from .render import (Camera, RenderSettings, TransferFunction, load_tf_set,
                         render, save_png)

    tree = BrickOctree(inputs["octree"], cache_budget=ctx.memory_budget)
    cam_doc = params["camera"]
    camera = Camera(
        position=tuple(cam_doc["position"]),
        look_at=tuple(cam_doc["look_at"]),
        up=tuple(cam_doc.get("up", (0.0, 1.0, 0.0))),
        projection=tuple(cam_doc.get("projection", ("ortho", 100.0))),
        image_size=tuple(cam_doc.get("image_size", (256, 256))),
    )
    if "tf" in inputs:
        tfs = load_tf_set(json.loads(Path(inputs["tf"]).read_text()))
    elif "tf" in params:
        tfs = load_tf_set(params["tf"])
    else:
        tfs = [TransferFunction.grayscale() for _ in range(tree.meta.channels)]
    settings = RenderSettings(
        mode=params.get("mode", "dvr"),
        step=float(params.get("step", 0.5)),
        lod=int(params.get("lod", 0)),
        channel_shift=params.get("channel_shift"),
        background=tuple(params.get("background", (0.0, 0.0, 0.0))),
    )
    save_png(render(tree, camera, tfs, settings), outputs["image"])


def _op_extract_features(ctx, params, inputs, outputs):
    from .ensemble import scan_ensemble
    from .similarity import extract_features

    ds = scan_ensemble(inputs["ensemble"], cache_budget=ctx.memory_budget)
    extract_features(ds, params["fields"], int(params.get("samples", 8192)),
                     int(params.get("seed", ctx.seed)), outputs["features"],
                     exhaustive=bool(params.get("exhaustive", False)),
                     threads=ctx.threads)


def _op_distance_matrix(ctx, params, inputs, outputs):
    from .similarity import FeatureFile, distance_matrix

    files = {}
    for p in sorted(Path(inputs["features"]).glob("*.feat")):
        ff = FeatureFile.open(p, mode="r")
        files[ff.field] = ff
    fields = params.get("fields") or sorted(files)
    distance_matrix(files, fields, threads=ctx.threads, path=outputs["matrix"])


def _op_mds(ctx, params, inputs, outputs):
    from .similarity import DistanceMatrix, mds_embed

    emb = mds_embed(DistanceMatrix.load(inputs["matrix"]),
                    int(params.get("k", 3)))
    emb.to_json(outputs["embedding"])
    if "csv" in outputs:
        emb.to_csv(outputs["csv"])


def _op_parcoords(ctx, params, inputs, outputs):
    from .ensemble import scan_ensemble
    from .parcoords import extract_parcoords

    ds = scan_ensemble(inputs["ensemble"], cache_budget=ctx.memory_budget)
    data = extract_parcoords(ds, params["fields"],
                             int(params.get("n_spatial", 16384)),
                             int(params.get("t_samples", 100)),
                             int(params.get("seed", ctx.seed)))
    data.save(outputs["data"])


OPS = {
    "import_tiff": _op_import_tiff,
    "filter_stack": _op_filter_stack,
    "threshold": _op_threshold,
    "octree": _op_octree,
    "vesselness": _op_vesselness,
    "cca_label": _op_cca_label,
    "cca_filter": _op_cca_filter,
    "fill_cavities": _op_fill_cavities,
    "segment": _op_segment,
    "compare": _op_compare,
    "stats": _op_stats,
    "aggregate": _op_aggregate,
    "render": _op_render,
    "extract_features": _op_extract_features,
    "distance_matrix": _op_distance_matrix,
    "mds": _op_mds,
    "parcoords": _op_parcoords,
}
