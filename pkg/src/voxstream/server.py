"""HTTP API over one ensemble dataset, plus static hosting for the explorer UI.

Long computations (feature extraction, distance matrices, intersection masks)
run as queued jobs created with POST and observed with GET polling; everything
else answers synchronously from caches. The process serves a single dataset.
"""
from __future__ import annotations

import io
import json
from pathlib import Path

import numpy as np
from fastapi import FastAPI, HTTPException, Query, Request
from fastapi.responses import JSONResponse, Response

from .ensemble import EnsembleDataset, aggregate, scan_ensemble
from .errors import VoxstreamError
from .jobs import JobRegistry
from .octree import build_octree
from .parcoords import (
    BrushSelection,
    ParCoordsData,
    apply_brush,
    extract_parcoords,
    intersection_mask,
    time_histogram_axes,
)
from .render import TransferFunction, extract_slice
from .similarity import (
    FeatureFile,
    distance_matrix,
    embedding_curves,
    mds_embed,
    reembed_selection,
)
from .volume import SliceVolume


class ServerState:
    def __init__(self, root, volume_budget=1024**3, brick_budget=256 * 1024**2,
                 workspace=None):
        self.root = Path(root)
        self.dataset: EnsembleDataset = scan_ensemble(self.root,
                                                      cache_budget=volume_budget)
        self.workspace = Path(workspace) if workspace else self.root / ".voxstream"
        self.workspace.mkdir(parents=True, exist_ok=True)
        self.brick_budget = brick_budget
        self.jobs = JobRegistry()
        self.features: dict[str, FeatureFile] = {}
        self.matrices: dict[tuple, object] = {}
        self.embeddings: dict[tuple, object] = {}
        self.parcoords: dict[tuple, ParCoordsData] = {}
        self.masks: dict[str, SliceVolume] = {}
        self._octrees: dict[str, object] = {}
        self._load_existing_features()

    def _load_existing_features(self):
        for p in sorted(self.workspace.glob("*.feat")):
            try:
                ff = FeatureFile.open(p)
                self.features[ff.field] = ff
            except VoxstreamError:
                continue

    def octree_for(self, member, t, fieldname):
        ref = self.dataset.volume_ref(member, t, fieldname)
        key = str(ref.path)
        if key not in self._octrees:
            self._octrees[key] = build_octree(ref.open(), 16,
                                              cache_budget=self.brick_budget)
        return self._octrees[key]


def _slice_png(data: np.ndarray, lo: float, hi: float) -> bytes:
    from PIL import Image

    span = (hi - lo) or 1.0
    norm = np.clip((data.astype(np.float64) - lo) / span, 0.0, 1.0)
    img = (norm * 255.0).round().astype(np.uint8)
    buf = io.BytesIO()
    Image.fromarray(img, mode="L").save(buf, format="PNG")
    return buf.getvalue()


def create_app(root, volume_budget: int = 1024**3,
               brick_budget: int = 256 * 1024**2,
               workspace=None, static_dir=None) -> FastAPI:
    state = ServerState(root, volume_budget, brick_budget, workspace)
    app = FastAPI(title="voxstream ensemble API")
    app.state.vox = state

    @app.exception_handler(VoxstreamError)
    async def vox_error(request: Request, exc: VoxstreamError):
        return JSONResponse(status_code=400, content={
            "error": type(exc).__name__, "message": str(exc)})

    @app.get("/api/ensemble")
    def ensemble_info():
        ds = state.dataset
        return {
            "root": str(ds.root),
            "members": [
                {"name": m.name,
                 "steps": len(m.steps),
                 "timestamps": [s.timestamp for s in m.steps]}
                for m in ds.members
            ],
            "common_fields": sorted(ds.common_fields),
            "fields": sorted(ds.union_fields),
            "field_channels": ds.field_channels,
            "field_ranges": {k: [list(p) for p in v]
                             for k, v in ds.field_ranges.items()},
            "common_time_range": list(ds.common_time_range),
            "union_time_range": list(ds.union_time_range),
        }

    # -- similarity ------------------------------------------------------------

    def _matrix_key(fields):
        return tuple(sorted(fields))

    @app.post("/api/jobs/extract")
    def job_extract(body: dict):
        fields = body.get("fields") or sorted(state.dataset.common_fields)
        samples = int(body.get("samples", 1024))
        seed = int(body.get("seed", 0))

        def work(progress, cancel):
            from .similarity import extract_features

            files = extract_features(state.dataset, fields, samples, seed,
                                     out_dir=state.workspace, progress=progress)
            state.features.update(files)
            return {"fields": sorted(files)}

        job = state.jobs.submit("extract", work)
        return job.to_json()

    @app.post("/api/jobs/matrix")
    def job_matrix(body: dict):
        fields = body.get("fields") or sorted(state.features)
        missing = [f for f in fields if f not in state.features]
        if missing:
            raise HTTPException(status_code=409, detail={
                "message": f"features missing for {missing}",
                "hint": "POST /api/jobs/extract first"})

        def work(progress, cancel):
            key = _matrix_key(fields)
            dm = distance_matrix({f: state.features[f] for f in fields}, fields,
                                 path=state.workspace / "matrix.dist")
            state.matrices[key] = dm
            return {"fields": list(key), "n": dm.n}

        job = state.jobs.submit("matrix", work)
        return job.to_json()

    @app.get("/api/embedding")
    def embedding(fields: str = "", k: int = 3):
        names = ([f for f in fields.split(",") if f]
                 or sorted(state.dataset.common_fields))
        key = (_matrix_key(names), k)
        if key in state.embeddings:
            emb = state.embeddings[key]
        else:
            mkey = _matrix_key(names)
            missing = [f for f in names if f not in state.features]
            if missing:
                raise HTTPException(status_code=409, detail={
                    "message": f"features not extracted for {missing}",
                    "hint": "POST /api/jobs/extract"})
            if mkey not in state.matrices:
                incomplete = [f for f in names
                              if not state.features[f].is_complete()]
                if incomplete:
                    raise HTTPException(status_code=409, detail={
                        "message": f"features incomplete for {incomplete}",
                        "hint": "POST /api/jobs/extract"})
                raise HTTPException(status_code=409, detail={
                    "message": "distance matrix not computed",
                    "hint": "POST /api/jobs/matrix"})
            emb = mds_embed(state.matrices[mkey], k)
            state.embeddings[key] = emb
        doc = emb.to_json()
        doc["curves"] = embedding_curves(emb)
        return doc

    @app.get("/api/reembed")
    def reembed(members: str, k: int = 3, fields: str = ""):
        names = ([f for f in fields.split(",") if f]
                 or sorted(state.dataset.common_fields))
        mkey = _matrix_key(names)
        if mkey not in state.matrices:
            raise HTTPException(status_code=409, detail={
                "message": "distance matrix not computed",
                "hint": "POST /api/jobs/matrix"})
        subset = [m for m in members.split(",") if m]
        if not subset:
            raise HTTPException(status_code=400,
                                detail={"message": "no members selected"})
        emb = reembed_selection(state.matrices[mkey], subset, k)
        doc = emb.to_json()
        doc["curves"] = embedding_curves(emb)
        return doc

    @app.get("/api/jobs/{job_id}")
    def job_status(job_id: str):
        job = state.jobs.get(job_id)
        if job is None:
            raise HTTPException(status_code=404, detail="no such job")
        return job.to_json()

    # -- parallel coordinates -----------------------------------------------------

    def _parcoords_key(fields, n, t, seed, mode):
        return (tuple(fields), n, t, seed, mode)

    @app.get("/api/parcoords")
    def parcoords(fields: str = "", n: int = 1024, t: int = 10, seed: int = 0,
                  time_histogram: str = ""):
        if time_histogram:
            key = _parcoords_key((time_histogram,), n, 0, seed, "hist")
            if key not in state.parcoords:
                state.parcoords[key] = time_histogram_axes(
                    state.dataset, time_histogram, n_spatial=n, seed=seed)
        else:
            names = ([f for f in fields.split(",") if f]
                     or sorted(state.dataset.common_fields))
            key = _parcoords_key(names, n, t, seed, "plain")
            if key not in state.parcoords:
                state.parcoords[key] = extract_parcoords(
                    state.dataset, names, n_spatial=n, t_samples=t, seed=seed)
        state.parcoords["latest"] = state.parcoords[key]
        return state.parcoords[key].summary()

    @app.get("/api/parcoords/data")
    def parcoords_data():
        data = state.parcoords.get("latest")
        if data is None:
            raise HTTPException(status_code=409, detail={
                "message": "no parallel-coordinates data extracted",
                "hint": "GET /api/parcoords first"})
        return Response(content=data.values.astype("<f4").tobytes(),
                        media_type="application/octet-stream")

    @app.post("/api/selection")
    def selection(body: dict):
        data = state.parcoords.get("latest")
        if data is None:
            raise HTTPException(status_code=409, detail={
                "message": "no parallel-coordinates data extracted",
                "hint": "GET /api/parcoords first"})
        intervals = {int(a): (float(lo), float(hi))
                     for a, (lo, hi) in body.get("intervals", {}).items()}
        sel = BrushSelection(intervals=intervals)
        res = apply_brush(data, sel)
        # clamp transfer functions given per axis (windows in normalized units)
        clamped = {}
        tf_axes = body.get("tf_axes", {})
        if tf_axes:
            from .parcoords import tf_clamp

            tfs = {int(a): TransferFunction.from_json(doc)
                   for a, doc in tf_axes.items()}
            norm_intervals = {}
            for a, (lo, hi) in intervals.items():
                rlo, rhi = data.axis_range(a)
                span = (rhi - rlo) or 1.0
                norm_intervals[a] = ((lo - rlo) / span, (hi - rlo) / span)
            out = tf_clamp(BrushSelection(intervals=norm_intervals), tfs)
            clamped = {
                str(a): {**tf.to_json(), "transparent": tf.transparent}
                for a, tf in out.items()
            }
        return {
            "count": res.count,
            "fraction": res.fraction,
            "per_axis_fraction": {str(a): f for a, f in res.per_axis_fraction.items()},
            "clamped_tf": clamped,
        }

    @app.post("/api/jobs/mask")
    def job_mask(body: dict):
        data = state.parcoords.get("latest")
        if data is None:
            raise HTTPException(status_code=409, detail={
                "message": "no parallel-coordinates data extracted",
                "hint": "GET /api/parcoords first"})
        member = body["member"]
        t = int(body.get("t", 0))
        intervals = {int(a): (float(lo), float(hi))
                     for a, (lo, hi) in body.get("intervals", {}).items()}
        sel = BrushSelection(intervals=intervals)

        def work(progress, cancel):
            out = state.workspace / f"mask_{member}_{t}"
            vol = intersection_mask(state.dataset, member, t, data, sel, out,
                                    progress=progress, cancel=cancel)
            if vol is None:
                return {}
            mask_id = f"{member}_{t}"
            state.masks[mask_id] = vol
            return {"mask_id": mask_id}

        job = state.jobs.submit("mask", work)
        return job.to_json()

    @app.get("/api/masks/{mask_id}/slice")
    def mask_slice(mask_id: str, axis: str = "z", index: int = 0):
        vol = state.masks.get(mask_id)
        if vol is None:
            raise HTTPException(status_code=404, detail="no such mask")
        full = vol.read_full()[0]
        data = {"z": full[index], "y": full[:, index], "x": full[:, :, index]}[axis]
        return Response(content=_slice_png(data, 0.0, 255.0),
                        media_type="image/png")

    # -- slices and aggregation ------------------------------------------------------

    @app.get("/api/slice")
    def slice_endpoint(member: str, t: int, field: str,
                       axis: str = "z", index: int = 0, lod: int = 0,
                       channel: int = 0):
        tree = state.octree_for(member, t, field)
        sl = extract_slice(tree, axis, index, lod)
        vr = state.dataset.field_ranges.get(field)
        lo, hi = vr[channel] if vr else (float(sl.min()), float(sl.max()))
        return Response(content=_slice_png(sl[channel], lo, hi),
                        media_type="image/png")

    @app.get("/api/aggregate")
    def aggregate_endpoint(field: str, stat: str = "mean", axis: str = "z",
                           index: int = 0, members: str = "",
                           t0: float | None = None, t1: float | None = None):
        subset = [m for m in members.split(",") if m] or None
        window = None
        if t0 is not None and t1 is not None:
            window = (t0, t1)
        out = state.workspace / f"agg_{field}_{stat}"
        vol = aggregate(state.dataset, field, members=subset,
                        time_window=window, stat=stat, out=out)
        full = vol.read_full()[0]
        data = {"z": full[index], "y": full[:, index], "x": full[:, :, index]}[axis]
        return Response(content=_slice_png(data, float(full.min()),
                                           float(full.max())),
                        media_type="image/png")

    # -- static UI ----------------------------------------------------------------------

    if static_dir and Path(static_dir).is_dir():
        from fastapi.staticfiles import StaticFiles

        app.mount("/", StaticFiles(directory=str(static_dir), html=True),
                  name="ui")
    return app


def serve(root, bind: str = "127.0.0.1:8000", volume_budget: int = 1024**3,
          brick_budget: int = 256 * 1024**2, static_dir=None):
    import uvicorn

    from .errors import BindError

    host, _, port = bind.partition(":")
    app = create_app(root, volume_budget, brick_budget, static_dir=static_dir)
    try:
        uvicorn.run(app, host=host or "127.0.0.1", port=int(port or 8000),
                    log_level="warning")
    except OSError as exc:
        raise BindError(f"cannot bind {bind}: {exc}") from exc
