/** In-memory fixture implementing the documented /api surface for tests. */

import type { EmbeddingDoc, JobDoc, ParcoordsSummary } from "../src/api.js";

export interface FixtureOptions {
  jobTicks?: number; // polls needed before a job reports done
}

export class FixtureServer {
  log: string[] = [];
  extracted = false;
  matrixReady = false;
  jobs = new Map<string, { doc: JobDoc; ticks: number }>();
  lastData: Float32Array | null = null;
  private jobSeq = 0;
  private ticksNeeded: number;

  readonly members = ["runA", "runB"];
  readonly stepsPerMember = 3;
  readonly summary: ParcoordsSummary = {
    runs: this.members,
    axes: ["press"],
    axis_ranges: [[0, 10]],
    n_spatial: 4,
    t_samples: 2,
    seed: 0,
    axis_times: [0, 2],
    line_count: 2 * 2 * 4,
  };
  // values[run][axis=0][t][sample]; line value = position in [0, 10]
  readonly values = new Float32Array(
    Array.from({ length: 16 }, (_, i) => (i % 8) + 1),
  );

  constructor(opts: FixtureOptions = {}) {
    this.ticksNeeded = opts.jobTicks ?? 2;
  }

  embeddingDoc(members = this.members): EmbeddingDoc {
    const index: [string, number][] = [];
    const points: number[][] = [];
    const curves = members.map((m, mi) => {
      const pts: number[][] = [];
      const steps: number[] = [];
      const t_norm: number[] = [];
      for (let s = 0; s < this.stepsPerMember; s++) {
        const p = [mi * 10 + s, mi * 5 - s, 0.1 * s];
        index.push([m, s]);
        points.push(p);
        pts.push(p);
        steps.push(s);
        t_norm.push(s / (this.stepsPerMember - 1));
      }
      return { member: m, points: pts, steps, t_norm };
    });
    return { points, index, spectrum: [5, 2, 0.5, 0.1, 0, 0], curves };
  }

  private lineValue(line: number): number {
    return this.values[line]!;
  }

  private selectionResult(intervals: Record<string, [number, number]>,
                          tfAxes: Record<string, { window: [number, number] }>) {
    const lines = this.summary.line_count;
    let selected = 0;
    const perAxis: Record<string, number> = {};
    for (let l = 0; l < lines; l++) {
      const v = this.lineValue(l);
      let ok = true;
      for (const [, [lo, hi]] of Object.entries(intervals)) {
        if (v < lo || v > hi) ok = false;
      }
      if (ok) selected++;
    }
    for (const [axis, [lo, hi]] of Object.entries(intervals)) {
      let n = 0;
      for (let l = 0; l < lines; l++) {
        const v = this.lineValue(l);
        if (v >= lo && v <= hi) n++;
      }
      perAxis[axis] = n / lines;
    }
    const clamped: Record<string, unknown> = {};
    for (const [axis, tf] of Object.entries(tfAxes ?? {})) {
      const brush = intervals[axis];
      if (!brush) {
        clamped[axis] = tf;
        continue;
      }
      const [rlo, rhi] = this.summary.axis_ranges[Number(axis)]!;
      const span = rhi - rlo || 1;
      const nlo = (brush[0] - rlo) / span;
      const nhi = (brush[1] - rlo) / span;
      const lo = Math.max(tf.window[0], nlo);
      const hi = Math.min(tf.window[1], nhi);
      clamped[axis] = { ...tf, window: [lo, hi], transparent: lo >= hi };
    }
    return {
      count: selected,
      fraction: selected / lines,
      per_axis_fraction: perAxis,
      clamped_tf: clamped,
    };
  }

  private startJob(kind: string): JobDoc {
    const id = `job${this.jobSeq++}`;
    const doc: JobDoc = {
      id, kind, state: "queued", progress: 0, message: "", result: null,
    };
    this.jobs.set(id, { doc, ticks: 0 });
    return doc;
  }

  private pollJob(id: string): JobDoc {
    const entry = this.jobs.get(id);
    if (!entry) throw new Error(`no job ${id}`);
    const doc = entry.doc;
    if (doc.state === "done" || doc.state === "failed" || doc.state === "cancelled") {
      return doc; // terminal states are never overwritten
    }
    entry.ticks++;
    if (entry.ticks >= this.ticksNeeded) {
      doc.state = "done";
      doc.progress = 1;
      if (doc.kind === "extract") this.extracted = true;
      if (doc.kind === "matrix") this.matrixReady = true;
      if (doc.kind === "mask") doc.result = { mask_id: "runA_0" };
    } else {
      doc.state = "running";
      doc.progress = entry.ticks / this.ticksNeeded;
    }
    return doc;
  }

  readonly fetchFn: typeof fetch = async (input, init) => {
    const url = typeof input === "string" ? input : (input as Request).url;
    const u = new URL(url, "http://fixture");
    const path = u.pathname;
    this.log.push(`${init?.method ?? "GET"} ${path}${u.search}`);
    const json = (doc: unknown, status = 200) =>
      new Response(JSON.stringify(doc), {
        status,
        headers: { "content-type": "application/json" },
      });

    if (path === "/api/ensemble") {
      return json({
        root: "/fixture",
        members: this.members.map((name) => ({
          name,
          steps: this.stepsPerMember,
          timestamps: [0, 1, 2],
        })),
        common_fields: ["press"],
        fields: ["press"],
        field_channels: { press: 1 },
        field_ranges: { press: [[0, 10]] },
        common_time_range: [0, 2],
        union_time_range: [0, 2],
      });
    }
    if (path === "/api/embedding") {
      if (!this.extracted) {
        return json({ detail: { message: "features not extracted",
                                hint: "POST /api/jobs/extract" } }, 409);
      }
      if (!this.matrixReady) {
        return json({ detail: { message: "distance matrix not computed",
                                hint: "POST /api/jobs/matrix" } }, 409);
      }
      return json(this.embeddingDoc());
    }
    if (path === "/api/reembed") {
      const subset = (u.searchParams.get("members") ?? "").split(",");
      return json(this.embeddingDoc(subset));
    }
    if (path.startsWith("/api/jobs/") && init?.method === "POST") {
      const kind = path.split("/").pop()!;
      return json(this.startJob(kind));
    }
    if (path.startsWith("/api/jobs/")) {
      return json(this.pollJob(path.split("/").pop()!));
    }
    if (path === "/api/parcoords") {
      const hist = u.searchParams.get("time_histogram");
      if (hist) {
        this.lastData = new Float32Array(2 * 3 * 1 * 4).fill(1);
        return json({
          runs: this.members,
          axes: [0, 1, 2].map((t) => `${hist}@t=${t}`),
          axis_ranges: [[0, 10], [0, 10], [0, 10]],
          n_spatial: 4,
          t_samples: 1,
          seed: 0,
          axis_times: [0, 1, 2],
          line_count: 2 * 1 * 4,
        });
      }
      this.lastData = this.values;
      return json(this.summary);
    }
    if (path === "/api/parcoords/data") {
      return new Response((this.lastData ?? this.values).buffer.slice(0), {
        status: 200,
        headers: { "content-type": "application/octet-stream" },
      });
    }
    if (path === "/api/selection") {
      const body = JSON.parse(String(init?.body ?? "{}"));
      return json(this.selectionResult(body.intervals ?? {}, body.tf_axes ?? {}));
    }
    if (path.startsWith("/api/masks/")) {
      return new Response(new Uint8Array([137, 80, 78, 71]), {
        status: 200,
        headers: { "content-type": "image/png" },
      });
    }
    return json({ detail: { message: `no route ${path}` } }, 404);
  };
}
