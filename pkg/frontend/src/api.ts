/** Typed client for the documented /api endpoints, with job polling. */

export interface MemberInfo {
  name: string;
  steps: number;
  timestamps: number[];
}

export interface EnsembleInfo {
  root: string;
  members: MemberInfo[];
  common_fields: string[];
  fields: string[];
  field_channels: Record<string, number>;
  field_ranges: Record<string, number[][]>;
  common_time_range: [number, number];
  union_time_range: [number, number];
}

export interface Curve {
  member: string;
  points: number[][];
  steps: number[];
  t_norm: number[];
}

export interface EmbeddingDoc {
  points: number[][];
  index: [string, number][];
  spectrum: number[];
  curves: Curve[];
}

export interface TfDoc {
  window: [number, number];
  points: number[][];
  transparent?: boolean;
}

export interface SelectionResult {
  count: number;
  fraction: number;
  per_axis_fraction: Record<string, number>;
  clamped_tf: Record<string, TfDoc>;
}

export interface ParcoordsSummary {
  runs: string[];
  axes: string[];
  axis_ranges: [number, number][];
  n_spatial: number;
  t_samples: number;
  seed: number;
  axis_times: number[];
  line_count: number;
}

export interface JobDoc {
  id: string;
  kind: string;
  state: "queued" | "running" | "done" | "failed" | "cancelled";
  progress: number;
  message: string;
  result: Record<string, unknown> | null;
}

export type Intervals = Record<string, [number, number]>;

export class ApiError extends Error {
  constructor(
    public status: number,
    message: string,
    public hint: string = "",
  ) {
    super(message);
  }
}

async function asError(res: Response): Promise<ApiError> {
  let message = `${res.status}`;
  let hint = "";
  try {
    const doc = await res.json();
    const detail = doc.detail ?? doc;
    message = detail.message ?? detail.error ?? message;
    hint = detail.hint ?? "";
  } catch {
    /* non-JSON error body */
  }
  return new ApiError(res.status, message, hint);
}

export class Api {
  constructor(
    private fetchFn: typeof fetch = (...args) => fetch(...args),
    private base = "",
  ) {}

  private async getJson<T>(path: string): Promise<T> {
    const res = await this.fetchFn(this.base + path);
    if (!res.ok) throw await asError(res);
    return (await res.json()) as T;
  }

  private async postJson<T>(path: string, body: unknown): Promise<T> {
    const res = await this.fetchFn(this.base + path, {
      method: "POST",
      headers: { "content-type": "application/json" },
      body: JSON.stringify(body),
    });
    if (!res.ok) throw await asError(res);
    return (await res.json()) as T;
  }

  ensemble(): Promise<EnsembleInfo> {
    return this.getJson("/api/ensemble");
  }

  embedding(fields: string[], k = 3): Promise<EmbeddingDoc> {
    const q = new URLSearchParams({ fields: fields.join(","), k: String(k) });
    return this.getJson(`/api/embedding?${q}`);
  }

  reembed(members: string[], fields: string[], k = 3): Promise<EmbeddingDoc> {
    const q = new URLSearchParams({
      members: members.join(","),
      fields: fields.join(","),
      k: String(k),
    });
    return this.getJson(`/api/reembed?${q}`);
  }

  parcoords(fields: string[], n: number, t: number, seed: number): Promise<ParcoordsSummary> {
    const q = new URLSearchParams({
      fields: fields.join(","),
      n: String(n),
      t: String(t),
      seed: String(seed),
    });
    return this.getJson(`/api/parcoords?${q}`);
  }

  /** Time-histogram variant: one axis per chronological step of one field. */
  parcoordsTimeHistogram(field: string, n: number, seed: number): Promise<ParcoordsSummary> {
    const q = new URLSearchParams({
      time_histogram: field,
      n: String(n),
      seed: String(seed),
    });
    return this.getJson(`/api/parcoords?${q}`);
  }

  async parcoordsData(): Promise<Float32Array> {
    const res = await this.fetchFn(`${this.base}/api/parcoords/data`);
    if (!res.ok) throw await asError(res);
    return new Float32Array(await res.arrayBuffer());
  }

  selection(intervals: Intervals, tfAxes?: Record<string, TfDoc>): Promise<SelectionResult> {
    const body: Record<string, unknown> = { intervals };
    if (tfAxes) body.tf_axes = tfAxes;
    return this.postJson("/api/selection", body);
  }

  startJob(kind: "extract" | "matrix" | "mask", body: unknown): Promise<JobDoc> {
    return this.postJson(`/api/jobs/${kind}`, body);
  }

  job(id: string): Promise<JobDoc> {
    return this.getJson(`/api/jobs/${id}`);
  }

  /** Poll a job until it reaches a terminal state; rejects on failed/cancelled. */
  async pollJob(
    id: string,
    opts: { intervalMs?: number; onProgress?: (p: number) => void } = {},
  ): Promise<JobDoc> {
    const interval = opts.intervalMs ?? 250;
    for (;;) {
      const doc = await this.job(id);
      opts.onProgress?.(doc.progress);
      if (doc.state === "done") return doc;
      if (doc.state === "failed" || doc.state === "cancelled") {
        throw new ApiError(500, doc.message || `job ${doc.state}`);
      }
      await new Promise((r) => setTimeout(r, interval));
    }
  }

  sliceUrl(member: string, t: number, field: string, axis = "z", index = 0, lod = 0): string {
    const q = new URLSearchParams({
      member,
      t: String(t),
      field,
      axis,
      index: String(index),
      lod: String(lod),
    });
    return `${this.base}/api/slice?${q}`;
  }

  aggregateUrl(field: string, stat: string, axis = "z", index = 0): string {
    const q = new URLSearchParams({ field, stat, axis, index: String(index) });
    return `${this.base}/api/aggregate?${q}`;
  }

  maskSliceUrl(maskId: string, axis = "z", index = 0): string {
    const q = new URLSearchParams({ axis, index: String(index) });
    return `${this.base}/api/masks/${maskId}/slice?${q}`;
  }
}
