/** Application controller: wires the similarity scatter, the parallel
 * coordinates, and the linked slice views over the HTTP API, keeping the whole
 * view state reconstructible from the URL. */

import { Api, ApiError } from "./api.js";
import type { EmbeddingDoc, Intervals, ParcoordsSummary, TfDoc } from "./api.js";
import { el } from "./dom.js";
import { ParcoordsView } from "./parcoords.js";
import { SimilarityView } from "./similarity.js";
import { LinkedViews } from "./slices.js";
import {
  ViewState,
  decodeState,
  defaultState,
  encodeState,
  pruneSelections,
} from "./state.js";
import type { Selection } from "./state.js";

export interface AppOptions {
  samples?: number;
  parcoordsSamples?: number;
  timeSamples?: number;
  seed?: number;
  k?: number;
  pollMs?: number;
  onStateChange?(query: string): void;
}

export class App {
  similarity!: SimilarityView;
  parcoords!: ParcoordsView;
  linked!: LinkedViews;
  state: ViewState = defaultState();
  embedding: EmbeddingDoc | null = null;
  parcoordsSummary: ParcoordsSummary | null = null;
  clampedTf: Record<string, TfDoc> = {};
  private toasts: HTMLElement;
  private reembedEpoch = 0;
  private selectionEpoch = 0;

  constructor(
    private root: HTMLElement,
    private api: Api,
    private opts: AppOptions = {},
  ) {
    this.toasts = el("div", { class: "toasts" });
  }

  async boot(initialQuery = ""): Promise<void> {
    const info = await this.api.ensemble();
    this.state = decodeState(initialQuery);
    if (this.state.fields.length === 0) this.state.fields = info.common_fields;

    const simBox = el("div", { class: "panel similarity" });
    const pcBox = el("div", { class: "panel parcoords" });
    const linkedBox = el("div", { class: "panel linked" });
    this.root.append(simBox, pcBox, linkedBox, this.toasts);

    this.similarity = new SimilarityView(simBox, {
      onSelect: (slot, sel) => this.select(slot, sel),
      onReembed: (members) => void this.reembed(members),
      onModeChange: (mode) => {
        this.state.axesMode = mode;
        this.pushState();
      },
    });
    this.linked = new LinkedViews(linkedBox, this.api);
    this.parcoords = new ParcoordsView(pcBox, {
      onBrush: (intervals) => void this.brushChanged(intervals),
      onMask: (intervals) => void this.computeMask(intervals),
      onOrderChange: (order) => {
        this.state.axisOrder = order;
        this.pushState();
      },
    });
    const histBtn = el("button", { class: "time-histogram-toggle" },
      "time histogram");
    let histogram = false;
    histBtn.addEventListener("click", () => {
      histogram = !histogram;
      histBtn.textContent = histogram ? "field axes" : "time histogram";
      const task = histogram
        ? this.loadTimeHistogram(this.state.fields[0]!)
        : this.loadParcoords();
      task.catch((err) => this.toast(`parcoords failed: ${(err as Error).message}`));
    });
    pcBox.appendChild(histBtn);

    await this.loadEmbedding();
    await this.loadParcoords();
    this.restoreFromState();
  }

  private toast(message: string, retry?: () => void): void {
    const box = el("div", { class: "toast" }, message);
    if (retry) {
      const btn = el("button", {}, "retry");
      btn.addEventListener("click", () => {
        box.remove();
        retry();
      });
      box.appendChild(btn);
    }
    this.toasts.appendChild(box);
  }

  private pushState(): void {
    this.opts.onStateChange?.(encodeState(this.state));
  }

  /** GET the embedding, running extract/matrix jobs when the server asks. */
  async loadEmbedding(): Promise<void> {
    const fields = this.state.fields;
    const k = this.opts.k ?? 3;
    for (;;) {
      try {
        this.setEmbedding(await this.api.embedding(fields, k));
        return;
      } catch (err) {
        if (!(err instanceof ApiError) || err.status !== 409) throw err;
        if (err.hint.includes("extract")) {
          const job = await this.api.startJob("extract", {
            fields,
            samples: this.opts.samples ?? 1024,
            seed: this.opts.seed ?? 0,
          });
          await this.api.pollJob(job.id, { intervalMs: this.opts.pollMs ?? 250 });
        } else if (err.hint.includes("matrix")) {
          const job = await this.api.startJob("matrix", { fields });
          await this.api.pollJob(job.id, { intervalMs: this.opts.pollMs ?? 250 });
        } else {
          throw err;
        }
      }
    }
  }

  setEmbedding(doc: EmbeddingDoc): void {
    this.embedding = doc;
    this.state = pruneSelections(this.state, doc);
    this.similarity.setEmbedding(doc, this.state.colorMode);
  }

  async reembed(members: string[]): Promise<void> {
    const epoch = ++this.reembedEpoch;
    try {
      const doc = await this.api.reembed(members, this.state.fields, this.opts.k ?? 3);
      if (epoch === this.reembedEpoch) this.setEmbedding(doc); // drop superseded
    } catch (err) {
      this.toast(`re-embed failed: ${(err as Error).message}`, () => void this.reembed(members));
    }
  }

  select(slot: "A" | "B", sel: Selection): void {
    if (slot === "A") this.state.selectionA = sel;
    else this.state.selectionB = sel;
    const field = this.state.fields[0]!;
    this.linked.showSlice(slot, sel, field);
    this.linked.showAggregate(field, "stddev");
    this.pushState();
  }

  async loadParcoords(): Promise<void> {
    const summary = await this.api.parcoords(
      this.state.fields,
      this.opts.parcoordsSamples ?? 256,
      this.opts.timeSamples ?? 5,
      this.opts.seed ?? 0,
    );
    const values = await this.api.parcoordsData();
    this.parcoordsSummary = summary;
    this.parcoords.setData(summary, values,
      this.state.axisOrder.length === summary.axes.length
        ? this.state.axisOrder
        : undefined);
  }

  /** Switch the parcoords panel to one-axis-per-time-step of a single field. */
  async loadTimeHistogram(field: string): Promise<void> {
    const summary = await this.api.parcoordsTimeHistogram(
      field,
      this.opts.parcoordsSamples ?? 256,
      this.opts.seed ?? 0,
    );
    const values = await this.api.parcoordsData();
    this.parcoordsSummary = summary;
    this.parcoords.setData(summary, values);
  }

  /** Default grayscale transfer functions for up to four brushed axes. */
  private tfAxesFor(intervals: Intervals): Record<string, TfDoc> | undefined {
    const axes = Object.keys(intervals).slice(0, 4);
    if (axes.length === 0) return undefined;
    const tf: Record<string, TfDoc> = {};
    for (const a of axes) {
      tf[a] = {
        window: [0, 1],
        points: [[0, 0, 0, 0, 0], [1, 1, 1, 1, 1]],
      };
    }
    return tf;
  }

  async brushChanged(intervals: Intervals): Promise<void> {
    this.state.brushes = intervals;
    this.pushState();
    const epoch = ++this.selectionEpoch;
    try {
      const res = await this.api.selection(intervals, this.tfAxesFor(intervals));
      if (epoch !== this.selectionEpoch) return; // superseded
      this.parcoords.showSelection(res);
      this.clampedTf = res.clamped_tf;
    } catch (err) {
      this.toast(`selection failed: ${(err as Error).message}`);
    }
  }

  async computeMask(intervals: Intervals): Promise<void> {
    const sel = this.state.selectionA ?? this.state.selectionB;
    if (!sel) {
      this.toast("select a (member, step) point first");
      return;
    }
    try {
      const job = await this.api.startJob("mask", {
        member: sel.member,
        t: sel.step,
        intervals,
      });
      const done = await this.api.pollJob(job.id, {
        intervalMs: this.opts.pollMs ?? 250,
      });
      const maskId = done.result?.mask_id as string | undefined;
      if (maskId) this.linked.overlayMask(maskId);
    } catch (err) {
      this.toast(`mask job failed: ${(err as Error).message}`,
        () => void this.computeMask(intervals));
    }
  }

  private restoreFromState(): void {
    if (this.state.selectionA) {
      this.similarity.markSelection("A", this.state.selectionA);
      this.linked.showSlice("A", this.state.selectionA, this.state.fields[0]!);
    }
    if (this.state.selectionB) {
      this.similarity.markSelection("B", this.state.selectionB);
      this.linked.showSlice("B", this.state.selectionB, this.state.fields[0]!);
    }
    if (this.state.axesMode !== "c12") this.similarity.setMode(this.state.axesMode);
    for (const [axis, [lo, hi]] of Object.entries(this.state.brushes)) {
      this.parcoords.setBrush(Number(axis), lo, hi);
    }
  }
}

export async function boot(): Promise<App> {
  const root = document.getElementById("app") ?? document.body;
  const app = new App(root, new Api(), {
    onStateChange: (query) => {
      history.replaceState(null, "", `${location.pathname}?${query}`);
    },
  });
  await app.boot(location.search.replace(/^\?/, ""));
  return app;
}

if (typeof document !== "undefined" && document.getElementById("app")) {
  boot().catch((err) => console.error("boot failed", err));
}
