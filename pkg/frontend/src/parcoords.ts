/** Parallel coordinates: density-blended polylines, axis brushing with live
 * selection feedback, pairwise axis swapping, and the intersection-mask job. */

import type { Intervals, ParcoordsSummary, SelectionResult } from "./api.js";
import { clear, el, svgEl } from "./dom.js";

export interface ParcoordsCallbacks {
  onBrush(intervals: Intervals): void;
  onMask(intervals: Intervals): void;
  onOrderChange?(order: number[]): void;
}

const PLOT_W = 560;
const PLOT_H = 260;
const TOP = 24;
const BOTTOM = 16;

export class ParcoordsView {
  private svg: SVGElement;
  private canvas: HTMLCanvasElement;
  private info: HTMLElement;
  private maskButton: HTMLButtonElement;
  private summary: ParcoordsSummary | null = null;
  private values: Float32Array | null = null;
  order: number[] = [];
  brushes: Intervals = {};
  private swapArmed: number | null = null;
  private drag: { axis: number; y0: number; y1: number } | null = null;

  constructor(
    private container: HTMLElement,
    private callbacks: ParcoordsCallbacks,
  ) {
    this.canvas = el("canvas", {
      width: String(PLOT_W),
      height: String(PLOT_H),
      class: "parcoords-lines",
    });
    this.svg = svgEl("svg", {
      class: "parcoords-axes",
      width: String(PLOT_W),
      height: String(PLOT_H),
      viewBox: `0 0 ${PLOT_W} ${PLOT_H}`,
    });
    this.svg.addEventListener("pointerdown", (ev) => this.pointerDown(ev as PointerEvent));
    this.svg.addEventListener("pointermove", (ev) => this.pointerMove(ev as PointerEvent));
    this.svg.addEventListener("pointerup", (ev) => this.pointerUp(ev as PointerEvent));
    this.info = el("div", { class: "selection-info" }, "no selection");
    this.maskButton = el("button", { class: "mask-button" }, "compute intersection mask");
    this.maskButton.addEventListener("click", () =>
      this.callbacks.onMask({ ...this.brushes }),
    );
    const wrap = el("div", { class: "parcoords-stack" });
    wrap.append(this.canvas, this.svg);
    container.append(wrap, this.info, this.maskButton);
  }

  setData(summary: ParcoordsSummary, values: Float32Array, order?: number[]): void {
    this.summary = summary;
    this.values = values;
    this.order = order && order.length === summary.axes.length
      ? [...order]
      : summary.axes.map((_, i) => i);
    this.renderLines();
    this.renderAxes();
  }

  private axisX(position: number): number {
    const n = this.order.length;
    return 30 + (position * (PLOT_W - 60)) / Math.max(n - 1, 1);
  }

  private valueY(axis: number, v: number): number {
    const [lo, hi] = this.summary!.axis_ranges[axis]!;
    const t = (v - lo) / (hi - lo || 1);
    return PLOT_H - BOTTOM - t * (PLOT_H - TOP - BOTTOM);
  }

  private yToValue(axis: number, y: number): number {
    const [lo, hi] = this.summary!.axis_ranges[axis]!;
    const t = (PLOT_H - BOTTOM - y) / (PLOT_H - TOP - BOTTOM);
    return lo + Math.min(1, Math.max(0, t)) * (hi - lo);
  }

  /** Value of one line on one axis; lines are (run, time, sample) tuples. */
  lineValue(line: number, axis: number): number {
    const s = this.summary!;
    const perRun = s.t_samples * s.n_spatial;
    const run = Math.floor(line / perRun);
    const rest = line % perRun;
    const idx = ((run * s.axes.length + axis) * s.t_samples) * s.n_spatial
      + rest;
    return this.values![idx]!;
  }

  private renderLines(): void {
    const ctx = this.canvas.getContext("2d");
    if (!ctx || !this.summary) return; // headless test environments have no 2d context
    ctx.clearRect(0, 0, PLOT_W, PLOT_H);
    const lines = this.summary.line_count;
    // density-based blending: alpha shrinks as the estimated per-pixel line
    // count grows
    const perPixel = lines / Math.max(PLOT_H - TOP - BOTTOM, 1);
    const alpha = Math.min(1, 20 / Math.max(perPixel, 1));
    ctx.strokeStyle = `rgba(70, 90, 140, ${alpha.toFixed(3)})`;
    ctx.lineWidth = 1;
    const step = Math.max(1, Math.floor(lines / 5000)); // cap draw cost
    for (let line = 0; line < lines; line += step) {
      ctx.beginPath();
      this.order.forEach((axis, pos) => {
        const x = this.axisX(pos);
        const y = this.valueY(axis, this.lineValue(line, axis));
        if (pos === 0) ctx.moveTo(x, y);
        else ctx.lineTo(x, y);
      });
      ctx.stroke();
    }
  }

  private renderAxes(): void {
    clear(this.svg);
    if (!this.summary) return;
    this.order.forEach((axis, pos) => {
      const x = this.axisX(pos);
      this.svg.appendChild(
        svgEl("line", {
          x1: String(x), y1: String(TOP), x2: String(x), y2: String(PLOT_H - BOTTOM),
          stroke: "#444", "stroke-width": "1", "data-axis": String(axis),
        }),
      );
      const label = svgEl("text", {
        x: String(x), y: String(TOP - 8), "text-anchor": "middle",
        class: "axis-label", "data-axis": String(axis),
      });
      label.textContent = this.summary!.axes[axis]!;
      label.addEventListener("click", () => this.labelClicked(pos));
      this.svg.appendChild(label);
      const brush = this.brushes[String(axis)];
      if (brush) {
        const y0 = this.valueY(axis, brush[1]);
        const y1 = this.valueY(axis, brush[0]);
        this.svg.appendChild(
          svgEl("rect", {
            x: String(x - 6), y: String(Math.min(y0, y1)),
            width: "12", height: String(Math.abs(y1 - y0)),
            fill: "rgba(214,39,40,0.25)", stroke: "#d62728",
            "data-brush-axis": String(axis), class: "brush-rect",
          }),
        );
      }
    });
  }

  /** Click one axis label, then another: the two axes swap (pairwise swap). */
  private labelClicked(position: number): void {
    if (this.swapArmed === null) {
      this.swapArmed = position;
      return;
    }
    const a = this.swapArmed;
    this.swapArmed = null;
    if (a !== position) this.swapAxes(a, position);
  }

  swapAxes(positionA: number, positionB: number): void {
    const tmp = this.order[positionA]!;
    this.order[positionA] = this.order[positionB]!;
    this.order[positionB] = tmp;
    this.renderLines();
    this.renderAxes();
    this.callbacks.onOrderChange?.([...this.order]);
  }

  private axisAt(x: number): number | null {
    for (let pos = 0; pos < this.order.length; pos++) {
      if (Math.abs(this.axisX(pos) - x) <= 10) return pos;
    }
    return null;
  }

  private localPoint(ev: PointerEvent): [number, number] {
    const rect = (this.svg as unknown as { getBoundingClientRect(): DOMRect })
      .getBoundingClientRect();
    return [ev.clientX - rect.left, ev.clientY - rect.top];
  }

  private pointerDown(ev: PointerEvent): void {
    const [x, y] = this.localPoint(ev);
    const pos = this.axisAt(x);
    if (pos === null || y < TOP) return;
    this.drag = { axis: this.order[pos]!, y0: y, y1: y };
  }

  private pointerMove(ev: PointerEvent): void {
    if (!this.drag) return;
    this.drag.y1 = this.localPoint(ev)[1];
  }

  private pointerUp(ev: PointerEvent): void {
    if (!this.drag) return;
    const { axis, y0 } = this.drag;
    const y1 = this.localPoint(ev)[1];
    this.drag = null;
    const vlo = Math.min(this.yToValue(axis, y0), this.yToValue(axis, y1));
    const vhi = Math.max(this.yToValue(axis, y0), this.yToValue(axis, y1));
    if (Math.abs(y1 - y0) < 2) {
      delete this.brushes[String(axis)]; // click clears the brush
    } else {
      this.brushes[String(axis)] = [vlo, vhi];
    }
    this.renderAxes();
    this.callbacks.onBrush({ ...this.brushes });
  }

  setBrush(axis: number, lo: number, hi: number): void {
    this.brushes[String(axis)] = [lo, hi];
    this.renderAxes();
    this.callbacks.onBrush({ ...this.brushes });
  }

  showSelection(result: SelectionResult): void {
    const per = Object.entries(result.per_axis_fraction)
      .map(([axis, f]) => `${this.summary?.axes[Number(axis)] ?? axis}: ${(f * 100).toFixed(1)}%`)
      .join(", ");
    this.info.textContent =
      `selected ${result.count} lines (${(result.fraction * 100).toFixed(1)}%)`
      + (per ? ` | per axis: ${per}` : "");
    this.info.setAttribute("data-fraction", String(result.fraction));
    this.info.setAttribute("data-count", String(result.count));
  }
}
