/** Similarity scatter: member curves over the MDS embedding, dual selection,
 * eigenvalue spectrum bars, and member sub-selection driving a re-embed. */

import type { Curve, EmbeddingDoc } from "./api.js";
import type { AxesMode, ColorMode, Selection } from "./state.js";
import { clear, el, memberColor, svgEl, timeColor } from "./dom.js";

export const HIT_RADIUS_PX = 8;

export interface SimilarityCallbacks {
  onSelect(slot: "A" | "B", selection: Selection): void;
  onReembed(members: string[]): void;
  onModeChange?(mode: AxesMode): void;
}

interface ScreenPoint {
  x: number;
  y: number;
  member: string;
  step: number;
  t: number;
}

export class SimilarityView {
  readonly width = 480;
  readonly height = 360;
  private svg: SVGElement;
  private spectrumSvg: SVGElement;
  private membersBox: HTMLElement;
  private message: HTMLElement;
  private doc: EmbeddingDoc | null = null;
  private mode: AxesMode = "c12";
  private colorMode: ColorMode = "by-time";
  private points: ScreenPoint[] = [];
  private nextSlot: "A" | "B" = "A";
  private marks: Partial<Record<"A" | "B", SVGElement>> = {};

  constructor(
    private container: HTMLElement,
    private callbacks: SimilarityCallbacks,
  ) {
    const head = el("div", { class: "similarity-head" });
    for (const [label, mode] of [
      ["components 1-2", "c12"],
      ["components 1-3", "c13"],
      ["component 1 vs time", "c1t"],
    ] as const) {
      const btn = el("button", { "data-mode": mode }, label);
      btn.addEventListener("click", () => this.setMode(mode));
      head.appendChild(btn);
    }
    this.svg = svgEl("svg", {
      class: "similarity-plot",
      width: String(this.width),
      height: String(this.height),
      viewBox: `0 0 ${this.width} ${this.height}`,
    });
    this.svg.addEventListener("click", (ev) => this.handleClick(ev as MouseEvent));
    this.spectrumSvg = svgEl("svg", { class: "spectrum", width: "480", height: "60" });
    this.membersBox = el("div", { class: "member-select" });
    this.message = el("div", { class: "validation-message" });
    container.append(head, this.svg, this.spectrumSvg, this.membersBox, this.message);
  }

  setEmbedding(doc: EmbeddingDoc, colorMode: ColorMode = this.colorMode): void {
    this.doc = doc;
    this.colorMode = colorMode;
    this.renderPlot();
    this.renderSpectrum();
    this.renderMemberChecks();
  }

  setMode(mode: AxesMode): void {
    // re-plots from the stored embedding; no API round trip
    this.mode = mode;
    if (this.doc) this.renderPlot();
    this.callbacks.onModeChange?.(mode);
  }

  get currentMode(): AxesMode {
    return this.mode;
  }

  /** Project a curve point into plot coordinates for the active axes mode. */
  private project(curve: Curve, i: number): [number, number] {
    const p = curve.points[i]!;
    if (this.mode === "c1t") return [curve.t_norm[i]!, p[0] ?? 0];
    const ycomp = this.mode === "c12" ? 1 : 2;
    return [p[0] ?? 0, p[ycomp] ?? 0];
  }

  private renderPlot(): void {
    clear(this.svg);
    this.points = [];
    if (!this.doc) return;
    const coords: [number, number][] = [];
    for (const curve of this.doc.curves) {
      for (let i = 0; i < curve.points.length; i++) coords.push(this.project(curve, i));
    }
    const xs = coords.map((c) => c[0]);
    const ys = coords.map((c) => c[1]);
    const xmin = Math.min(...xs), xmax = Math.max(...xs);
    const ymin = Math.min(...ys), ymax = Math.max(...ys);
    const pad = 20;
    const sx = (v: number) =>
      pad + ((v - xmin) / (xmax - xmin || 1)) * (this.width - 2 * pad);
    const sy = (v: number) =>
      this.height - pad - ((v - ymin) / (ymax - ymin || 1)) * (this.height - 2 * pad);

    this.doc.curves.forEach((curve, ci) => {
      // per-segment strokes so time can run as a color gradient along the curve
      for (let i = 0; i + 1 < curve.points.length; i++) {
        const [x0, y0] = this.project(curve, i);
        const [x1, y1] = this.project(curve, i + 1);
        const color =
          this.colorMode === "by-member"
            ? memberColor(ci)
            : timeColor((curve.t_norm[i]! + curve.t_norm[i + 1]!) / 2);
        this.svg.appendChild(
          svgEl("line", {
            x1: String(sx(x0)),
            y1: String(sy(y0)),
            x2: String(sx(x1)),
            y2: String(sy(y1)),
            stroke: color,
            "stroke-width": "1.5",
          }),
        );
      }
      for (let i = 0; i < curve.points.length; i++) {
        const [x, y] = this.project(curve, i);
        const px = sx(x);
        const py = sy(y);
        const color =
          this.colorMode === "by-member" ? memberColor(ci) : timeColor(curve.t_norm[i]!);
        const dot = svgEl("circle", {
          cx: String(px),
          cy: String(py),
          r: "2.5",
          fill: color,
          "data-member": curve.member,
          "data-step": String(curve.steps[i]!),
        });
        this.svg.appendChild(dot);
        this.points.push({ x: px, y: py, member: curve.member, step: curve.steps[i]!, t: curve.t_norm[i]! });
      }
    });
    this.marks = {};
  }

  private renderSpectrum(): void {
    clear(this.spectrumSvg);
    if (!this.doc) return;
    const spectrum = this.doc.spectrum;
    const top = Math.max(...spectrum.map((v) => Math.abs(v)), 1e-12);
    const w = 480 / Math.max(spectrum.length, 1);
    spectrum.forEach((v, i) => {
      const h = (Math.max(v, 0) / top) * 52;
      this.spectrumSvg.appendChild(
        svgEl("rect", {
          x: String(i * w + 1),
          y: String(56 - h),
          width: String(Math.max(w - 2, 1)),
          height: String(h),
          fill: i < 3 ? "#4e79a7" : "#bbb",
          "data-eigenvalue": String(v),
        }),
      );
    });
  }

  private renderMemberChecks(): void {
    clear(this.membersBox);
    if (!this.doc) return;
    const members = [...new Set(this.doc.curves.map((c) => c.member))];
    for (const m of members) {
      const label = el("label", {});
      const box = el("input", { type: "checkbox", value: m, checked: "" }) as HTMLInputElement;
      box.checked = true;
      label.append(box, document.createTextNode(m));
      this.membersBox.appendChild(label);
    }
    const btn = el("button", { class: "reembed" }, "re-embed selection");
    btn.addEventListener("click", () => this.requestReembed());
    this.membersBox.appendChild(btn);
  }

  selectedMembers(): string[] {
    return [...this.membersBox.querySelectorAll("input")]
      .filter((b) => (b as HTMLInputElement).checked)
      .map((b) => (b as HTMLInputElement).value);
  }

  requestReembed(): void {
    const members = this.selectedMembers();
    if (members.length === 0) {
      // no request when nothing is selected; surface a validation message
      this.message.textContent = "select at least one member to re-embed";
      return;
    }
    this.message.textContent = "";
    this.callbacks.onReembed(members);
  }

  /** Nearest curve point within the hit radius, in plot pixel coordinates. */
  nearestPoint(px: number, py: number, radius = HIT_RADIUS_PX): Selection | null {
    let best: ScreenPoint | null = null;
    let bestD = radius * radius;
    for (const p of this.points) {
      const d = (p.x - px) ** 2 + (p.y - py) ** 2;
      if (d <= bestD) {
        best = p;
        bestD = d;
      }
    }
    return best ? { member: best.member, step: best.step } : null;
  }

  private handleClick(ev: MouseEvent): void {
    const rect = (this.svg as unknown as { getBoundingClientRect(): DOMRect })
      .getBoundingClientRect();
    const hit = this.nearestPoint(ev.clientX - rect.left, ev.clientY - rect.top);
    if (!hit) return;
    const slot = this.nextSlot;
    this.nextSlot = slot === "A" ? "B" : "A";
    this.markSelection(slot, hit);
    this.callbacks.onSelect(slot, hit);
  }

  markSelection(slot: "A" | "B", sel: Selection): void {
    const p = this.points.find((q) => q.member === sel.member && q.step === sel.step);
    if (!p) return;
    this.marks[slot]?.remove();
    const ring = svgEl("circle", {
      cx: String(p.x),
      cy: String(p.y),
      r: "6",
      fill: "none",
      stroke: slot === "A" ? "#d62728" : "#2ca02c",
      "stroke-width": "2",
      "data-slot": slot,
    });
    this.svg.appendChild(ring);
    this.marks[slot] = ring;
  }
}
