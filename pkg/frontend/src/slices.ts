/** Linked views: two juxtaposed slice panels (A/B), an ensemble-aggregate
 * panel, and a mask overlay layered on the slice images. */

import type { Api } from "./api.js";
import type { Selection } from "./state.js";
import { el } from "./dom.js";

export class LinkedViews {
  private panels: Record<"A" | "B", { img: HTMLImageElement; caption: HTMLElement; overlay: HTMLImageElement }>;
  private aggregateImg: HTMLImageElement;
  private current: Partial<Record<"A" | "B", Selection>> = {};

  constructor(
    container: HTMLElement,
    private api: Api,
    private sliceIndex = 0,
  ) {
    const make = (slot: "A" | "B") => {
      const box = el("div", { class: `linked-view view-${slot}` });
      const caption = el("div", { class: "caption" }, `view ${slot}: nothing selected`);
      const stack = el("div", { class: "image-stack" });
      const img = el("img", { class: "slice", alt: `slice ${slot}` });
      const overlay = el("img", { class: "mask-overlay", alt: `mask ${slot}` });
      overlay.style.display = "none";
      stack.append(img, overlay);
      box.append(caption, stack);
      container.appendChild(box);
      return { img, caption, overlay };
    };
    this.panels = { A: make("A"), B: make("B") };
    const aggBox = el("div", { class: "linked-view view-aggregate" });
    aggBox.appendChild(el("div", { class: "caption" }, "ensemble stddev"));
    this.aggregateImg = el("img", { class: "aggregate", alt: "aggregate" });
    aggBox.appendChild(this.aggregateImg);
    container.appendChild(aggBox);
  }

  showSlice(slot: "A" | "B", sel: Selection, field: string): void {
    const panel = this.panels[slot];
    this.current[slot] = sel;
    panel.img.setAttribute(
      "src",
      this.api.sliceUrl(sel.member, sel.step, field, "z", this.sliceIndex),
    );
    panel.caption.textContent = `view ${slot}: ${sel.member} / step ${sel.step} / ${field}`;
  }

  selection(slot: "A" | "B"): Selection | undefined {
    return this.current[slot];
  }

  showAggregate(field: string, stat = "stddev"): void {
    this.aggregateImg.setAttribute(
      "src",
      this.api.aggregateUrl(field, stat, "z", this.sliceIndex),
    );
  }

  overlayMask(maskId: string): void {
    for (const slot of ["A", "B"] as const) {
      const overlay = this.panels[slot].overlay;
      overlay.setAttribute("src", this.api.maskSliceUrl(maskId, "z", this.sliceIndex));
      overlay.style.display = "";
      overlay.setAttribute("data-mask-id", maskId);
    }
  }

  clearMask(): void {
    for (const slot of ["A", "B"] as const) {
      this.panels[slot].overlay.style.display = "none";
      this.panels[slot].overlay.removeAttribute("data-mask-id");
    }
  }
}
