import { beforeEach, describe, expect, it, vi } from "vitest";

import { HIT_RADIUS_PX, SimilarityView } from "../src/similarity.js";
import type { Selection } from "../src/state.js";
import { FixtureServer } from "./fixture.js";

function makeView() {
  const container = document.createElement("div");
  document.body.appendChild(container);
  const selected: Array<["A" | "B", Selection]> = [];
  const reembeds: string[][] = [];
  const view = new SimilarityView(container, {
    onSelect: (slot, sel) => selected.push([slot, sel]),
    onReembed: (members) => reembeds.push(members),
  });
  view.setEmbedding(new FixtureServer().embeddingDoc());
  return { container, view, selected, reembeds };
}

beforeEach(() => {
  document.body.innerHTML = "";
});

describe("similarity view", () => {
  it("hit-tests within the 8px radius only", () => {
    const { container, view } = makeView();
    const dot = container.querySelector("circle[data-member]")!;
    const cx = Number(dot.getAttribute("cx"));
    const cy = Number(dot.getAttribute("cy"));
    expect(view.nearestPoint(cx + HIT_RADIUS_PX - 1, cy)).not.toBeNull();
    expect(view.nearestPoint(cx + HIT_RADIUS_PX + 4, cy + HIT_RADIUS_PX + 4)).toBeNull();
  });

  it("returns the nearest of several candidates", () => {
    const { container, view } = makeView();
    const dots = [...container.querySelectorAll("circle[data-member]")];
    const target = dots[2]!;
    const hit = view.nearestPoint(
      Number(target.getAttribute("cx")) + 1,
      Number(target.getAttribute("cy")) - 1,
    );
    expect(hit).toEqual({
      member: target.getAttribute("data-member"),
      step: Number(target.getAttribute("data-step")),
    });
  });

  it("fills selection A then B on consecutive clicks", () => {
    const { container, selected } = makeView();
    const dots = [...container.querySelectorAll("circle[data-member]")];
    for (const dot of [dots[0]!, dots[4]!]) {
      dot.parentElement?.dispatchEvent(
        new MouseEvent("click", {
          clientX: Number(dot.getAttribute("cx")),
          clientY: Number(dot.getAttribute("cy")),
          bubbles: true,
        }),
      );
    }
    expect(selected.map(([slot]) => slot)).toEqual(["A", "B"]);
    expect(selected[0]![1].member).toBe(dots[0]!.getAttribute("data-member"));
  });

  it("switches axes mode without any API round trip", () => {
    const { container, view } = makeView();
    const fetchSpy = vi.fn();
    globalThis.fetch = fetchSpy as unknown as typeof fetch;
    view.setMode("c1t");
    expect(fetchSpy).not.toHaveBeenCalled();
    expect(container.querySelectorAll("circle[data-member]").length).toBe(6);
  });

  it("blocks re-embed with no members and shows a validation message", () => {
    const { container, view, reembeds } = makeView();
    for (const box of container.querySelectorAll("input")) {
      (box as HTMLInputElement).checked = false;
    }
    view.requestReembed();
    expect(reembeds.length).toBe(0);
    expect(container.querySelector(".validation-message")!.textContent).toContain(
      "at least one member",
    );
    // selecting a member clears the path
    (container.querySelector("input") as HTMLInputElement).checked = true;
    view.requestReembed();
    expect(reembeds).toEqual([["runA"]]);
  });

  it("renders the eigenvalue spectrum as bars", () => {
    const { container } = makeView();
    const bars = container.querySelectorAll(".spectrum rect");
    expect(bars.length).toBe(6);
    expect(Number(bars[0]!.getAttribute("data-eigenvalue"))).toBe(5);
  });
});
