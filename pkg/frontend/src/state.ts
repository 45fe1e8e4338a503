/** URL-encoded view state so a reload reconstructs the whole session. */

import type { EmbeddingDoc, Intervals } from "./api.js";

export type AxesMode = "c12" | "c13" | "c1t";
export type ColorMode = "by-member" | "by-time";

export interface Selection {
  member: string;
  step: number;
}

export interface ViewState {
  fields: string[];
  axesMode: AxesMode;
  colorMode: ColorMode;
  selectionA: Selection | null;
  selectionB: Selection | null;
  brushes: Intervals;
  axisOrder: number[];
}

export function defaultState(fields: string[] = []): ViewState {
  return {
    fields,
    axesMode: "c12",
    colorMode: "by-time",
    selectionA: null,
    selectionB: null,
    brushes: {},
    axisOrder: [],
  };
}

function encodeSelection(sel: Selection | null): string {
  return sel ? `${sel.member}:${sel.step}` : "";
}

function decodeSelection(raw: string | null): Selection | null {
  if (!raw) return null;
  const i = raw.lastIndexOf(":");
  if (i <= 0) return null;
  const step = Number(raw.slice(i + 1));
  if (!Number.isFinite(step)) return null;
  return { member: raw.slice(0, i), step };
}

export function encodeState(state: ViewState): string {
  const q = new URLSearchParams();
  if (state.fields.length) q.set("fields", state.fields.join(","));
  q.set("axes", state.axesMode);
  q.set("color", state.colorMode);
  if (state.selectionA) q.set("a", encodeSelection(state.selectionA));
  if (state.selectionB) q.set("b", encodeSelection(state.selectionB));
  const brushes = Object.entries(state.brushes)
    .map(([axis, [lo, hi]]) => `${axis}:${lo}:${hi}`)
    .join(";");
  if (brushes) q.set("brush", brushes);
  if (state.axisOrder.length) q.set("order", state.axisOrder.join(","));
  return q.toString();
}

export function decodeState(query: string): ViewState {
  const q = new URLSearchParams(query);
  const state = defaultState(
    (q.get("fields") ?? "").split(",").filter((f) => f.length > 0),
  );
  const axes = q.get("axes");
  if (axes === "c12" || axes === "c13" || axes === "c1t") state.axesMode = axes;
  const color = q.get("color");
  if (color === "by-member" || color === "by-time") state.colorMode = color;
  state.selectionA = decodeSelection(q.get("a"));
  state.selectionB = decodeSelection(q.get("b"));
  for (const part of (q.get("brush") ?? "").split(";")) {
    if (!part) continue;
    const [axis, lo, hi] = part.split(":");
    const l = Number(lo);
    const h = Number(hi);
    if (axis !== undefined && Number.isFinite(l) && Number.isFinite(h)) {
      state.brushes[axis] = [l, h];
    }
  }
  const order = (q.get("order") ?? "")
    .split(",")
    .filter((v) => v.length > 0)
    .map(Number);
  if (order.every((v) => Number.isInteger(v))) state.axisOrder = order;
  return state;
}

/** Drop selections that do not reference points of the current embedding. */
export function pruneSelections(state: ViewState, embedding: EmbeddingDoc): ViewState {
  const known = new Set(embedding.index.map(([m, s]) => `${m}:${s}`));
  const keep = (sel: Selection | null) =>
    sel && known.has(`${sel.member}:${sel.step}`) ? sel : null;
  return {
    ...state,
    selectionA: keep(state.selectionA),
    selectionB: keep(state.selectionB),
  };
}
