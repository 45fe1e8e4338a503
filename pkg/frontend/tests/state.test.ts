import { describe, expect, it } from "vitest";

import { decodeState, defaultState, encodeState, pruneSelections } from "../src/state.js";
import { FixtureServer } from "./fixture.js";

describe("view state", () => {
  it("round-trips through the URL query", () => {
    const state = defaultState(["press", "vel"]);
    state.axesMode = "c13";
    state.colorMode = "by-member";
    state.selectionA = { member: "runA", step: 2 };
    state.selectionB = { member: "runB", step: 0 };
    state.brushes = { "0": [0.25, 0.75], "2": [-1, 4] };
    state.axisOrder = [2, 0, 1];
    const back = decodeState(encodeState(state));
    expect(back).toEqual(state);
  });

  it("decodes an empty query to defaults", () => {
    const state = decodeState("");
    expect(state.axesMode).toBe("c12");
    expect(state.selectionA).toBeNull();
    expect(state.brushes).toEqual({});
  });

  it("ignores malformed selections and brushes", () => {
    const state = decodeState("a=justtext&brush=0:x:y;1:2:3");
    expect(state.selectionA).toBeNull();
    expect(state.brushes).toEqual({ "1": [2, 3] });
  });

  it("prunes selections not present in the embedding", () => {
    const fixture = new FixtureServer();
    const doc = fixture.embeddingDoc();
    const state = defaultState(["press"]);
    state.selectionA = { member: "runA", step: 1 };
    state.selectionB = { member: "gone", step: 9 };
    const pruned = pruneSelections(state, doc);
    expect(pruned.selectionA).toEqual({ member: "runA", step: 1 });
    expect(pruned.selectionB).toBeNull();
  });

  it("handles member names containing colons", () => {
    const state = defaultState([]);
    state.selectionA = { member: "run:odd", step: 3 };
    const back = decodeState(encodeState(state));
    expect(back.selectionA).toEqual({ member: "run:odd", step: 3 });
  });
});
