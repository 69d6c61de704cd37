import { describe, expect, it } from "vitest";

import { DEFAULT_STATE, FilterState, decodeFilters, encodeFilters } from "../src/url";

describe("filter state <-> query string", () => {
  const cases: FilterState[] = [
    DEFAULT_STATE,
    { prompt: "hello world", maxNew: 0, blocks: null, projections: null },
    { prompt: "hi", maxNew: 8, blocks: [0, 2], projections: ["gate", "down"] },
    { prompt: "a&b=c #x", maxNew: 1, blocks: [1], projections: ["block"] },
  ];

  it.each(cases.map((c, i) => [i, c] as const))("case %d round-trips", (_, state) => {
    expect(decodeFilters(encodeFilters(state))).toEqual(state);
  });

  it("ignores junk values instead of crashing", () => {
    const state = decodeFilters("blocks=a,b&max_new=-3&projections=");
    expect(state.blocks).toBeNull();
    expect(state.maxNew).toBe(0);
    expect(state.projections).toBeNull();
  });

  it("keeps empty state out of the query string", () => {
    expect(encodeFilters(DEFAULT_STATE)).toBe("");
  });
});
