/** Filter state <-> URL query string, so views are shareable links. */

export interface FilterState {
  prompt: string;
  maxNew: number;
  blocks: number[] | null;
  projections: string[] | null;
}

export const DEFAULT_STATE: FilterState = {
  prompt: "",
  maxNew: 0,
  blocks: null,
  projections: null,
};

export function encodeFilters(state: FilterState): string {
  const params = new URLSearchParams();
  if (state.prompt) params.set("prompt", state.prompt);
  if (state.maxNew > 0) params.set("max_new", String(state.maxNew));
  if (state.blocks !== null) params.set("blocks", state.blocks.join(","));
  if (state.projections !== null) {
    params.set("projections", state.projections.join(","));
  }
  return params.toString();
}

export function decodeFilters(query: string): FilterState {
  const params = new URLSearchParams(query);
  const state: FilterState = { ...DEFAULT_STATE };
  state.prompt = params.get("prompt") ?? "";
  const maxNew = Number(params.get("max_new") ?? "0");
  state.maxNew = Number.isInteger(maxNew) && maxNew > 0 ? maxNew : 0;
  const blocks = params.get("blocks");
  if (blocks !== null) {
    const parsed = blocks
      .split(",")
      .filter((p) => p !== "")
      .map((p) => Number(p));
    state.blocks = parsed.every((n) => Number.isInteger(n) && n >= 0) ? parsed : null;
  }
  const projections = params.get("projections");
  if (projections !== null) {
    const parsed = projections.split(",").filter((p) => p !== "");
    state.projections = parsed.length > 0 ? parsed : null;
  }
  return state;
}
