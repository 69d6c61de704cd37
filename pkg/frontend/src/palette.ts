/** One stable color per expert index, cycling past ten experts. */

export const PALETTE = [
  "#4e79a7", // blue
  "#f28e2b", // orange
  "#59a14f", // green
  "#e15759", // red
  "#b07aa1", // purple
  "#76b7b2", // teal
  "#edc948", // yellow
  "#ff9da7", // pink
  "#9c755f", // brown
  "#bab0ac", // grey
];

/** Tokens with no routed sites under the active filter. */
export const NO_SITES_COLOR = "#d0d4da";

export function expertColor(index: number): string {
  return PALETTE[index % PALETTE.length];
}
