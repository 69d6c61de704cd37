/** Pure view-model builders: trace document in, render-ready values out.
 *
 * Everything displayed comes straight from the document; the only
 * arithmetic allowed here is percent formatting. Contract tests pin these
 * functions against golden fixtures.
 */

import { NO_SITES_COLOR, expertColor } from "./palette";
import type { Summary, TraceDocument } from "./types";

export function formatPercent(weight: number): string {
  return (weight * 100).toFixed(1) + "%";
}

export function expertLabel(doc: TraceDocument, index: number): string {
  return doc.model.expert_names[index] ?? `e${index}`;
}

export interface TokenCell {
  index: number;
  text: string;
  color: string;
  dominant: number | null;
  tooltip: string;
}

function summaryByToken(doc: TraceDocument): Map<number, Summary> {
  const map = new Map<number, Summary>();
  for (const s of doc.summaries) map.set(s.token, s);
  return map;
}

/** High-level strip: one colored cell per token, tooltip = full aggregate. */
export function buildTokenStrip(doc: TraceDocument): TokenCell[] {
  const summaries = summaryByToken(doc);
  return doc.tokens.map((tok) => {
    const summary = summaries.get(tok.index);
    if (!summary || summary.site_count === 0 || summary.dominant === null) {
      return {
        index: tok.index,
        text: tok.text,
        color: NO_SITES_COLOR,
        dominant: null,
        tooltip: "no routed sites under this filter",
      };
    }
    const tooltip = summary.weights
      .map((w, e) => `${expertLabel(doc, e)} ${formatPercent(w)}`)
      .join(" / ");
    return {
      index: tok.index,
      text: tok.text,
      color: expertColor(summary.dominant),
      dominant: summary.dominant,
      tooltip,
    };
  });
}

export interface WeightsRow {
  index: number;
  token: string;
  dominant: number | null;
  cells: string[];
  siteCount: number;
}

export interface WeightsTable {
  header: string[];
  rows: WeightsRow[];
}

/** Per-token average expert weights over the selected layers, as percents. */
export function buildWeightsTable(doc: TraceDocument): WeightsTable {
  const names = Array.from({ length: doc.model.num_experts }, (_, e) =>
    expertLabel(doc, e),
  );
  const summaries = summaryByToken(doc);
  const rows = doc.tokens.map((tok) => {
    const summary = summaries.get(tok.index);
    if (!summary || summary.site_count === 0) {
      return {
        index: tok.index,
        token: tok.text,
        dominant: null,
        cells: names.map(() => "-"),
        siteCount: 0,
      };
    }
    return {
      index: tok.index,
      token: tok.text,
      dominant: summary.dominant,
      cells: summary.weights.map(formatPercent),
      siteCount: summary.site_count,
    };
  });
  return { header: ["token", ...names], rows };
}

export interface UtilizationEntry {
  index: number;
  label: string;
  color: string;
  top1: string;
  meanWeight: string;
}

export interface UtilizationView {
  entries: UtilizationEntry[];
  collapsed: boolean;
  collapseMessage: string | null;
}

/** Sidebar: per-expert usage plus the engine's collapse verdict. */
export function buildUtilization(doc: TraceDocument): UtilizationView {
  const util = doc.utilization;
  const entries = util.top1_fraction.map((f, e) => ({
    index: e,
    label: expertLabel(doc, e),
    color: expertColor(e),
    top1: formatPercent(f),
    meanWeight: formatPercent(util.mean_weight[e] ?? 0),
  }));
  const collapse = util.collapse;
  let collapseMessage: string | null = null;
  if (collapse.collapsed && collapse.expert !== null) {
    collapseMessage =
      `routing collapse: ${expertLabel(doc, collapse.expert)} takes ` +
      `${formatPercent(collapse.max_top1_fraction)} of top-1 picks ` +
      `(threshold ${formatPercent(collapse.threshold)})`;
  }
  return { entries, collapsed: collapse.collapsed, collapseMessage };
}
