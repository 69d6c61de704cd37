/** Shapes of the trace document served by POST /api/trace.
 *
 * This file mirrors docs/trace.schema.json in the engine repo; the UI never
 * computes statistics of its own, it renders these fields verbatim.
 */

export interface FilterEcho {
  blocks: number[] | null;
  projections: string[] | null;
}

export interface ModelInfo {
  mode: "traditional" | "btx" | "dense";
  num_experts: number;
  num_experts_per_tok: number;
  routed_blocks: number[];
  projections: string[];
  expert_names: string[];
  filter: FilterEcho;
}

export interface TokenEntry {
  index: number;
  id: number;
  text: string;
}

export interface Decision {
  token: number;
  block: number;
  projection: string;
  selected: number[];
  weights: number[];
  logits: number[];
}

export interface Summary {
  token: number;
  weights: number[];
  dominant: number | null;
  site_count: number;
}

export interface Collapse {
  threshold: number;
  max_top1_fraction: number;
  expert: number | null;
  collapsed: boolean;
}

export interface Utilization {
  top1_fraction: number[];
  mean_weight: number[];
  collapse: Collapse;
}

export interface TraceDocument {
  model: ModelInfo;
  tokens: TokenEntry[];
  decisions: Decision[];
  summaries: Summary[];
  utilization: Utilization;
}

export interface ExpertsInfo {
  expert_names: string[];
  requests: number;
  top1_fraction: number[];
  mean_weight: number[];
}
