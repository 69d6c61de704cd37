/** Engine HTTP client; at most one trace request in flight (latest wins). */

import type { ExpertsInfo, TraceDocument } from "./types";
import type { FilterState } from "./url";

export class ApiError extends Error {
  constructor(
    public status: number,
    message: string,
  ) {
    super(message);
  }
}

async function errorMessage(res: Response): Promise<string> {
  try {
    const body = await res.json();
    if (body && typeof body.error === "string") return body.error;
  } catch {
    // fall through to the status line
  }
  return `request failed with status ${res.status}`;
}

export class TraceClient {
  private inflight: AbortController | null = null;

  constructor(private base: string = "") {}

  /** POST /api/trace; cancels any request still in flight. */
  async requestTrace(state: FilterState): Promise<TraceDocument> {
    this.inflight?.abort();
    const controller = new AbortController();
    this.inflight = controller;
    const body: Record<string, unknown> = { prompt: state.prompt };
    if (state.maxNew > 0) body.max_new = state.maxNew;
    if (state.blocks !== null) body.blocks = state.blocks;
    if (state.projections !== null) body.projections = state.projections;
    const res = await fetch(`${this.base}/api/trace`, {
      method: "POST",
      headers: { "Content-Type": "application/json" },
      body: JSON.stringify(body),
      signal: controller.signal,
    });
    if (!res.ok) throw new ApiError(res.status, await errorMessage(res));
    return (await res.json()) as TraceDocument;
  }

  async getModel(): Promise<Record<string, unknown>> {
    const res = await fetch(`${this.base}/api/model`);
    if (!res.ok) throw new ApiError(res.status, await errorMessage(res));
    return (await res.json()) as Record<string, unknown>;
  }

  async getExperts(): Promise<ExpertsInfo> {
    const res = await fetch(`${this.base}/api/experts`);
    if (!res.ok) throw new ApiError(res.status, await errorMessage(res));
    return (await res.json()) as ExpertsInfo;
  }
}
