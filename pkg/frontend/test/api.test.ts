import { afterEach, describe, expect, it, vi } from "vitest";

import { ApiError, TraceClient } from "../src/api";
import { DEFAULT_STATE } from "../src/url";

afterEach(() => {
  vi.unstubAllGlobals();
});

function neverResolvingFetch(signals: AbortSignal[]) {
  return vi.fn((_url: string, init?: RequestInit) => {
    const signal = init?.signal as AbortSignal;
    signals.push(signal);
    return new Promise<Response>((_, reject) => {
      signal.addEventListener("abort", () =>
        reject(new DOMException("aborted", "AbortError")),
      );
    });
  });
}

describe("TraceClient", () => {
  it("aborts the previous request when a new one starts (latest wins)", async () => {
    const signals: AbortSignal[] = [];
    vi.stubGlobal("fetch", neverResolvingFetch(signals));
    const client = new TraceClient();
    const first = client.requestTrace({ ...DEFAULT_STATE, prompt: "one" });
    first.catch(() => {});
    client.requestTrace({ ...DEFAULT_STATE, prompt: "two" }).catch(() => {});
    expect(signals.length).toBe(2);
    expect(signals[0].aborted).toBe(true);
    expect(signals[1].aborted).toBe(false);
    await expect(first).rejects.toThrow("aborted");
  });

  it("surfaces the engine's error message with the status code", async () => {
    vi.stubGlobal(
      "fetch",
      vi.fn(async () =>
        new Response(JSON.stringify({ error: "this checkpoint is bts" }), {
          status: 422,
          headers: { "Content-Type": "application/json" },
        }),
      ),
    );
    const client = new TraceClient();
    const err = await client
      .requestTrace({ ...DEFAULT_STATE, prompt: "x" })
      .catch((e: unknown) => e);
    expect(err).toBeInstanceOf(ApiError);
    expect((err as ApiError).status).toBe(422);
    expect((err as ApiError).message).toContain("bts");
  });

  it("sends only the fields the filter state sets", async () => {
    const bodies: unknown[] = [];
    vi.stubGlobal(
      "fetch",
      vi.fn(async (_url: string, init?: RequestInit) => {
        bodies.push(JSON.parse(String(init?.body)));
        return new Response("{}", { status: 200 });
      }),
    );
    const client = new TraceClient();
    await client.requestTrace({ prompt: "p", maxNew: 0, blocks: null, projections: null });
    await client.requestTrace({ prompt: "p", maxNew: 3, blocks: [0], projections: ["gate"] });
    expect(bodies[0]).toEqual({ prompt: "p" });
    expect(bodies[1]).toEqual({ prompt: "p", max_new: 3, blocks: [0], projections: ["gate"] });
  });
});
