/** DOM wiring: prompt panel, filters, token strip, weights table, sidebar.
 *
 * All statistics arrive precomputed in the trace document; this file only
 * moves view-model values into elements.
 */

import { ApiError, TraceClient } from "./api";
import type { TraceDocument } from "./types";
import { DEFAULT_STATE, FilterState, decodeFilters, encodeFilters } from "./url";
import {
  buildTokenStrip,
  buildUtilization,
  buildWeightsTable,
} from "./viewmodel";

const client = new TraceClient();

function el<T extends HTMLElement>(id: string): T {
  const node = document.getElementById(id);
  if (!node) throw new Error(`missing #${id}`);
  return node as T;
}

function readForm(): FilterState {
  const prompt = el<HTMLInputElement>("prompt").value;
  const maxNew = Number(el<HTMLInputElement>("max-new").value) || 0;
  const blocksRaw = el<HTMLInputElement>("blocks").value.trim();
  let blocks: number[] | null = null;
  if (blocksRaw !== "") {
    const parsed = blocksRaw.split(",").map((p) => Number(p.trim()));
    if (parsed.every((n) => Number.isInteger(n) && n >= 0)) blocks = parsed;
  }
  const projections: string[] = [];
  for (const proj of ["gate", "up", "down", "block"]) {
    if (el<HTMLInputElement>(`proj-${proj}`).checked) projections.push(proj);
  }
  return {
    prompt,
    maxNew,
    blocks,
    projections: projections.length > 0 ? projections : null,
  };
}

function writeForm(state: FilterState): void {
  el<HTMLInputElement>("prompt").value = state.prompt;
  el<HTMLInputElement>("max-new").value = state.maxNew > 0 ? String(state.maxNew) : "";
  el<HTMLInputElement>("blocks").value = state.blocks?.join(",") ?? "";
  for (const proj of ["gate", "up", "down", "block"]) {
    el<HTMLInputElement>(`proj-${proj}`).checked =
      state.projections?.includes(proj) ?? false;
  }
}

function setBanner(message: string | null): void {
  const banner = el<HTMLDivElement>("banner");
  banner.textContent = message ?? "";
  banner.style.display = message ? "block" : "none";
}

function setBusy(busy: boolean): void {
  el<HTMLDivElement>("spinner").style.display = busy ? "inline-block" : "none";
  el<HTMLButtonElement>("submit").disabled = busy;
}

function renderStrip(doc: TraceDocument): void {
  const strip = el<HTMLDivElement>("token-strip");
  strip.replaceChildren();
  const cells = buildTokenStrip(doc);
  if (cells.length === 0) {
    strip.textContent = "no tokens traced yet";
    return;
  }
  for (const cell of cells) {
    const span = document.createElement("span");
    span.className = "token";
    span.style.backgroundColor = cell.color;
    span.textContent = cell.text;
    span.title = cell.tooltip;
    span.dataset.dominant = cell.dominant === null ? "" : String(cell.dominant);
    strip.appendChild(span);
  }
}

function renderTable(doc: TraceDocument): void {
  const table = el<HTMLTableElement>("weights-table");
  table.replaceChildren();
  const model = buildWeightsTable(doc);
  const thead = table.createTHead().insertRow();
  for (const name of model.header) {
    const th = document.createElement("th");
    th.textContent = name;
    thead.appendChild(th);
  }
  const body = table.createTBody();
  for (const row of model.rows) {
    const tr = body.insertRow();
    const tokenCell = tr.insertCell();
    tokenCell.textContent = row.token;
    tokenCell.className = "token-name";
    row.cells.forEach((value, e) => {
      const td = tr.insertCell();
      td.textContent = value;
      if (row.dominant === e) td.className = "dominant";
    });
  }
}

function renderSidebar(doc: TraceDocument): void {
  const view = buildUtilization(doc);
  const list = el<HTMLUListElement>("utilization");
  list.replaceChildren();
  for (const entry of view.entries) {
    const li = document.createElement("li");
    const swatch = document.createElement("span");
    swatch.className = "swatch";
    swatch.style.backgroundColor = entry.color;
    li.appendChild(swatch);
    li.appendChild(
      document.createTextNode(
        ` ${entry.label}: top-1 ${entry.top1}, mean weight ${entry.meanWeight}`,
      ),
    );
    list.appendChild(li);
  }
  const badge = el<HTMLDivElement>("collapse-badge");
  if (view.collapsed && view.collapseMessage) {
    badge.textContent = view.collapseMessage;
    badge.style.display = "block";
  } else {
    badge.textContent = "";
    badge.style.display = "none";
  }
}

function render(doc: TraceDocument): void {
  renderStrip(doc);
  renderTable(doc);
  renderSidebar(doc);
  el<HTMLDivElement>("results").style.display = "block";
}

async function submit(): Promise<void> {
  const state = readForm();
  if (!state.prompt) {
    setBanner("enter a prompt first");
    return;
  }
  history.replaceState(null, "", `?${encodeFilters(state)}`);
  setBanner(null);
  setBusy(true);
  try {
    const doc = await client.requestTrace(state);
    render(doc);
  } catch (err) {
    if (err instanceof DOMException && err.name === "AbortError") return;
    if (err instanceof ApiError) {
      setBanner(`engine says (${err.status}): ${err.message}`);
    } else {
      setBanner(`request failed: ${String(err)}`);
    }
  } finally {
    setBusy(false);
  }
}

function init(): void {
  const state = location.search
    ? decodeFilters(location.search.slice(1))
    : DEFAULT_STATE;
  writeForm(state);
  el<HTMLFormElement>("prompt-form").addEventListener("submit", (ev) => {
    ev.preventDefault();
    void submit();
  });
  client
    .getModel()
    .then((manifest) => {
      const kind = String(manifest.model_kind ?? "?");
      el<HTMLSpanElement>("model-info").textContent = `serving a ${kind} checkpoint`;
    })
    .catch(() => {
      el<HTMLSpanElement>("model-info").textContent = "engine unreachable";
    });
  if (state.prompt) void submit();
}

document.addEventListener("DOMContentLoaded", init);
