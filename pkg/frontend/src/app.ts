/**
 * DOM wiring for the calculator page.
 *
 * Loads a tree document from a file picker or the ?tree= URL parameter,
 * renders one input per feature the tree uses, and recomputes the
 * prescription, per-treatment leaf risks, and decision path on every input
 * change. All computation is client-side; nothing leaves the page.
 */

import { buildFormModel, FormField, FormModel } from "./form.js";
import { Inputs, parseTreeDocument, TreeDocument, TreeFormatError, walk } from "./tree.js";

interface AppState {
  doc: TreeDocument | null;
  model: FormModel | null;
  inputs: Inputs;
}

const state: AppState = { doc: null, model: null, inputs: {} };

function el<K extends keyof HTMLElementTagNameMap>(
  tag: K,
  className?: string,
  text?: string,
): HTMLElementTagNameMap[K] {
  const node = document.createElement(tag);
  if (className) node.className = className;
  if (text !== undefined) node.textContent = text;
  return node;
}

function byId(id: string): HTMLElement {
  const node = document.getElementById(id);
  if (!node) throw new Error(`missing element #${id}`);
  return node;
}

function showError(message: string): void {
  const banner = byId("error-banner");
  banner.textContent = message;
  banner.hidden = false;
  byId("form-panel").hidden = true;
  byId("result-panel").hidden = true;
}

function clearError(): void {
  byId("error-banner").hidden = true;
}

function loadDocument(raw: string): void {
  try {
    state.doc = parseTreeDocument(raw);
  } catch (e) {
    state.doc = null;
    state.model = null;
    showError(e instanceof TreeFormatError ? `Could not load tree: ${e.message}` : String(e));
    return;
  }
  clearError();
  state.model = buildFormModel(state.doc);
  state.inputs = {};
  renderForm();
  renderResult();
}

function fieldInput(field: FormField): HTMLElement {
  const wrap = el("div", "field");
  const label = el("label", "field-label", field.label + (field.unit ? ` (${field.unit})` : ""));
  wrap.appendChild(label);
  if (field.control === "toggle") {
    const select = el("select");
    select.appendChild(new Option("—", ""));
    select.appendChild(new Option("No", "0"));
    select.appendChild(new Option("Yes", "1"));
    select.addEventListener("change", () => {
      state.inputs[field.name] = select.value === "" ? null : Number(select.value);
      renderResult();
    });
    wrap.appendChild(select);
  } else if (field.control === "select") {
    const select = el("select");
    select.appendChild(new Option("—", ""));
    for (const level of field.levels ?? []) {
      select.appendChild(new Option(level, level));
    }
    select.addEventListener("change", () => {
      state.inputs[field.name] = select.value === "" ? null : select.value;
      renderResult();
    });
    wrap.appendChild(select);
  } else {
    const input = el("input");
    input.type = "number";
    input.step = "any";
    if (field.min !== undefined) input.placeholder = `${round3(field.min)} – ${round3(field.max ?? NaN)}`;
    input.addEventListener("input", () => {
      state.inputs[field.name] = input.value === "" ? null : Number(input.value);
      renderResult();
    });
    wrap.appendChild(input);
  }
  return wrap;
}

function round3(v: number): string {
  return Number.isFinite(v) ? String(Math.round(v * 1000) / 1000) : "";
}

function renderForm(): void {
  const panel = byId("form-panel");
  panel.hidden = false;
  panel.replaceChildren();
  const model = state.model!;
  if (model.fields.length === 0) {
    panel.appendChild(
      el("p", "fixed-note", "This tree applies one prescription to every patient; no inputs are needed."),
    );
    return;
  }
  for (const field of model.fields) {
    panel.appendChild(fieldInput(field));
  }
}

function formatRate(rate: number | null): string {
  return rate === null ? "n/a" : `${(100 * rate).toFixed(2)}%`;
}

function renderResult(): void {
  const panel = byId("result-panel");
  if (!state.doc || !state.model) {
    panel.hidden = true;
    return;
  }
  panel.hidden = false;
  panel.replaceChildren();
  const result = walk(state.doc, state.inputs);

  if (!result.resolved) {
    panel.appendChild(
      el("p", "pending", `Enter ${result.awaiting!.replace(/_/g, " ")} to continue.`),
    );
  } else {
    const headline = el("div", "prescription");
    headline.appendChild(el("span", "prescription-label", "Suggested valve: "));
    headline.appendChild(el("strong", "prescription-value", result.prescription!));
    panel.appendChild(headline);

    const risks = el("table", "risks");
    const head = el("tr");
    for (const cell of ["Valve", "Historical rate in group", "Estimated risk"]) {
      head.appendChild(el("th", undefined, cell));
    }
    risks.appendChild(head);
    for (const treatment of state.doc.treatments) {
      const row = el("tr", treatment === result.prescription ? "chosen" : undefined);
      const cell = result.risks?.[treatment];
      row.appendChild(el("td", undefined, treatment));
      row.appendChild(el("td", undefined, cell ? formatRate(cell.historical_rate) : "n/a"));
      row.appendChild(el("td", undefined, cell ? formatRate(cell.mean_estimate) : "n/a"));
      risks.appendChild(row);
    }
    panel.appendChild(risks);
    panel.appendChild(
      el("p", "leaf-note", `Patient group ${result.leafId} (${result.nTrain} training patients).`),
    );
  }

  if (result.path.length > 0) {
    const pathBox = el("div", "path");
    pathBox.appendChild(el("h3", undefined, "Decision path"));
    const list = el("ol");
    for (const step of result.path) {
      list.appendChild(
        el("li", step.wentLeft ? "went-left" : "went-right",
          `${step.condition}: ${step.wentLeft ? "yes" : "no"}`),
      );
    }
    pathBox.appendChild(list);
    panel.appendChild(pathBox);
  }

  for (const warning of result.warnings) {
    panel.appendChild(el("p", "warning", warning));
  }
}

async function loadFromUrlParam(): Promise<void> {
  const params = new URLSearchParams(window.location.search);
  const url = params.get("tree");
  if (!url) return;
  try {
    const response = await fetch(url);
    if (!response.ok) throw new Error(`${response.status} ${response.statusText}`);
    loadDocument(await response.text());
  } catch (e) {
    showError(`Could not fetch tree from ${url}: ${String(e)}`);
  }
}

export function start(): void {
  const picker = byId("tree-file") as HTMLInputElement;
  picker.addEventListener("change", () => {
    const file = picker.files?.[0];
    if (!file) return;
    void file.text().then(loadDocument);
  });
  void loadFromUrlParam();
}

if (typeof document !== "undefined" && document.getElementById("tree-file")) {
  start();
}
