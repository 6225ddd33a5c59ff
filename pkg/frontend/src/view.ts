// DOM rendering.  Rebuilt from the view model on every poll; event wiring
// goes through the handler bundle so the controller owns all behaviour.

import type { TreeApi } from "./api.js";
import type { PlacedNode, TreeViewModel } from "./model.js";
import { AGE_MAX, AGE_MIN } from "./model.js";

export interface Handlers {
  onSelect(nodeId: string): void;
  onBranchSubmit(): void;
  onDelete(nodeId: string): void;
  onRetry(): void;
}

const SVG_NS = "http://www.w3.org/2000/svg";

export function scaffold(root: HTMLElement): void {
  root.innerHTML = `
    <div class="banner hidden" id="banner">
      <span id="banner-text"></span>
      <button id="banner-retry" type="button">retry</button>
    </div>
    <header>
      <h1>aging tree</h1>
      <span id="subject"></span>
    </header>
    <main>
      <div id="canvas" class="canvas"></div>
      <aside class="panel">
        <h2>grow a branch</h2>
        <p id="parent-label">parent: <code id="branch-parent">—</code></p>
        <label>condition
          <select id="condition"></select>
        </label>
        <label>target age (${AGE_MIN}-${AGE_MAX})
          <input id="age" type="number" min="${AGE_MIN}" max="${AGE_MAX}" step="1" />
        </label>
        <button id="branch-submit" type="button">grow branch</button>
        <p id="form-error" class="error" role="alert"></p>
        <section id="details"></section>
      </aside>
    </main>
  `;
}

export function bind(root: HTMLElement, handlers: Handlers): void {
  (root.querySelector("#branch-submit") as HTMLButtonElement).addEventListener("click", () =>
    handlers.onBranchSubmit(),
  );
  (root.querySelector("#banner-retry") as HTMLButtonElement).addEventListener("click", () =>
    handlers.onRetry(),
  );
}

export function showBanner(root: HTMLElement, message: string): void {
  const banner = root.querySelector("#banner") as HTMLElement;
  (root.querySelector("#banner-text") as HTMLElement).textContent = message;
  banner.classList.remove("hidden");
}

export function hideBanner(root: HTMLElement): void {
  (root.querySelector("#banner") as HTMLElement).classList.add("hidden");
}

export function setFormError(root: HTMLElement, message: string): void {
  (root.querySelector("#form-error") as HTMLElement).textContent = message;
}

export function renderConditions(root: HTMLElement, conditions: string[]): void {
  const select = root.querySelector("#condition") as HTMLSelectElement;
  const current = select.value;
  select.innerHTML = "";
  for (const key of conditions) {
    const option = document.createElement("option");
    option.value = key;
    option.textContent = key;
    select.append(option);
  }
  if (current && conditions.includes(current)) select.value = current;
}

function nodeCard(
  placed: PlacedNode,
  model: TreeViewModel,
  api: TreeApi,
  handlers: Handlers,
): HTMLElement {
  const { node } = placed;
  const card = document.createElement("div");
  card.className = `node state-${node.job_state}`;
  card.dataset.nodeId = node.id;
  if (model.selection === node.id) card.classList.add("selected");
  const position = model.pixelPosition(placed);
  card.style.left = `${position.left}px`;
  card.style.top = `${position.top}px`;

  const img = document.createElement("img");
  img.alt = node.condition || "root image";
  if (node.job_state === "done") img.src = api.imageUrl(node.id);
  card.append(img);

  const meta = document.createElement("div");
  meta.className = "meta";
  meta.textContent = node.parent_id === null ? `root · age ${node.age}` : `${node.condition} · age ${node.age}`;
  card.append(meta);

  const state = document.createElement("span");
  state.className = "state";
  state.textContent = node.job_state;
  card.append(state);

  if (node.job_state === "failed" && node.error) {
    const error = document.createElement("div");
    error.className = "node-error";
    error.textContent = node.error;
    card.append(error);
  }

  card.addEventListener("click", () => handlers.onSelect(node.id));
  return card;
}

function optimisticCard(id: string, info: { condition: string; age: number }): HTMLElement {
  const card = document.createElement("div");
  card.className = "node state-pending optimistic";
  card.dataset.nodeId = id;
  const meta = document.createElement("div");
  meta.className = "meta";
  meta.textContent = `${info.condition} · age ${info.age}`;
  card.append(meta);
  const state = document.createElement("span");
  state.className = "state";
  state.textContent = "pending";
  card.append(state);
  return card;
}

export function renderTree(root: HTMLElement, model: TreeViewModel, api: TreeApi, handlers: Handlers): void {
  (root.querySelector("#subject") as HTMLElement).textContent = model.subject;
  const canvas = root.querySelector("#canvas") as HTMLElement;
  canvas.innerHTML = "";
  const size = model.canvasSize();
  canvas.style.width = `${size.width}px`;
  canvas.style.height = `${size.height}px`;

  const svg = document.createElementNS(SVG_NS, "svg");
  svg.setAttribute("class", "edges");
  svg.setAttribute("width", String(size.width));
  svg.setAttribute("height", String(size.height));
  for (const edge of model.edges()) {
    const from = model.pixelPosition(edge.from);
    const to = model.pixelPosition(edge.to);
    const line = document.createElementNS(SVG_NS, "line");
    line.setAttribute("x1", String(from.left + 50));
    line.setAttribute("y1", String(from.top + 100));
    line.setAttribute("x2", String(to.left + 50));
    line.setAttribute("y2", String(to.top));
    line.setAttribute("class", "edge");
    svg.append(line);
  }
  canvas.append(svg);

  for (const placed of model.nodesInRenderOrder()) {
    canvas.append(nodeCard(placed, model, api, handlers));
  }
  for (const [id, info] of model.optimistic) {
    canvas.append(optimisticCard(id, info));
  }

  renderDetails(root, model, handlers);
}

function renderDetails(root: HTMLElement, model: TreeViewModel, handlers: Handlers): void {
  const details = root.querySelector("#details") as HTMLElement;
  const parentLabel = root.querySelector("#branch-parent") as HTMLElement;
  details.innerHTML = "";
  const selected = model.selection ? model.placed.get(model.selection) : undefined;
  parentLabel.textContent = model.selection ?? "—";
  if (!selected) return;

  const { node } = selected;
  const title = document.createElement("h3");
  title.textContent = node.parent_id === null ? "root node" : node.condition;
  details.append(title);

  const list = document.createElement("dl");
  const rows: Array<[string, string]> = [
    ["id", node.id],
    ["age", String(node.age)],
    ["state", node.job_state],
  ];
  if (node.refined_prompt) rows.push(["prompt", node.refined_prompt]);
  if (node.error) rows.push(["error", node.error]);
  for (const [term, value] of rows) {
    const dt = document.createElement("dt");
    dt.textContent = term;
    const dd = document.createElement("dd");
    dd.textContent = value;
    list.append(dt, dd);
  }
  details.append(list);

  if (node.parent_id !== null) {
    const remove = document.createElement("button");
    remove.id = "delete-node";
    remove.type = "button";
    remove.textContent = "delete subtree";
    remove.addEventListener("click", () => handlers.onDelete(node.id));
    details.append(remove);
  }
}
