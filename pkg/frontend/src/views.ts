// DOM rendering: pure functions from state to elements. All user text
// goes through textContent, never innerHTML, so nothing in a message,
// agent definition, or tuple can inject markup.

import type { ConsoleState, View } from "./state.js";
import { idleCountdownS } from "./state.js";

export interface Handlers {
  selectView(view: View): void;
  selectThread(threadId: string): void;
  newThread(agentId: string): void;
  sendMessage(text: string): void;
  saveAgent(agentId: string, doc: object): void;
  writeTuple(tuple: string): void;
  checkTuple(tuple: string): void;
  saveSecret(name: string, value: string, agentId: string): void;
}

function el<K extends keyof HTMLElementTagNameMap>(
  tag: K,
  attrs: Record<string, string> = {},
  text?: string,
): HTMLElementTagNameMap[K] {
  const node = document.createElement(tag);
  for (const [k, v] of Object.entries(attrs)) node.setAttribute(k, v);
  if (text !== undefined) node.textContent = text;
  return node;
}

function navBar(state: ConsoleState, handlers: Handlers): HTMLElement {
  const nav = el("nav", { class: "nav" });
  for (const view of ["chat", "instances", "admin"] as View[]) {
    const btn = el(
      "button",
      { "data-view": view, class: state.view === view ? "active" : "" },
      view,
    );
    btn.addEventListener("click", () => handlers.selectView(view));
    nav.appendChild(btn);
  }
  const status = el(
    "span",
    { class: "stream-status", "data-live": String(state.streamLive) },
    state.streamLive ? "live" : "stale — reconnecting",
  );
  nav.appendChild(status);
  return nav;
}

function banner(state: ConsoleState): HTMLElement | null {
  if (state.banner === null) return null;
  return el("div", { class: "banner", role: "alert" }, state.banner);
}

function instanceBadge(state: ConsoleState, threadId: string): HTMLElement {
  const inst = Object.values(state.instances).find((i) => i.thread_id === threadId);
  const label = inst ? inst.state : "Stopped";
  return el("span", { class: "badge", "data-state": label }, label);
}

function chatView(state: ConsoleState, handlers: Handlers): HTMLElement {
  const wrap = el("section", { class: "chat" });

  const sidebar = el("ul", { class: "thread-list" });
  for (const t of state.threads) {
    const item = el("li", {
      "data-thread": t.thread_id,
      class: t.thread_id === state.selectedThread ? "selected" : "",
    });
    const link = el("button", {}, `${t.agent_id} · ${t.thread_id.slice(0, 10)}`);
    link.addEventListener("click", () => handlers.selectThread(t.thread_id));
    item.appendChild(link);
    sidebar.appendChild(item);
  }
  const newForm = el("form", { class: "new-thread" });
  const agentInput = el("input", { name: "agent", placeholder: "agent id" });
  const newBtn = el("button", { type: "submit" }, "new thread");
  newForm.append(agentInput, newBtn);
  newForm.addEventListener("submit", (e) => {
    e.preventDefault();
    if (agentInput.value) handlers.newThread(agentInput.value);
  });
  wrap.append(sidebar, newForm);

  const pane = el("div", { class: "message-pane" });
  if (state.selectedThread === null) {
    pane.appendChild(el("p", { class: "empty" }, "select or create a thread"));
    wrap.appendChild(pane);
    return wrap;
  }
  pane.appendChild(instanceBadge(state, state.selectedThread));
  const list = el("ol", { class: "messages" });
  for (const m of state.messages[state.selectedThread] ?? []) {
    const item = el("li", { "data-sender": m.sender, "data-msg": m.id });
    item.appendChild(el("span", { class: "sender" }, m.sender));
    item.appendChild(el("span", { class: "text" }, m.text));
    list.appendChild(item);
  }
  pane.appendChild(list);

  const form = el("form", { class: "composer" });
  const input = el("input", { name: "text", placeholder: "message" });
  const send = el("button", { type: "submit" }, "send");
  if (state.banner !== null) {
    input.setAttribute("disabled", "");
    send.setAttribute("disabled", "");
  }
  form.append(input, send);
  form.addEventListener("submit", (e) => {
    e.preventDefault();
    if (input.value) {
      handlers.sendMessage(input.value);
      input.value = "";
    }
  });
  pane.appendChild(form);
  wrap.appendChild(pane);
  return wrap;
}

function instancesView(state: ConsoleState): HTMLElement {
  const wrap = el("section", { class: "instances" });
  const rows = Object.values(state.instances).sort((a, b) =>
    a.instance_id.localeCompare(b.instance_id),
  );
  if (rows.length === 0) {
    wrap.appendChild(el("p", { class: "empty" }, "no instances yet"));
    return wrap;
  }
  const table = el("table");
  const head = el("tr");
  for (const h of ["instance", "agent", "thread", "state", "keep-alive age", "idle countdown"]) {
    head.appendChild(el("th", {}, h));
  }
  table.appendChild(head);
  for (const r of rows) {
    const tr = el("tr", { "data-instance": r.instance_id, "data-state": r.state });
    const ageS = state.nowMs > 0 ? Math.max(0, (state.nowMs - r.last_active_ts) / 1000) : 0;
    const live = r.state === "Running" || r.state === "Provisioning";
    tr.appendChild(el("td", {}, r.instance_id));
    tr.appendChild(el("td", {}, `${r.agent_id} r${r.definition_revision}`));
    tr.appendChild(el("td", {}, r.thread_id));
    tr.appendChild(el("td", { class: "state" }, r.state));
    tr.appendChild(el("td", {}, live ? `${ageS.toFixed(0)}s` : "—"));
    tr.appendChild(
      el("td", { class: "countdown" }, live ? `${idleCountdownS(r, state.nowMs)}s` : "—"),
    );
    table.appendChild(tr);
  }
  wrap.appendChild(table);
  return wrap;
}

function adminView(state: ConsoleState, handlers: Handlers): HTMLElement {
  const wrap = el("section", { class: "admin" });

  const agentsPanel = el("div", { class: "panel agents" });
  agentsPanel.appendChild(el("h2", {}, "agents"));
  const agentTable = el("table");
  for (const a of state.agents) {
    const tr = el("tr", { "data-agent": a.agent_id });
    tr.appendChild(el("td", {}, a.agent_id));
    tr.appendChild(el("td", { class: "revision" }, `rev ${a.revision}`));
    tr.appendChild(el("td", {}, a.model));
    agentTable.appendChild(tr);
  }
  agentsPanel.appendChild(agentTable);
  const agentForm = el("form", { class: "agent-form" });
  const agentId = el("input", { name: "agent_id", placeholder: "agent id" });
  const agentDoc = el("textarea", { name: "doc", placeholder: "definition JSON" });
  const agentSave = el("button", { type: "submit" }, "save agent");
  agentForm.append(agentId, agentDoc, agentSave);
  agentForm.addEventListener("submit", (e) => {
    e.preventDefault();
    try {
      handlers.saveAgent(agentId.value, JSON.parse(agentDoc.value));
    } catch {
      // invalid JSON never leaves the browser
    }
  });
  agentsPanel.appendChild(agentForm);

  const rolesPanel = el("div", { class: "panel roles" });
  rolesPanel.appendChild(el("h2", {}, "roles"));
  const tupleList = el("ul", { class: "tuples" });
  for (const t of state.tuples) {
    tupleList.appendChild(el("li", {}, t));
  }
  rolesPanel.appendChild(tupleList);
  const tupleForm = el("form", { class: "tuple-form" });
  const tupleInput = el("input", {
    name: "tuple",
    placeholder: "agent:bot#maintainer@user:bob",
  });
  const tupleWrite = el("button", { type: "submit" }, "grant");
  const tupleCheck = el("button", { type: "button", class: "check" }, "check");
  tupleForm.append(tupleInput, tupleWrite, tupleCheck);
  tupleForm.addEventListener("submit", (e) => {
    e.preventDefault();
    if (tupleInput.value) handlers.writeTuple(tupleInput.value);
  });
  tupleCheck.addEventListener("click", () => {
    if (tupleInput.value) handlers.checkTuple(tupleInput.value);
  });
  rolesPanel.appendChild(tupleForm);

  const secretsPanel = el("div", { class: "panel secrets" });
  secretsPanel.appendChild(el("h2", {}, "secrets"));
  const secretList = el("ul", { class: "secret-names" });
  for (const name of state.secretNames) {
    secretList.appendChild(el("li", {}, name));
  }
  secretsPanel.appendChild(secretList);
  const secretForm = el("form", { class: "secret-form" });
  const secretName = el("input", { name: "name", placeholder: "secret name" });
  const secretValue = el("input", {
    name: "value",
    type: "password",
    placeholder: "value (write-only)",
    autocomplete: "off",
  });
  const secretAgent = el("input", { name: "agent_id", placeholder: "agent scope (optional)" });
  const secretSave = el("button", { type: "submit" }, "store");
  secretForm.append(secretName, secretValue, secretAgent, secretSave);
  secretForm.addEventListener("submit", (e) => {
    e.preventDefault();
    if (secretName.value && secretValue.value) {
      handlers.saveSecret(secretName.value, secretValue.value, secretAgent.value);
      // the value never persists client-side: clear it the moment it is sent
      secretValue.value = "";
    }
  });
  secretsPanel.appendChild(secretForm);

  wrap.append(agentsPanel, rolesPanel, secretsPanel);
  return wrap;
}

export function render(root: HTMLElement, state: ConsoleState, handlers: Handlers): void {
  root.textContent = "";
  root.appendChild(navBar(state, handlers));
  const alert = banner(state);
  if (alert !== null) root.appendChild(alert);
  if (state.view === "chat") root.appendChild(chatView(state, handlers));
  else if (state.view === "instances") root.appendChild(instancesView(state));
  else root.appendChild(adminView(state, handlers));
}
