// Application wiring: one store, one SSE stream, full re-render per
// action. Boot is exported so tests can drive the real app headlessly.

import { ApiError, GatewayApi } from "./api.js";
import { EventStream } from "./sse.js";
import { Store } from "./state.js";
import type { Handlers } from "./views.js";
import { render } from "./views.js";

export interface App {
  store: Store;
  api: GatewayApi;
  stream: EventStream;
  stop(): void;
}

export interface BootOptions {
  fetchFn?: typeof fetch;
}

export function boot(
  root: HTMLElement,
  baseUrl: string,
  token: string,
  opts: BootOptions = {},
): App {
  const fetchFn = opts.fetchFn ?? fetch;
  const api = new GatewayApi(baseUrl, token, fetchFn);
  const store = new Store();

  const fail = (e: unknown) => {
    if (e instanceof ApiError) {
      store.dispatch({ type: "api-error", status: e.status, message: e.message });
    } else {
      store.dispatch({ type: "api-error", status: 0, message: String(e) });
    }
  };

  const refreshThreads = () =>
    api.listThreads().then((threads) => store.dispatch({ type: "threads", threads }), fail);
  const refreshInstances = () =>
    api
      .listInstances()
      .then((instances) => store.dispatch({ type: "instances", instances }), fail);
  const refreshAgents = () =>
    api.listAgents().then((agents) => store.dispatch({ type: "agents", agents }), fail);
  const refreshAdmin = () => {
    refreshAgents();
    api
      .listSecretNames()
      .then((names) => store.dispatch({ type: "secret-names", names }), fail);
    api.listTuples().then((tuples) => store.dispatch({ type: "tuples", tuples }), fail);
  };

  const handlers: Handlers = {
    selectView(view) {
      store.dispatch({ type: "view", view });
      if (view === "instances") refreshInstances();
      if (view === "admin") refreshAdmin();
      if (view === "chat") refreshThreads();
    },
    selectThread(threadId) {
      store.dispatch({ type: "select-thread", threadId });
      api
        .listMessages(threadId)
        .then((messages) => store.dispatch({ type: "messages", threadId, messages }), fail);
    },
    newThread(agentId) {
      api
        .createThread(agentId)
        .then((threadId) => {
          refreshThreads();
          handlers.selectThread(threadId);
        }, fail);
    },
    sendMessage(text) {
      const threadId = store.getState().selectedThread;
      if (threadId === null) return;
      api
        .postMessage(threadId, text)
        .then((message) => store.dispatch({ type: "message-posted", message }), fail);
    },
    saveAgent(agentId, doc) {
      api.putAgent(agentId, doc).then(() => refreshAgents(), fail);
    },
    writeTuple(tuple) {
      api.writeTuple(tuple).then(() => refreshAdmin(), fail);
    },
    checkTuple(tuple) {
      const m = tuple.match(/^([^#]+)#([^@]+)@(.+)$/);
      if (m === null) {
        store.dispatch({ type: "api-error", status: 0, message: "bad tuple syntax" });
        return;
      }
      api
        .check(m[1], m[2], m[3])
        .then((allowed) =>
          store.dispatch({
            type: "api-error",
            status: allowed ? 200 : 403,
            message: allowed ? "allowed" : "denied",
          }),
        )
        .catch(fail);
    },
    saveSecret(name, value, agentId) {
      api.putSecret(name, value, agentId || undefined).then(() => refreshAdmin(), fail);
    },
  };

  store.subscribe((state) => render(root, state, handlers));

  const stream = new EventStream(
    `${baseUrl}/events/stream`,
    token,
    (ev) =>
      store.dispatch({
        type: "sse",
        event: ev.event,
        data: (ev.data ?? {}) as Record<string, unknown>,
      }),
    (live) => store.dispatch({ type: "stream-status", live }),
    { fetchFn },
  );
  stream.start();

  const ticker = setInterval(
    () => store.dispatch({ type: "tick", nowMs: Date.now() }),
    1000,
  );

  store.dispatch({ type: "tick", nowMs: Date.now() });
  refreshThreads();
  refreshInstances();

  return {
    store,
    api,
    stream,
    stop() {
      clearInterval(ticker);
      stream.stop();
    },
  };
}

declare global {
  interface Window {
    agynConsole?: App;
  }
}

export function mount(): void {
  const root = document.getElementById("app");
  const loginRoot = document.getElementById("login");
  if (root === null || loginRoot === null) return;
  const form = loginRoot.querySelector("form");
  form?.addEventListener("submit", (e) => {
    e.preventDefault();
    const token = (loginRoot.querySelector("input[name=token]") as HTMLInputElement).value;
    if (!token) return;
    loginRoot.style.display = "none";
    window.agynConsole = boot(root, "", token);
  });
}

if (typeof document !== "undefined" && document.getElementById("login") !== null) {
  mount();
}
