// Console state as a pure reducer over API results and SSE events.
// Nothing in here computes anything the gateway does not expose, so any
// displayed state is reproducible by replaying recorded traffic.

import type { AgentDoc, InstanceRow, Message, ThreadInfo } from "./api.js";

export type View = "chat" | "instances" | "admin";

export interface ConsoleState {
  view: View;
  threads: ThreadInfo[];
  selectedThread: string | null;
  messages: Record<string, Message[]>;
  instances: Record<string, InstanceRow>;
  agents: AgentDoc[];
  secretNames: string[];
  tuples: string[];
  banner: string | null;
  streamLive: boolean;
  nowMs: number;
}

export function initialState(): ConsoleState {
  return {
    view: "chat",
    threads: [],
    selectedThread: null,
    messages: {},
    instances: {},
    agents: [],
    secretNames: [],
    tuples: [],
    banner: null,
    streamLive: false,
    nowMs: 0,
  };
}

export type Action =
  | { type: "view"; view: View }
  | { type: "threads"; threads: ThreadInfo[] }
  | { type: "select-thread"; threadId: string }
  | { type: "messages"; threadId: string; messages: Message[] }
  | { type: "message-posted"; message: Message }
  | { type: "instances"; instances: InstanceRow[] }
  | { type: "agents"; agents: AgentDoc[] }
  | { type: "secret-names"; names: string[] }
  | { type: "tuples"; tuples: string[] }
  | { type: "api-error"; status: number; message: string }
  | { type: "clear-banner" }
  | { type: "stream-status"; live: boolean }
  | { type: "tick"; nowMs: number }
  | { type: "sse"; event: string; data: Record<string, unknown> };

function appendMessage(
  messages: Record<string, Message[]>,
  threadId: string,
  msg: Message,
): Record<string, Message[]> {
  const existing = messages[threadId] ?? [];
  // the optimistic append and the SSE echo reconcile on the message id
  if (existing.some((m) => m.id === msg.id)) return messages;
  return { ...messages, [threadId]: [...existing, msg] };
}

function applySse(state: ConsoleState, event: string, data: Record<string, unknown>): ConsoleState {
  if (event === "thread.message") {
    const threadId = data.thread as string;
    const msg: Message = {
      id: data.msg as string,
      thread_id: threadId,
      sender: data.sender as string,
      text: data.text as string,
      ts: state.nowMs,
    };
    return { ...state, messages: appendMessage(state.messages, threadId, msg) };
  }
  if (event === "instance.state") {
    const id = data.instance_id as string;
    const prev = state.instances[id];
    const row: InstanceRow = {
      instance_id: id,
      agent_id: data.agent_id as string,
      thread_id: data.thread_id as string,
      state: data.state as string,
      definition_revision: prev?.definition_revision ?? 0,
      last_active_ts: (data.ts as number) ?? prev?.last_active_ts ?? 0,
      created_ts: prev?.created_ts ?? (data.ts as number) ?? 0,
      idle_timeout_s: prev?.idle_timeout_s ?? 300,
    };
    return { ...state, instances: { ...state.instances, [id]: row } };
  }
  if (event === "config.applied") {
    const agents = state.agents.map((a) =>
      a.agent_id === data.agent_id ? { ...a, revision: data.revision as number } : a,
    );
    return { ...state, agents };
  }
  return state;
}

export function reduce(state: ConsoleState, action: Action): ConsoleState {
  switch (action.type) {
    case "view":
      return { ...state, view: action.view, banner: null };
    case "threads":
      return { ...state, threads: action.threads };
    case "select-thread":
      return { ...state, selectedThread: action.threadId, banner: null };
    case "messages":
      return {
        ...state,
        messages: { ...state.messages, [action.threadId]: action.messages },
      };
    case "message-posted":
      return {
        ...state,
        messages: appendMessage(state.messages, action.message.thread_id, action.message),
      };
    case "instances": {
      const instances: Record<string, InstanceRow> = {};
      for (const row of action.instances) instances[row.instance_id] = row;
      return { ...state, instances };
    }
    case "agents":
      return { ...state, agents: action.agents };
    case "secret-names":
      return { ...state, secretNames: action.names };
    case "tuples":
      return { ...state, tuples: action.tuples };
    case "api-error":
      return { ...state, banner: `${action.status}: ${action.message}` };
    case "clear-banner":
      return { ...state, banner: null };
    case "stream-status":
      return { ...state, streamLive: action.live };
    case "tick":
      return { ...state, nowMs: action.nowMs };
    case "sse":
      return applySse(state, action.event, action.data);
  }
}

export type Listener = (state: ConsoleState, action: Action) => void;

export class Store {
  private state: ConsoleState;
  private listeners: Listener[] = [];

  constructor(state: ConsoleState = initialState()) {
    this.state = state;
  }

  getState(): ConsoleState {
    return this.state;
  }

  dispatch(action: Action): void {
    this.state = reduce(this.state, action);
    for (const fn of this.listeners) fn(this.state, action);
  }

  subscribe(fn: Listener): () => void {
    this.listeners.push(fn);
    return () => {
      this.listeners = this.listeners.filter((f) => f !== fn);
    };
  }
}

/** Seconds until the platform reclaims the instance, floored at zero. */
export function idleCountdownS(row: InstanceRow, nowMs: number): number {
  const ageS = Math.max(0, (nowMs - row.last_active_ts) / 1000);
  return Math.max(0, Math.round(row.idle_timeout_s - ageS));
}
