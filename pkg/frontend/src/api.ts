// Typed client for the control-plane HTTP API. Every console data flow
// goes through this module; it holds the bearer token and nothing else.

export interface ThreadInfo {
  thread_id: string;
  agent_id: string;
  creator: string;
  created_ts: number;
}

export interface Message {
  id: string;
  thread_id: string;
  sender: string;
  text: string;
  ts: number;
}

export interface InstanceRow {
  instance_id: string;
  agent_id: string;
  thread_id: string;
  definition_revision: number;
  state: string;
  last_active_ts: number;
  created_ts: number;
  idle_timeout_s: number;
}

export interface AgentDoc {
  agent_id: string;
  revision: number;
  system_prompt: string;
  model: string;
  [key: string]: unknown;
}

export class ApiError extends Error {
  constructor(
    public status: number,
    public code: string,
    message: string,
  ) {
    super(message);
  }
}

type FetchLike = typeof fetch;

export class GatewayApi {
  constructor(
    private baseUrl: string,
    private token: string,
    private fetchFn: FetchLike = fetch,
  ) {}

  private async request<T>(method: string, path: string, body?: unknown): Promise<T> {
    const resp = await this.fetchFn(this.baseUrl + path, {
      method,
      headers: {
        Authorization: `Bearer ${this.token}`,
        ...(body !== undefined ? { "Content-Type": "application/json" } : {}),
      },
      body: body !== undefined ? JSON.stringify(body) : undefined,
    });
    const data = await resp.json().catch(() => ({}));
    if (!resp.ok) {
      throw new ApiError(resp.status, data.code ?? "error", data.message ?? resp.statusText);
    }
    return data as T;
  }

  async listThreads(): Promise<ThreadInfo[]> {
    const d = await this.request<{ threads: ThreadInfo[] }>("GET", "/threads");
    return d.threads;
  }

  async createThread(agentId: string): Promise<string> {
    const d = await this.request<{ thread_id: string }>("POST", "/threads", {
      agent_id: agentId,
    });
    return d.thread_id;
  }

  async listMessages(threadId: string): Promise<Message[]> {
    const d = await this.request<{ messages: Message[] }>(
      "GET",
      `/threads/${threadId}/messages`,
    );
    return d.messages;
  }

  async postMessage(threadId: string, text: string): Promise<Message> {
    return this.request<Message>("POST", `/threads/${threadId}/messages`, { text });
  }

  async listAgents(): Promise<AgentDoc[]> {
    const d = await this.request<{ agents: AgentDoc[] }>("GET", "/agents");
    return d.agents;
  }

  async putAgent(agentId: string, doc: object): Promise<{ revision: number }> {
    return this.request("PUT", `/agents/${agentId}`, doc);
  }

  async deleteAgent(agentId: string): Promise<void> {
    await this.request("DELETE", `/agents/${agentId}`);
  }

  async listInstances(): Promise<InstanceRow[]> {
    const d = await this.request<{ instances: InstanceRow[] }>("GET", "/instances");
    return d.instances;
  }

  /** Secret values are write-only: this POSTs and returns only an ack. */
  async putSecret(name: string, value: string, agentId?: string): Promise<void> {
    await this.request("POST", "/secrets", {
      name,
      value,
      ...(agentId ? { agent_id: agentId } : {}),
    });
  }

  async listSecretNames(): Promise<string[]> {
    const d = await this.request<{ secrets: Record<string, string> }>("GET", "/secrets");
    return Object.keys(d.secrets).sort();
  }

  async listTuples(): Promise<string[]> {
    const d = await this.request<{ tuples: string[] }>("GET", "/tuples");
    return d.tuples;
  }

  async writeTuple(tuple: string): Promise<void> {
    await this.request("POST", "/tuples", { tuple });
  }

  async deleteTuple(tuple: string): Promise<void> {
    await this.request("DELETE", "/tuples", { tuple });
  }

  async check(object: string, relation: string, subject: string): Promise<boolean> {
    const d = await this.request<{ allowed: boolean }>("POST", "/check", {
      object,
      relation,
      subject,
    });
    return d.allowed;
  }
}
