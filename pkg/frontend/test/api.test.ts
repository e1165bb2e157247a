import { describe, expect, it } from "vitest";

import { ApiError, GatewayApi } from "../src/api.js";

interface Recorded {
  url: string;
  method: string;
  headers: Record<string, string>;
  body: string | undefined;
}

function fakeFetch(status: number, payload: unknown, log: Recorded[]): typeof fetch {
  return (async (input: any, init?: any) => {
    log.push({
      url: String(input),
      method: init?.method ?? "GET",
      headers: (init?.headers ?? {}) as Record<string, string>,
      body: init?.body as string | undefined,
    });
    return {
      ok: status >= 200 && status < 300,
      status,
      statusText: String(status),
      json: async () => payload,
    } as Response;
  }) as typeof fetch;
}

describe("GatewayApi", () => {
  it("sends the bearer token and never an identity header", async () => {
    const log: Recorded[] = [];
    const api = new GatewayApi("http://gw", "alice-token", fakeFetch(200, { threads: [] }, log));
    await api.listThreads();
    expect(log[0].headers.Authorization).toBe("Bearer alice-token");
    expect(Object.keys(log[0].headers)).not.toContain("X-Agyn-Identity");
    expect(Object.keys(log[0].headers)).not.toContain("X-Agyn-Identity-Token");
  });

  it("posts a secret write-only and exposes only names on read", async () => {
    const log: Recorded[] = [];
    const api = new GatewayApi(
      "http://gw",
      "admin-token",
      fakeFetch(200, { secrets: { "db-pass": "ab12cd34" } }, log),
    );
    await api.putSecret("db-pass", "hunter2", "bot");
    expect(JSON.parse(log[0].body as string)).toEqual({
      name: "db-pass",
      value: "hunter2",
      agent_id: "bot",
    });
    const names = await api.listSecretNames();
    expect(names).toEqual(["db-pass"]);
  });

  it("raises ApiError with the server's code and message", async () => {
    const api = new GatewayApi(
      "http://gw",
      "bob-token",
      fakeFetch(403, { code: "forbidden", message: "thread.post denied" }, []),
    );
    await expect(api.postMessage("t-1", "hi")).rejects.toMatchObject({
      status: 403,
      code: "forbidden",
      message: "thread.post denied",
    });
    await expect(api.postMessage("t-1", "hi")).rejects.toBeInstanceOf(ApiError);
  });

  it("builds routes from the gateway table verbatim", async () => {
    const log: Recorded[] = [];
    const api = new GatewayApi("http://gw", "t", fakeFetch(200, { allowed: true }, log));
    await api.check("agent:bot", "configure", "user:bob");
    expect(log[0].url).toBe("http://gw/check");
    expect(JSON.parse(log[0].body as string)).toEqual({
      object: "agent:bot",
      relation: "configure",
      subject: "user:bob",
    });
  });
});
