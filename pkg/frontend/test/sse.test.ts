import { describe, expect, it } from "vitest";

import { backoffMs, SSEParser } from "../src/sse.js";

describe("SSEParser", () => {
  it("parses a complete frame", () => {
    const p = new SSEParser();
    const events = p.push('event: thread.message\ndata: {"thread":"t-1","text":"hi"}\n\n');
    expect(events).toEqual([
      { event: "thread.message", data: { thread: "t-1", text: "hi" } },
    ]);
  });

  it("reassembles frames split across arbitrary chunk boundaries", () => {
    const frame = 'event: instance.state\ndata: {"instance_id":"inst-1","state":"Running"}\n\n';
    for (const cut of [1, 7, 20, frame.length - 2]) {
      const p = new SSEParser();
      const events = [...p.push(frame.slice(0, cut)), ...p.push(frame.slice(cut))];
      expect(events).toHaveLength(1);
      expect(events[0].event).toBe("instance.state");
    }
  });

  it("ignores keep-alive comments and blank noise", () => {
    const p = new SSEParser();
    expect(p.push(": keepalive\n\n: keepalive\n\n")).toEqual([]);
  });

  it("delivers multiple frames from one chunk in order", () => {
    const p = new SSEParser();
    const events = p.push(
      'event: a\ndata: {"n":1}\n\nevent: b\ndata: {"n":2}\n\n',
    );
    expect(events.map((e) => e.event)).toEqual(["a", "b"]);
  });

  it("keeps non-JSON data as a raw string", () => {
    const p = new SSEParser();
    expect(p.push("data: plain text\n\n")).toEqual([
      { event: "message", data: "plain text" },
    ]);
  });
});

describe("backoffMs", () => {
  it("doubles from 1 s and caps at 10 s", () => {
    expect([0, 1, 2, 3, 4, 5, 9].map(backoffMs)).toEqual([
      1000, 2000, 4000, 8000, 10_000, 10_000, 10_000,
    ]);
  });
});
