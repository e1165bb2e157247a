// Server-sent-events client over fetch streaming. The gateway
// authenticates via the Authorization header, which EventSource cannot
// send, so frames are parsed by hand off a streamed response body.

export interface SSEEvent {
  event: string;
  data: unknown;
}

/** Incremental parser for `event: <topic>\ndata: <json>\n\n` frames. */
export class SSEParser {
  private buffer = "";
  private eventName = "";
  private dataLines: string[] = [];

  /** Feed a chunk; returns every complete event it finished. */
  push(chunk: string): SSEEvent[] {
    this.buffer += chunk;
    const events: SSEEvent[] = [];
    let idx: number;
    while ((idx = this.buffer.indexOf("\n")) >= 0) {
      const line = this.buffer.slice(0, idx).replace(/\r$/, "");
      this.buffer = this.buffer.slice(idx + 1);
      if (line === "") {
        if (this.dataLines.length > 0) {
          let data: unknown = this.dataLines.join("\n");
          try {
            data = JSON.parse(data as string);
          } catch {
            // keep raw string for non-JSON payloads
          }
          events.push({ event: this.eventName || "message", data });
        }
        this.eventName = "";
        this.dataLines = [];
      } else if (line.startsWith("event:")) {
        this.eventName = line.slice(6).trim();
      } else if (line.startsWith("data:")) {
        this.dataLines.push(line.slice(5).trimStart());
      }
      // lines starting with ":" are keep-alive comments; ignored
    }
    return events;
  }
}

/** Reconnect delay: 1 s, 2 s, 4 s, ... capped at 10 s. */
export function backoffMs(attempt: number): number {
  return Math.min(10_000, 1000 * 2 ** attempt);
}

export interface StreamOptions {
  fetchFn?: typeof fetch;
  sleepFn?: (ms: number) => Promise<void>;
}

const defaultSleep = (ms: number) => new Promise<void>((r) => setTimeout(r, ms));

export class EventStream {
  private stopped = false;
  private attempt = 0;
  private fetchFn: typeof fetch;
  private sleepFn: (ms: number) => Promise<void>;

  constructor(
    private url: string,
    private token: string,
    private onEvent: (ev: SSEEvent) => void,
    private onStatus: (live: boolean) => void,
    opts: StreamOptions = {},
  ) {
    this.fetchFn = opts.fetchFn ?? fetch;
    this.sleepFn = opts.sleepFn ?? defaultSleep;
  }

  start(): void {
    void this.run();
  }

  stop(): void {
    this.stopped = true;
  }

  private async run(): Promise<void> {
    while (!this.stopped) {
      try {
        const resp = await this.fetchFn(this.url, {
          headers: { Authorization: `Bearer ${this.token}` },
        });
        if (!resp.ok || resp.body === null) {
          throw new Error(`stream status ${resp.status}`);
        }
        this.attempt = 0;
        this.onStatus(true);
        const reader = resp.body.getReader();
        const decoder = new TextDecoder();
        const parser = new SSEParser();
        while (!this.stopped) {
          const { done, value } = await reader.read();
          if (done) break;
          for (const ev of parser.push(decoder.decode(value, { stream: true }))) {
            this.onEvent(ev);
          }
        }
        void reader.cancel().catch(() => {});
      } catch {
        // fall through to reconnect
      }
      if (this.stopped) break;
      this.onStatus(false);
      await this.sleepFn(backoffMs(this.attempt));
      this.attempt += 1;
    }
  }
}
