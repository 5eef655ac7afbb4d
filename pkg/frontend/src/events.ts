/**
 * Job progress stream: server-sent events over fetch streaming, falling
 * back to polling GET /jobs/{id} when the stream drops. Events are
 * deduplicated by sequence number, so replay after reconnect is idempotent.
 */

import type { JobEvent, JobRecord, JobStateName } from "./types.js";
import { TERMINAL_STATES } from "./types.js";

export interface EventStreamOptions {
  fetchImpl?: typeof fetch;
  pollIntervalMs?: number;
  /** every accepted (deduplicated) event */
  onEvent?: (event: JobEvent) => void;
  /** latest job state whenever it changes */
  onState?: (state: JobStateName) => void;
  /** called once if the stream drops and polling takes over */
  onFallback?: (reason: string) => void;
}

export interface EventStreamHandle {
  close(): void;
  done: Promise<void>;
}

/** Parse one SSE block ("event: ...\ndata: {...}") into its data payload. */
export function parseSseBlock(block: string): JobEvent | null {
  for (const line of block.split("\n")) {
    if (line.startsWith("data: ")) {
      try {
        return JSON.parse(line.slice("data: ".length)) as JobEvent;
      } catch {
        return null;
      }
    }
  }
  return null;
}

export async function* sseEvents(body: ReadableStream<Uint8Array>): AsyncGenerator<JobEvent> {
  const reader = body.getReader();
  const decoder = new TextDecoder();
  let buffer = "";
  while (true) {
    const { done, value } = await reader.read();
    if (done) break;
    buffer += decoder.decode(value, { stream: true });
    let cut;
    while ((cut = buffer.indexOf("\n\n")) >= 0) {
      const block = buffer.slice(0, cut);
      buffer = buffer.slice(cut + 2);
      const event = parseSseBlock(block);
      if (event) yield event;
    }
  }
}

/** Synthesize state events a poller can feed through the same dedup path. */
export function eventsFromRecord(job: JobRecord, afterSeq: number): JobEvent[] {
  return job.state_log
    .filter((entry) => entry.seq > afterSeq)
    .map((entry) => ({ type: "state", ...entry }));
}

export function connectJobEvents(
  baseUrl: string,
  jobId: string,
  options: EventStreamOptions = {},
): EventStreamHandle {
  const fetchImpl = options.fetchImpl ?? fetch;
  const pollIntervalMs = options.pollIntervalMs ?? 500;
  let closed = false;
  let lastSeq = -1;
  let lastState: JobStateName | null = null;

  const accept = (event: JobEvent): void => {
    if (event.type === "state") {
      const seq = event.seq ?? -1;
      if (seq <= lastSeq) return; // replayed duplicate
      lastSeq = seq;
      options.onEvent?.(event);
      if (event.to && event.to !== lastState) {
        lastState = event.to;
        options.onState?.(event.to);
      }
    } else {
      options.onEvent?.(event);
    }
  };

  const sleep = (ms: number) => new Promise((resolve) => setTimeout(resolve, ms));

  const poll = async (): Promise<void> => {
    while (!closed) {
      const response = await fetchImpl(`${baseUrl}/jobs/${jobId}`);
      if (response.ok) {
        const job = (await response.json()) as JobRecord;
        for (const event of eventsFromRecord(job, lastSeq)) {
          accept(event);
        }
        if (TERMINAL_STATES.includes(job.state)) return;
      }
      await sleep(pollIntervalMs);
    }
  };

  const run = async (): Promise<void> => {
    try {
      const response = await fetchImpl(`${baseUrl}/jobs/${jobId}/events`);
      if (!response.ok || !response.body) {
        throw new Error(`event stream unavailable (HTTP ${response.status})`);
      }
      for await (const event of sseEvents(response.body)) {
        if (closed) return;
        accept(event);
        if (event.type === "state" && event.to && TERMINAL_STATES.includes(event.to)) {
          return;
        }
      }
      // server closed the stream without a terminal state: fall back
      if (!closed && (lastState === null || !TERMINAL_STATES.includes(lastState))) {
        options.onFallback?.("stream closed early");
        await poll();
      }
    } catch (err) {
      if (closed) return;
      options.onFallback?.(err instanceof Error ? err.message : String(err));
      await poll();
    }
  };

  const done = run();
  return {
    close() {
      closed = true;
    },
    done,
  };
}
