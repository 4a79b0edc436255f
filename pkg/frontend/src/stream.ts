// NDJSON streaming client for the gateway's generation endpoint.

import type { StreamEvent, Summary } from "./state.js";

export interface GenerationParams {
  prompt: string;
  threshold: number;
  mode: "joint" | "small_only";
  max_tokens?: number;
}

// Reassemble newline-delimited JSON from arbitrary chunk boundaries.
export async function* ndjsonEvents(
  body: ReadableStream<Uint8Array>
): AsyncGenerator<StreamEvent> {
  const reader = body.getReader();
  const decoder = new TextDecoder();
  let buffer = "";
  while (true) {
    const { value, done } = await reader.read();
    if (done) break;
    buffer += decoder.decode(value, { stream: true });
    let newline;
    while ((newline = buffer.indexOf("\n")) >= 0) {
      const line = buffer.slice(0, newline).trim();
      buffer = buffer.slice(newline + 1);
      if (line) yield JSON.parse(line) as StreamEvent;
    }
  }
  buffer += decoder.decode();
  const tail = buffer.trim();
  if (tail) yield JSON.parse(tail) as StreamEvent;
}

export async function* streamGeneration(
  baseUrl: string,
  params: GenerationParams,
  fetchFn: typeof fetch = fetch
): AsyncGenerator<StreamEvent> {
  const resp = await fetchFn(`${baseUrl}/v1/generate_stream`, {
    method: "POST",
    headers: { "content-type": "application/json" },
    body: JSON.stringify(params),
  });
  if (!resp.ok || !resp.body) {
    const detail = await resp.text().catch(() => "");
    throw new Error(`generation failed: ${resp.status} ${detail.slice(0, 120)}`);
  }
  yield* ndjsonEvents(resp.body);
}

export async function fetchResultSummary(
  baseUrl: string,
  sessionId: string,
  fetchFn: typeof fetch = fetch
): Promise<Summary> {
  const resp = await fetchFn(`${baseUrl}/v1/result/${sessionId}`);
  if (!resp.ok) throw new Error(`result fetch failed: ${resp.status}`);
  return (await resp.json()) as Summary;
}
