// @vitest-environment jsdom
//
// Browser-level acceptance for the console: load the real HTML shell,
// drive it against a scripted gateway, and assert the rendered DOM.

import { readFileSync } from "node:fs";
import { join } from "node:path";
import { beforeEach, describe, expect, it } from "vitest";

import { mountConsole } from "./app.js";
import type { Summary } from "./state.js";

const html = readFileSync(join(__dirname, "..", "static", "index.html"), "utf-8");

interface Scripted {
  tokens: { text: string; source: "SLM" | "LLM"; confidence: number | null }[];
  finalSummary?: Partial<Summary>;
}

function scriptedFetch(script: Scripted): typeof fetch {
  const summary: Summary = {
    session_id: "sess-dom",
    text: script.tokens.map((t) => t.text).join(""),
    mode: "joint",
    threshold: 0.7,
    total_tokens: script.tokens.length,
    llm_tokens: script.tokens.filter((t) => t.source === "LLM").length,
    slm_tokens: script.tokens.filter((t) => t.source === "SLM").length,
    stop_reason: "max_tokens",
    error: null,
    tokens: script.tokens.map((t, i) => ({ index: i, ...t })),
    ...script.finalSummary,
  };
  return (async (url: RequestInfo | URL) => {
    const target = String(url);
    if (target.endsWith("/v1/generate_stream")) {
      const lines = script.tokens.map((t, seq) =>
        JSON.stringify({ type: "token", seq, t: seq, ...t })
      );
      lines.push(JSON.stringify({ type: "done", seq: script.tokens.length, summary }));
      const encoder = new TextEncoder();
      const body = new ReadableStream<Uint8Array>({
        start(controller) {
          for (const line of lines) controller.enqueue(encoder.encode(line + "\n"));
          controller.close();
        },
      });
      return new Response(body, { status: 200 });
    }
    if (target.includes("/v1/result/")) {
      return new Response(JSON.stringify(summary), { status: 200 });
    }
    return new Response("not found", { status: 404 });
  }) as typeof fetch;
}

function mountWith(script: Scripted) {
  document.documentElement.innerHTML = html;
  (document.getElementById("prompt") as HTMLTextAreaElement).value = "dom test prompt";
  return mountConsole(document, "", scriptedFetch(script));
}

beforeEach(() => {
  document.documentElement.innerHTML = "";
});

describe("console rendering", () => {
  it("small_only renders zero red tokens", async () => {
    const app = mountWith({
      tokens: [
        { text: "a", source: "SLM", confidence: null },
        { text: "b", source: "SLM", confidence: null },
        { text: "c", source: "SLM", confidence: null },
      ],
    });
    (document.getElementById("mode") as HTMLSelectElement).value = "small_only";
    await app.start();
    expect(document.querySelectorAll("#tokens .tok").length).toBe(3);
    expect(document.querySelectorAll("#tokens .tok.llm").length).toBe(0);
  });

  it("joint mode renders red exactly on LLM-sourced events, in stream order", async () => {
    const app = mountWith({
      tokens: [
        { text: "a", source: "SLM", confidence: 0.9 },
        { text: "B", source: "LLM", confidence: 0.2 },
        { text: "c", source: "SLM", confidence: 0.8 },
        { text: "D", source: "LLM", confidence: 0.1 },
      ],
    });
    await app.start();
    const spans = [...document.querySelectorAll("#tokens .tok")];
    expect(spans.map((s) => s.textContent)).toEqual(["a", "B", "c", "D"]);
    expect(spans.map((s) => s.classList.contains("llm"))).toEqual([false, true, false, true]);
  });

  it("final panel counts equal the gateway's result summary", async () => {
    const app = mountWith({
      tokens: [
        { text: "a", source: "SLM", confidence: 0.9 },
        { text: "B", source: "LLM", confidence: 0.2 },
        { text: "C", source: "LLM", confidence: 0.3 },
      ],
    });
    await app.start();
    expect(document.getElementById("routing-count")!.textContent).toBe("2");
    expect(document.getElementById("summary-verdict")!.textContent).toMatch(/verified/);
    expect(app.state().summary!.session_id).toBe("sess-dom");
  });

  it("flags a summary that disagrees with the stream", async () => {
    const app = mountWith({
      tokens: [{ text: "a", source: "LLM", confidence: 0.1 }],
      finalSummary: { llm_tokens: 0, slm_tokens: 1 },
    });
    await app.start();
    expect(document.getElementById("summary-verdict")!.textContent).toMatch(/mismatch/);
  });

  it("transport failure shows the banner and preserves the transcript", async () => {
    document.documentElement.innerHTML = html;
    (document.getElementById("prompt") as HTMLTextAreaElement).value = "x";
    const failingFetch = (async () => new Response("gone", { status: 502 })) as typeof fetch;
    const app = mountConsole(document, "", failingFetch);
    await app.start();
    expect(document.getElementById("banner")!.classList.contains("hidden")).toBe(false);
    expect(document.querySelector("#banner .banner-text")!.textContent).toMatch(/502/);
    expect(document.getElementById("retry")).not.toBeNull();
  });

  it("threshold slider updates its label without affecting a finished run", async () => {
    const app = mountWith({ tokens: [{ text: "a", source: "SLM", confidence: 0.9 }] });
    await app.start();
    const before = app.state().tokens.length;
    const slider = document.getElementById("threshold") as HTMLInputElement;
    slider.value = "0.25";
    slider.dispatchEvent(new Event("input"));
    expect(document.getElementById("threshold-value")!.textContent).toBe("0.25");
    expect(app.state().tokens.length).toBe(before);
  });
});
