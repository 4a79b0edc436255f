// DOM wiring for the operator console: controls on the left, live token
// stream and metrics panel on the right. Remote (LLM) tokens render red.
//
// The console talks only to the gateway's endpoints; the threshold is bound
// per request, so moving the slider never affects a generation in flight.

import {
  ConsoleState,
  applyEvent,
  applyFailure,
  countsMatchSummary,
  initialState,
  panelMetrics,
  startState,
  tokenClass,
} from "./state.js";
import { GenerationParams, fetchResultSummary, streamGeneration } from "./stream.js";

interface Elements {
  prompt: HTMLTextAreaElement;
  threshold: HTMLInputElement;
  thresholdValue: HTMLElement;
  mode: HTMLSelectElement;
  maxTokens: HTMLInputElement;
  start: HTMLButtonElement;
  tokens: HTMLElement;
  banner: HTMLElement;
  retry: HTMLButtonElement;
  routingCount: HTMLElement;
  ttft: HTMLElement;
  elapsed: HTMLElement;
  tokensPerSec: HTMLElement;
  verdict: HTMLElement;
}

function grab(root: Document | HTMLElement): Elements {
  const byId = (id: string) => {
    const el = root.querySelector(`#${id}`);
    if (!el) throw new Error(`missing element #${id}`);
    return el as HTMLElement;
  };
  return {
    prompt: byId("prompt") as HTMLTextAreaElement,
    threshold: byId("threshold") as HTMLInputElement,
    thresholdValue: byId("threshold-value"),
    mode: byId("mode") as HTMLSelectElement,
    maxTokens: byId("max-tokens") as HTMLInputElement,
    start: byId("start") as HTMLButtonElement,
    tokens: byId("tokens"),
    banner: byId("banner"),
    retry: byId("retry") as HTMLButtonElement,
    routingCount: byId("routing-count"),
    ttft: byId("ttft"),
    elapsed: byId("elapsed"),
    tokensPerSec: byId("tokens-per-sec"),
    verdict: byId("summary-verdict"),
  };
}

export interface ConsoleApp {
  state(): ConsoleState;
  start(): Promise<void>;
}

export function mountConsole(
  root: Document | HTMLElement,
  baseUrl = "",
  fetchFn: typeof fetch = fetch,
  now: () => number = () => Date.now()
): ConsoleApp {
  const el = grab(root);
  const doc: Document =
    (root as Document).createElement !== undefined
      ? (root as Document)
      : (root as HTMLElement).ownerDocument!;
  let state = initialState();

  el.threshold.addEventListener("input", () => {
    el.thresholdValue.textContent = Number(el.threshold.value).toFixed(2);
  });
  el.thresholdValue.textContent = Number(el.threshold.value).toFixed(2);

  function renderToken(event: { text: string; source: "SLM" | "LLM"; confidence: number | null }) {
    const span = doc.createElement("span");
    span.className = tokenClass(event.source);
    span.textContent = event.text;
    if (event.confidence !== null) {
      span.title = `confidence ${event.confidence.toFixed(3)}`;
    }
    el.tokens.appendChild(span);
  }

  function renderMetrics() {
    const metrics = panelMetrics(state, now());
    el.routingCount.textContent = String(metrics.routingCount);
    el.ttft.textContent = metrics.ttftMs === null ? "-" : `${metrics.ttftMs.toFixed(0)} ms`;
    el.elapsed.textContent = `${(metrics.elapsedMs / 1000).toFixed(1)} s`;
    el.tokensPerSec.textContent =
      metrics.tokensPerSecond === null ? "-" : metrics.tokensPerSecond.toFixed(1);
  }

  function showBanner(message: string | null) {
    el.banner.classList.toggle("hidden", message === null);
    const text = el.banner.querySelector(".banner-text");
    if (text) text.textContent = message ?? "";
  }

  async function verifySummary() {
    if (!state.summary) return;
    const streamed = countsMatchSummary(state);
    let stored = false;
    try {
      const fetched = await fetchResultSummary(baseUrl, state.summary.session_id, fetchFn);
      stored =
        fetched.total_tokens === state.tokens.length &&
        fetched.llm_tokens === state.routingCount;
    } catch {
      stored = false;
    }
    el.verdict.textContent =
      streamed && stored ? "counts verified against gateway summary" : "count mismatch!";
    el.verdict.classList.toggle("mismatch", !(streamed && stored));
  }

  async function start(): Promise<void> {
    const params: GenerationParams = {
      prompt: el.prompt.value,
      threshold: Number(el.threshold.value),
      mode: el.mode.value as GenerationParams["mode"],
      max_tokens: Number(el.maxTokens.value) || 100,
    };
    if (!params.prompt) {
      showBanner("enter a prompt first");
      return;
    }
    state = startState(now());
    el.tokens.textContent = "";
    el.verdict.textContent = "";
    showBanner(null);
    el.start.disabled = true;
    try {
      for await (const event of streamGeneration(baseUrl, params, fetchFn)) {
        state = applyEvent(state, event, now());
        if (state.error) break;
        if (event.type === "token") renderToken(event);
        renderMetrics();
      }
      if (state.error) {
        showBanner(state.error);
      } else {
        await verifySummary();
      }
    } catch (err) {
      // partial transcript stays on screen; the banner offers a retry
      state = applyFailure(state, err instanceof Error ? err.message : String(err));
      showBanner(state.error);
    } finally {
      el.start.disabled = false;
      renderMetrics();
    }
  }

  el.start.addEventListener("click", () => void start());
  el.retry.addEventListener("click", () => void start());

  return { state: () => state, start };
}

declare global {
  interface Window {
    __tokenrouteConsole?: ConsoleApp;
  }
}

if (typeof document !== "undefined" && document.getElementById("start")) {
  window.__tokenrouteConsole = mountConsole(document);
}
