// Console state: a pure reducer over stream events, so rendering and tests
// share one source of truth.

export type Source = "SLM" | "LLM";

export interface TokenEvent {
  type: "token";
  seq: number;
  text: string;
  source: Source;
  confidence: number | null;
  t: number;
}

export interface Summary {
  session_id: string;
  text: string;
  mode: string;
  threshold: number;
  total_tokens: number;
  llm_tokens: number;
  slm_tokens: number;
  stop_reason: string;
  error: string | null;
  tokens: { index: number; text: string; source: Source; confidence: number | null }[];
}

export interface DoneEvent {
  type: "done";
  seq: number;
  summary: Summary;
}

export type StreamEvent = TokenEvent | DoneEvent;

export interface ConsoleState {
  running: boolean;
  startedAtMs: number | null;
  firstTokenAtMs: number | null;
  tokens: TokenEvent[];
  routingCount: number;
  summary: Summary | null;
  error: string | null;
  lastSeq: number;
}

export function initialState(): ConsoleState {
  return {
    running: false,
    startedAtMs: null,
    firstTokenAtMs: null,
    tokens: [],
    routingCount: 0,
    summary: null,
    error: null,
    lastSeq: -1,
  };
}

export function startState(nowMs: number): ConsoleState {
  return { ...initialState(), running: true, startedAtMs: nowMs };
}

// Token order must equal stream order; a gap or regression in sequence
// numbers means the transport dropped or reordered an event.
export function applyEvent(state: ConsoleState, event: StreamEvent, nowMs: number): ConsoleState {
  if (event.seq !== state.lastSeq + 1) {
    return {
      ...state,
      running: false,
      error: `stream out of order: got seq ${event.seq}, expected ${state.lastSeq + 1}`,
    };
  }
  if (event.type === "token") {
    return {
      ...state,
      lastSeq: event.seq,
      tokens: [...state.tokens, event],
      routingCount: state.routingCount + (event.source === "LLM" ? 1 : 0),
      firstTokenAtMs: state.firstTokenAtMs ?? nowMs,
    };
  }
  return { ...state, lastSeq: event.seq, running: false, summary: event.summary };
}

export function applyFailure(state: ConsoleState, message: string): ConsoleState {
  // the partial transcript is preserved; only the run stops
  return { ...state, running: false, error: message };
}

// Red/plain styling is a pure function of the token's source.
export function tokenClass(source: Source): string {
  return source === "LLM" ? "tok llm" : "tok slm";
}

export interface PanelMetrics {
  routingCount: number;
  ttftMs: number | null;
  elapsedMs: number;
  tokensPerSecond: number | null;
}

export function panelMetrics(state: ConsoleState, nowMs: number): PanelMetrics {
  const endMs = state.running ? nowMs : nowMs;
  const elapsedMs = state.startedAtMs === null ? 0 : Math.max(0, endMs - state.startedAtMs);
  const ttftMs =
    state.startedAtMs !== null && state.firstTokenAtMs !== null
      ? state.firstTokenAtMs - state.startedAtMs
      : null;
  const tokensPerSecond =
    elapsedMs > 0 && state.tokens.length > 0 ? state.tokens.length / (elapsedMs / 1000) : null;
  return { routingCount: state.routingCount, ttftMs, elapsedMs, tokensPerSecond };
}

// The stream's final counts must agree with the gateway's stored summary.
export function countsMatchSummary(state: ConsoleState): boolean {
  if (state.summary === null) return false;
  return (
    state.summary.total_tokens === state.tokens.length &&
    state.summary.llm_tokens === state.routingCount &&
    state.summary.slm_tokens === state.tokens.length - state.routingCount
  );
}
