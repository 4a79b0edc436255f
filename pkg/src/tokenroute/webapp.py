"""HTTP transport: cloud serving endpoints plus the device-side gateway.

Cloud endpoints (the serving module's contract):
  POST /v1/route_token   body = routing wire schema, response = wire schema
  GET  /v1/health
  GET  /v1/config

Gateway endpoints (what the console talks to; the gateway consumes the
serving side only through the wire client, preserving the edge/cloud split
even when both run in one process):
  POST /v1/generate          {prompt, threshold?, mode?, max_tokens?, kv_policy?}
  POST /v1/generate_stream   same body; NDJSON token events, then a summary
  GET  /v1/result/{session_id}

With ``console_dir`` set, the built console assets are served at /.
"""

from __future__ import annotations

import json
import threading
from pathlib import Path

from fastapi import FastAPI, Request, Response
from fastapi.responses import JSONResponse, StreamingResponse

from .engine import ModelWeights
from .orchestrator import LocalClient, stream_generate
from .router import RouterModel
from .server import MalformedRequest, ServerError, SessionLimitExceeded, TokenServer
from .types import GenerationConfig, KvPolicy, Mode, TokenRouteError, validate_config


class Gateway:
    """Holds the device-side pieces and remembers result summaries."""

    def __init__(self, weights: ModelWeights, router: RouterModel | None, server: TokenServer):
        self.weights = weights
        self.router = router
        self.server = server
        self.results: dict[str, dict] = {}
        self._lock = threading.Lock()

    def store(self, summary: dict) -> None:
        with self._lock:
            self.results[summary["session_id"]] = summary

    def fetch(self, session_id: str) -> dict | None:
        with self._lock:
            return self.results.get(session_id)


def _parse_generation_body(doc: dict) -> tuple[str, GenerationConfig]:
    prompt = doc.get("prompt", "")
    if not isinstance(prompt, str) or not prompt:
        raise TokenRouteError("body must include a non-empty 'prompt'")
    cfg = GenerationConfig(
        mode=Mode.parse(doc.get("mode", "joint")),
        threshold=float(doc.get("threshold", 0.7)),
        max_tokens=int(doc.get("max_tokens", 100)),
        kv_policy=KvPolicy.parse(doc.get("kv_policy", "incremental")),
        stream=bool(doc.get("stream", False)),
    )
    return prompt, validate_config(cfg)


def create_app(
    server: TokenServer,
    weights: ModelWeights | None = None,
    router: RouterModel | None = None,
    console_dir: str | Path | None = None,
) -> FastAPI:
    app = FastAPI(title="tokenroute", docs_url=None, redoc_url=None)
    gateway = Gateway(weights, router, server) if weights is not None else None

    @app.get("/v1/health")
    def health() -> dict:
        return {"status": "ok", "sessions": server.session_count}

    @app.get("/v1/config")
    def config() -> dict:
        return server.cfg.describe()

    @app.post("/v1/route_token")
    async def route_token(request: Request) -> Response:
        body = await request.body()
        stream = request.query_params.get("stream") in ("1", "true")
        try:
            raw = server.serve_bytes(body)
        except MalformedRequest as exc:
            return JSONResponse({"error": str(exc)}, status_code=400)
        except SessionLimitExceeded as exc:
            return JSONResponse({"error": str(exc)}, status_code=429)
        except ServerError as exc:
            return JSONResponse({"error": str(exc)}, status_code=500)
        if stream:
            # burst tokens delivered incrementally, then the full response
            from .wire import parse_response as _parse

            response = _parse(raw)

            def lines():
                for position, token in enumerate(response.tokens):
                    doc = {"type": "token", "seq": position, "text": token.text, "token": token.token}
                    yield json.dumps(doc, ensure_ascii=False) + "\n"
                yield json.dumps({"type": "response", "body": json.loads(raw)}, ensure_ascii=False) + "\n"

            return StreamingResponse(lines(), media_type="application/x-ndjson")
        return Response(content=raw, media_type="application/json")

    if gateway is not None:
        _mount_gateway(app, gateway)

    if console_dir is not None:
        from fastapi.staticfiles import StaticFiles

        app.mount("/", StaticFiles(directory=str(console_dir), html=True), name="console")

    return app


def _mount_gateway(app: FastAPI, gateway: Gateway) -> None:
    @app.post("/v1/generate")
    async def generate_once(request: Request) -> Response:
        try:
            prompt, cfg = _parse_generation_body(await request.json())
        except (TokenRouteError, ValueError) as exc:
            return JSONResponse({"error": str(exc)}, status_code=400)
        client = LocalClient(gateway.server)
        stream = stream_generate(prompt, cfg, gateway.weights, gateway.router, client, clock=gateway.server.clock)
        for _ in stream:
            pass
        summary = stream.result.summary()
        gateway.store(summary)
        return JSONResponse(summary)

    @app.post("/v1/generate_stream")
    async def generate_streaming(request: Request) -> Response:
        try:
            prompt, cfg = _parse_generation_body(await request.json())
        except (TokenRouteError, ValueError) as exc:
            return JSONResponse({"error": str(exc)}, status_code=400)
        client = LocalClient(gateway.server)
        stream = stream_generate(prompt, cfg, gateway.weights, gateway.router, client, clock=gateway.server.clock)

        def event_lines():
            sequence = 0
            for token in stream:
                event = {
                    "type": "token",
                    "seq": sequence,
                    "text": token.text,
                    "source": token.source.serialize(),
                    "confidence": token.confidence,
                    "t": token.emitted_at,
                }
                sequence += 1
                yield json.dumps(event, ensure_ascii=False) + "\n"
            summary = stream.result.summary()
            gateway.store(summary)
            yield json.dumps({"type": "done", "seq": sequence, "summary": summary}, ensure_ascii=False) + "\n"

        return StreamingResponse(event_lines(), media_type="application/x-ndjson")

    @app.get("/v1/result/{session_id}")
    def result(session_id: str) -> Response:
        summary = gateway.fetch(session_id)
        if summary is None:
            return JSONResponse({"error": f"unknown session {session_id!r}"}, status_code=404)
        return JSONResponse(summary)
