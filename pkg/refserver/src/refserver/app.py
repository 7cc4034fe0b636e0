"""FastAPI application implementing the logits wire protocol.

Endpoints (all JSON, UTF-8, field names fixed):
    POST /v1/tokenize      {"text"}                      -> {"token_ids", "token_texts"}
    POST /v1/detokenize    {"token_ids"}                 -> {"text"}
    POST /v1/next_token    {"context_token_ids","top_n"} -> {"entries", "truncated_mass", "eos_id"}
    GET  /v1/model_info                                  -> {"name","vocab_size","eos_id","max_context"}
Non-200 responses carry {"error": str}.  Inference is serialized behind a
lock: correctness over throughput, this serves smoke tests, not traffic.
"""

from __future__ import annotations

import threading

from fastapi import FastAPI, Request
from fastapi.exceptions import RequestValidationError
from fastapi.responses import JSONResponse
from pydantic import BaseModel, Field

from .adapters import ModelAdapter


class TokenizeRequest(BaseModel):
    text: str


class DetokenizeRequest(BaseModel):
    token_ids: list[int]


class NextTokenRequest(BaseModel):
    context_token_ids: list[int]
    top_n: int | None = Field(default=None, ge=1)


def _error(status: int, message: str) -> JSONResponse:
    return JSONResponse(status_code=status, content={"error": message})


def _round_sig(value: float, digits: int = 10) -> float:
    # 10 significant digits: enough that confidence replay at 1e-6 is meaningful.
    return float(f"{value:.{digits}g}")


def create_app(adapter: ModelAdapter, default_top_n: int = 10) -> FastAPI:
    app = FastAPI(title="refserver", docs_url=None, redoc_url=None)
    inference_lock = threading.Lock()

    @app.exception_handler(RequestValidationError)
    async def malformed_request(_request: Request, exc: RequestValidationError):
        return _error(400, f"malformed request: {exc.errors()[0].get('msg', 'invalid body')}")

    @app.get("/v1/model_info")
    def model_info():
        return {
            "name": adapter.name,
            "vocab_size": adapter.vocab_size,
            "eos_id": adapter.eos_id,
            "max_context": adapter.max_context,
        }

    @app.post("/v1/tokenize")
    def tokenize(request: TokenizeRequest):
        try:
            ids = adapter.tokenize(request.text)
        except ValueError as exc:
            return _error(400, str(exc))
        return {"token_ids": ids, "token_texts": [adapter.token_text(i) for i in ids]}

    @app.post("/v1/detokenize")
    def detokenize(request: DetokenizeRequest):
        try:
            text = adapter.detokenize(request.token_ids)
        except ValueError as exc:
            return _error(400, str(exc))
        return {"text": text}

    @app.post("/v1/next_token")
    def next_token(request: NextTokenRequest):
        context = request.context_token_ids
        if not context:
            return _error(400, "context_token_ids must be non-empty")
        if len(context) > adapter.max_context:
            return _error(400, "context_overflow")
        top_n = request.top_n if request.top_n is not None else default_top_n
        try:
            with inference_lock:
                probs = adapter.next_token_probs(context)
        except ValueError as exc:
            return _error(400, str(exc))
        ranked = sorted(range(len(probs)), key=lambda i: (-probs[i], i))
        kept = ranked[: min(top_n, len(probs))]
        entries = [
            {"id": i, "text": adapter.token_text(i), "prob": _round_sig(probs[i])}
            for i in kept
        ]
        truncated = max(0.0, min(1.0, 1.0 - sum(probs[i] for i in kept)))
        return {
            "entries": entries,
            "truncated_mass": _round_sig(truncated),
            "eos_id": adapter.eos_id,
        }

    return app


def create_unavailable_app(message: str) -> FastAPI:
    """Served when the model failed to load: every endpoint reports 503."""
    app = FastAPI(title="refserver (unavailable)", docs_url=None, redoc_url=None)

    @app.api_route("/v1/{_rest:path}", methods=["GET", "POST"])
    def unavailable(_rest: str):
        return _error(503, f"model unavailable: {message}")

    return app
