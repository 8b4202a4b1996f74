"""JSON-over-HTTP service exposing watermark and detect.

The table, caches and match embedder are loaded once and only read after
that. Matched words are withheld from ``/detect`` responses unless the
service was started with ``expose_matches`` because they leak table content.
"""

from __future__ import annotations

import json
import logging
import threading
from dataclasses import dataclass, field

from fastapi import FastAPI, Request
from fastapi.concurrency import run_in_threadpool
from fastapi.responses import JSONResponse

from .backends import EmbeddingBackend, InstructionBackend
from .detection import DEFAULT_TAU, MatchEmbedder, detect, presence_score
from .exceptions import BackendError, BatchEmbeddingError, InputError, PostMarkError
from .insertion import DEFAULT_MAX_REPAIR_PASSES, insert_words
from .sectable import SecretTable
from .selection import InsertionPolicy, WordEmbeddingCache, select_watermark_words

logger = logging.getLogger(__name__)


@dataclass
class ServiceState:
    table: SecretTable | None = None
    embedder: EmbeddingBackend | None = None
    inserter: InstructionBackend | None = None
    match_embedder: MatchEmbedder | None = None
    threshold: float | None = None
    policy: InsertionPolicy = field(default_factory=InsertionPolicy)
    tau: float = DEFAULT_TAU
    max_repair_passes: int = DEFAULT_MAX_REPAIR_PASSES
    expose_matches: bool = False
    cache: WordEmbeddingCache | None = None

    def load(self, table: SecretTable, embedder: EmbeddingBackend, **kwargs):
        table.check_fingerprint(embedder)
        for k, v in kwargs.items():
            if not hasattr(self, k):
                raise TypeError(f"unknown service setting {k}")
            setattr(self, k, v)
        self.embedder = embedder
        self.cache = self.cache or WordEmbeddingCache(embedder)
        # assigned last: requests see either no table or a fully configured state
        self.table = table

    @property
    def ready(self) -> bool:
        return self.table is not None


def _error(status: int, message: str) -> JSONResponse:
    return JSONResponse({"error": message}, status_code=status)


async def _read_text(request: Request):
    try:
        payload = json.loads(await request.body())
    except ValueError:
        return None, _error(400, "body is not valid JSON")
    if not isinstance(payload, dict) or not isinstance(payload.get("text"), str):
        return None, _error(400, 'body must be a JSON object with a string "text" field')
    if not payload["text"].strip():
        return None, _error(422, "text is empty")
    return payload["text"], None


def create_app(state: ServiceState | None = None, parallelism: int = 4) -> FastAPI:
    """Build the app around ``state``; until a table is loaded every endpoint answers 503."""
    if parallelism < 1:
        raise InputError("parallelism must be positive")
    state = state or ServiceState()
    slots = threading.BoundedSemaphore(parallelism)
    app = FastAPI(title="postmark", docs_url=None, redoc_url=None)
    app.state.postmark = state

    def run(fn):
        with slots:
            try:
                return fn()
            except BatchEmbeddingError as exc:
                if isinstance(exc.cause, InputError):
                    return _error(422, str(exc))
                logger.warning("backend failure: %s", exc)
                return _error(502, f"backend failure: {exc}")
            except BackendError as exc:
                logger.warning("backend failure: %s", exc)
                return _error(502, f"backend failure: {exc}")
            except InputError as exc:
                return _error(422, str(exc))
            except PostMarkError as exc:
                logger.error("request failed: %s", exc)
                return _error(500, str(exc))

    @app.get("/health")
    def health():
        if not state.ready:
            return _error(503, "table not loaded")
        return {"status": "ok", "table_id": state.table.table_id,
                "embedder_fingerprint": state.table.embedder_fingerprint}

    @app.post("/watermark")
    async def watermark(request: Request):
        text, err = await _read_text(request)
        if err:
            return err
        if not state.ready or state.inserter is None:
            return _error(503, "table or inserter not loaded")

        def work():
            words = select_watermark_words(text, state.table, state.policy, state.embedder, cache=state.cache)
            outcome = insert_words(text, words, state.inserter, state.policy, state.max_repair_passes)
            return {"watermarked_text": outcome.watermarked_text,
                    "missing_words": list(outcome.missing_words)}

        return await run_in_threadpool(run, work)

    @app.post("/detect")
    async def detect_(request: Request):
        text, err = await _read_text(request)
        if err:
            return err
        if not state.ready:
            return _error(503, "table not loaded")

        def work():
            if state.threshold is None:
                result = presence_score(text, state.table, state.policy, state.embedder, state.match_embedder,
                                        state.tau, state.cache)
            else:
                result = detect(text, state.table, state.threshold, state.embedder, state.match_embedder,
                                state.policy, state.tau, state.cache)
            return result.to_dict(expose_matches=state.expose_matches)

        return await run_in_threadpool(run, work)

    return app

