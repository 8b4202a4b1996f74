"""Embedding and instruction-following backends.

Two transports are supported: an OpenAI-compatible JSON-over-HTTP client and
deterministic in-process mocks for offline work. All embedding vectors leaving
this module are ``float32`` arrays with unit L2 norm, so cosine similarity is a
plain dot product everywhere else in the package.
"""

from __future__ import annotations

import functools
import hashlib
import logging
import os
import re
import time
from abc import ABC, abstractmethod
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import httpx
import numpy as np

from .exceptions import (
    BatchEmbeddingError,
    DimensionMismatchError,
    EmptyResponseError,
    EmptyTextError,
    InputError,
    TransportError,
)

logger = logging.getLogger(__name__)

EMBEDDING = "embedding"
INSTRUCTION = "instruction"
REMOTE = "remote-http"
MOCK = "mock"

MIN_MOCK_DIMENSION = 8
_MOCK_TOKEN_RE = re.compile(r"[a-z0-9]+(?:['-][a-z0-9]+)*")
_RETRY_STATUS = {408, 409, 429, 500, 502, 503, 504}


def normalize(values) -> np.ndarray:
    """Return ``values`` as a unit-norm float32 vector."""
    v = np.asarray(values, dtype=np.float64).ravel()
    norm = np.sqrt(np.dot(v, v))
    if not np.isfinite(norm) or norm == 0.0:
        raise DimensionMismatchError("cannot normalize a zero or non-finite vector")
    return (v / norm).astype(np.float32)


@dataclass(frozen=True)
class BackendDescriptor:
    """Configuration for one backend.

    ``mode`` only matters for mock instruction backends and names the canned
    behaviour (``echo``, ``oracle-inserter``, ``identity-paraphraser``,
    ``synonym-swap``). ``dimension`` is the mock embedding width, or for remote
    embedders an optional expected width that responses are checked against.
    """

    kind: str
    transport: str
    endpoint: str = ""
    model_id: str = ""
    auth_token_env: str = ""
    timeout: float = 60.0
    max_retries: int = 2
    seed: int | None = None
    dimension: int | None = None
    mode: str = ""
    options: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if self.kind not in (EMBEDDING, INSTRUCTION):
            raise InputError(f"unknown backend kind {self.kind!r}")
        if self.transport not in (REMOTE, MOCK):
            raise InputError(f"unknown backend transport {self.transport!r}")
        if self.max_retries < 0:
            raise InputError("max_retries must be non-negative")
        if self.timeout <= 0:
            raise InputError("timeout must be positive")
        if self.transport == REMOTE:
            if not self.endpoint or not self.model_id:
                raise InputError("remote-http backends need an endpoint and a model id")
        else:
            if self.seed is None:
                raise InputError("mock backends need a seed")
            if not 0 <= int(self.seed) < 2**64:
                raise InputError("mock seed must be a 64-bit unsigned integer")
        if self.dimension is not None and self.dimension < 1:
            raise InputError("dimension must be positive")

    def to_dict(self) -> dict:
        return {k: v for k, v in asdict(self).items() if v not in (None, "", {})}

    @classmethod
    def from_dict(cls, data: dict) -> "BackendDescriptor":
        known = {f for f in cls.__dataclass_fields__}
        data = {k.replace("-", "_"): v for k, v in data.items()}
        unknown = set(data) - known
        if unknown:
            raise InputError(f"unknown backend fields: {sorted(unknown)}")
        return cls(**data)

    @classmethod
    def parse(cls, kind: str, spec: str) -> "BackendDescriptor":
        """Parse a compact ``transport:key=value,...`` string.

        >>> BackendDescriptor.parse("embedding", "mock:seed=7,dimension=64").dimension
        64
        """
        transport, _, rest = spec.partition(":")
        transport = {"remote": REMOTE, "http": REMOTE}.get(transport, transport)
        aliases = {"model": "model_id", "dim": "dimension", "token_env": "auth_token_env",
                   "retries": "max_retries"}
        fields = {}
        for item in filter(None, rest.split(",")):
            key, sep, value = item.partition("=")
            if not sep:
                raise InputError(f"backend option {item!r} is not key=value")
            key = aliases.get(key.strip(), key.strip()).replace("-", "_")
            fields[key] = value.strip()
        for key, conv in (("seed", int), ("dimension", int), ("max_retries", int), ("timeout", float)):
            if key in fields:
                try:
                    fields[key] = conv(fields[key])
                except ValueError:
                    raise InputError(f"backend option {key} has invalid value {fields[key]!r}") from None
        known = set(cls.__dataclass_fields__)
        options = {k: fields.pop(k) for k in list(fields) if k not in known}
        return cls.from_dict({"kind": kind, "transport": transport, **fields, "options": options})


@dataclass(frozen=True)
class InstructionRequest:
    user_text: str
    system_text: str = ""
    temperature: float = 0.0
    max_output_tokens: int = 2048

    def __post_init__(self):
        if not self.user_text:
            raise InputError("instruction request needs non-empty user text")
        if self.temperature < 0:
            raise InputError("temperature must be non-negative")
        if self.max_output_tokens < 1:
            raise InputError("max_output_tokens must be positive")


class EmbeddingBackend(ABC):
    model_id: str
    dimension: int

    @property
    def fingerprint(self) -> str:
        return f"{self.model_id}:{self.dimension}"

    @abstractmethod
    def embed_raw(self, texts: Sequence[str]) -> list[np.ndarray]:
        """Embed already-validated texts; returns unit vectors in input order."""


class InstructionBackend(ABC):
    model_id: str

    @abstractmethod
    def generate(self, request: InstructionRequest) -> str:
        """Return the raw model output for ``request``."""


def tokenize_mock(text: str) -> list[str]:
    return _MOCK_TOKEN_RE.findall(text.lower())


@functools.lru_cache(maxsize=65536)
def _hashed_word_vector(seed: int, word: str, dimension: int) -> np.ndarray:
    key = seed.to_bytes(8, "little")
    digest = hashlib.blake2b(word.encode("utf-8"), key=key, digest_size=16).digest()
    rng = np.random.Generator(np.random.PCG64(int.from_bytes(digest, "little")))
    v = rng.standard_normal(dimension)
    v /= np.linalg.norm(v)
    v.setflags(write=False)
    return v


def mock_embedding(seed: int, text: str, dimension: int) -> np.ndarray:
    """Bag-of-hashed-words embedding.

    Each lowercase word gets a pseudo-random unit vector derived from
    ``(seed, word)``; the text embedding is the normalized mean over word
    occurrences. Texts that share most of their words land close together.
    """
    if dimension < MIN_MOCK_DIMENSION:
        raise InputError(f"mock embedding dimension must be >= {MIN_MOCK_DIMENSION}")
    words = tokenize_mock(text)
    if not words:
        raise EmptyTextError(f"no tokens in text {text[:40]!r}")
    acc = np.zeros(dimension)
    for w in words:
        acc += _hashed_word_vector(int(seed), w, dimension)
    return normalize(acc / len(words))


class MockEmbeddingBackend(EmbeddingBackend):
    def __init__(self, seed: int, dimension: int = 256, model_id: str = "mock-embed"):
        if dimension < MIN_MOCK_DIMENSION:
            raise InputError(f"mock embedding dimension must be >= {MIN_MOCK_DIMENSION}")
        self.seed = int(seed)
        self.dimension = int(dimension)
        self.model_id = model_id

    def embed_raw(self, texts):
        return [mock_embedding(self.seed, t, self.dimension) for t in texts]

    def __repr__(self):
        return f"MockEmbeddingBackend(seed=<secret>, dimension={self.dimension})"


class _HttpMixin:
    def _init_http(self, descriptor: BackendDescriptor, transport=None, backoff: float = 0.5):
        self.endpoint = descriptor.endpoint.rstrip("/")
        self.model_id = descriptor.model_id
        self.max_retries = descriptor.max_retries
        self.backoff = backoff
        headers = {"Content-Type": "application/json"}
        if descriptor.auth_token_env:
            token = os.environ.get(descriptor.auth_token_env, "")
            if token:
                headers["Authorization"] = f"Bearer {token}"
            else:
                logger.warning("auth token variable %s is unset", descriptor.auth_token_env)
        self._client = httpx.Client(timeout=descriptor.timeout, headers=headers, transport=transport)

    def _post(self, path: str, payload: dict) -> dict:
        url = f"{self.endpoint}/{path}"
        attempts = self.max_retries + 1
        last = None
        for attempt in range(1, attempts + 1):
            try:
                resp = self._client.post(url, json=payload)
            except httpx.HTTPError as exc:
                last = f"{type(exc).__name__}: {exc}"
            else:
                if resp.status_code < 400:
                    try:
                        return resp.json()
                    except ValueError:
                        last = "response body is not JSON"
                elif resp.status_code in _RETRY_STATUS:
                    last = f"HTTP {resp.status_code}"
                else:
                    raise TransportError(f"POST {url}: HTTP {resp.status_code}: {resp.text[:200]}",
                                         attempts=attempt)
            logger.debug("POST %s attempt %d/%d failed: %s", url, attempt, attempts, last)
            if attempt < attempts and self.backoff:
                time.sleep(self.backoff * 2 ** (attempt - 1))
        raise TransportError(f"POST {url} failed after {attempts} attempts: {last}", attempts=attempts)

    def close(self):
        self._client.close()


class RemoteEmbeddingBackend(_HttpMixin, EmbeddingBackend):
    """Client for ``POST {endpoint}/embeddings`` (OpenAI-compatible)."""

    def __init__(self, descriptor: BackendDescriptor, transport=None, backoff: float = 0.5,
                 batch_size: int = 256):
        self._init_http(descriptor, transport, backoff)
        self.batch_size = batch_size
        self._dimension = descriptor.dimension

    @property
    def dimension(self) -> int:
        if self._dimension is None:
            self._dimension = len(self._request(["dimension probe"])[0])
        return self._dimension

    def _request(self, texts):
        body = self._post("embeddings", {"model": self.model_id, "input": list(texts)})
        data = body.get("data") if isinstance(body, dict) else None
        if not isinstance(data, list) or len(data) != len(texts):
            raise EmptyResponseError(f"expected {len(texts)} embeddings in response")
        # OpenAI may reorder; "index" is authoritative when present
        data = sorted(data, key=lambda item: item.get("index", 0)) if all(
            "index" in item for item in data) else data
        return [item["embedding"] for item in data]

    def embed_raw(self, texts):
        out = []
        for start in range(0, len(texts), self.batch_size):
            chunk = texts[start:start + self.batch_size]
            for offset, raw in enumerate(self._request(chunk)):
                if len(raw) != self.dimension:
                    raise BatchEmbeddingError(start + offset, DimensionMismatchError(
                        f"expected dimension {self.dimension}, got {len(raw)}"))
                out.append(normalize(raw))
        return out


class RemoteInstructionBackend(_HttpMixin, InstructionBackend):
    """Client for ``POST {endpoint}/chat/completions`` (OpenAI-compatible)."""

    def __init__(self, descriptor: BackendDescriptor, transport=None, backoff: float = 0.5):
        self._init_http(descriptor, transport, backoff)

    def generate(self, request):
        messages = []
        if request.system_text:
            messages.append({"role": "system", "content": request.system_text})
        messages.append({"role": "user", "content": request.user_text})
        body = self._post("chat/completions", {
            "model": self.model_id,
            "messages": messages,
            "temperature": request.temperature,
            "max_tokens": request.max_output_tokens,
        })
        try:
            content = body["choices"][0]["message"]["content"]
        except (KeyError, IndexError, TypeError):
            raise EmptyResponseError("chat completion response has no message content") from None
        usage = body.get("usage") if isinstance(body, dict) else None
        if usage:
            logger.debug("token usage: %s", usage)
        return content or ""


class EchoInstructionBackend(InstructionBackend):
    """Returns the user text unchanged."""

    model_id = "mock-echo"

    def generate(self, request):
        return request.user_text


class CallableInstructionBackend(InstructionBackend):
    """Wraps a ``fn(user_text) -> str``; counts calls and keeps the prompts it saw."""

    def __init__(self, fn: Callable[[str], str], model_id: str = "mock-callable"):
        self.fn = fn
        self.model_id = model_id
        self.calls: list[str] = []

    def generate(self, request):
        self.calls.append(request.user_text)
        return self.fn(request.user_text)


def _check_text(text) -> str:
    if not isinstance(text, str) or not text.strip():
        raise EmptyTextError("text is empty")
    return text


def embed_text(backend: EmbeddingBackend, text: str) -> np.ndarray:
    vec = backend.embed_raw([_check_text(text)])[0]
    if vec.shape != (backend.dimension,):
        raise DimensionMismatchError(f"expected dimension {backend.dimension}, got {vec.shape}")
    return vec


def embed_batch(backend: EmbeddingBackend, texts: Sequence[str]) -> list[np.ndarray]:
    texts = list(texts)
    for i, t in enumerate(texts):
        try:
            _check_text(t)
        except EmptyTextError as exc:
            raise BatchEmbeddingError(i, exc) from exc
    if not texts:
        return []
    vecs = backend.embed_raw(texts)
    for i, v in enumerate(vecs):
        if v.shape != (backend.dimension,):
            raise BatchEmbeddingError(i, DimensionMismatchError(
                f"expected dimension {backend.dimension}, got {v.shape}"))
    return vecs


def complete(backend: InstructionBackend, request: InstructionRequest) -> str:
    out = backend.generate(request)
    out = (out or "").strip()
    if not out:
        raise EmptyResponseError(f"{backend.model_id} returned an empty response")
    return out


def make_embedding_backend(descriptor: BackendDescriptor, **kwargs) -> EmbeddingBackend:
    if descriptor.kind != EMBEDDING:
        raise InputError("descriptor is not an embedding backend")
    if descriptor.transport == MOCK:
        return MockEmbeddingBackend(descriptor.seed, descriptor.dimension or 256,
                                    model_id=descriptor.model_id or "mock-embed")
    return RemoteEmbeddingBackend(descriptor, **kwargs)


def make_instruction_backend(descriptor: BackendDescriptor, **kwargs) -> InstructionBackend:
    if descriptor.kind != INSTRUCTION:
        raise InputError("descriptor is not an instruction backend")
    if descriptor.transport == REMOTE:
        return RemoteInstructionBackend(descriptor, **kwargs)
    from . import mocks

    try:
        factory = mocks.INSTRUCTION_MOCKS[descriptor.mode or "echo"]
    except KeyError:
        raise InputError(f"unknown mock instruction mode {descriptor.mode!r}; "
                         f"choose from {sorted(mocks.INSTRUCTION_MOCKS)}") from None
    return factory(descriptor)
