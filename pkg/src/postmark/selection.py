"""Input-conditioned watermark word lists.

Selection runs in two stages: rank every table word by the cosine between the
text embedding and the word's (random) table vector, keep the top ``k'``, then
re-rank those candidates by the cosine between the text embedding and each
word's *own* embedding and keep the top ``k``. The second stage discards
candidates that are irrelevant to the text.
"""

from __future__ import annotations

import hashlib
import logging
import math
import threading
import warnings
from dataclasses import dataclass
from decimal import ROUND_HALF_UP, Decimal
from pathlib import Path

import numpy as np

from .backends import EmbeddingBackend, embed_batch, embed_text
from .exceptions import DimensionMismatchError, EmptyTextError, InputError
from .sectable import (
    CACHE_MAGIC,
    SecretTable,
    _atomic_write,
    decode_vector_file,
    encode_vector_file,
)

logger = logging.getLogger(__name__)

DEFAULT_RATIO = 0.12
DEFAULT_K_PRIME_MULTIPLIER = 2.0
DEFAULT_SUBLIST_SIZE = 10


@dataclass(frozen=True)
class InsertionPolicy:
    ratio: float = DEFAULT_RATIO
    k_prime_multiplier: float = DEFAULT_K_PRIME_MULTIPLIER
    sublist_size: int = DEFAULT_SUBLIST_SIZE

    def __post_init__(self):
        if not 0 < self.ratio <= 1:
            raise InputError("insertion ratio must be in (0, 1]")
        if self.k_prime_multiplier < 1:
            raise InputError("k' multiplier must be >= 1")
        if self.sublist_size < 1:
            raise InputError("sublist size must be positive")

    def to_dict(self):
        return {"ratio": self.ratio, "k_prime_multiplier": self.k_prime_multiplier,
                "sublist_size": self.sublist_size}


@dataclass(frozen=True)
class WatermarkWordList:
    words: tuple[str, ...]
    table_scores: tuple[float, ...]
    semantic_scores: tuple[float, ...]
    k: int
    k_prime: int
    source_text_hash: str
    table_id: str = ""

    def __len__(self):
        return len(self.words)

    def __iter__(self):
        return iter(self.words)

    def to_dict(self):
        return {
            "words": list(self.words),
            "table_scores": list(self.table_scores),
            "semantic_scores": list(self.semantic_scores),
            "k": self.k,
            "k_prime": self.k_prime,
            "source_text_hash": self.source_text_hash,
            "table_id": self.table_id,
        }


def count_words(text: str) -> int:
    """Whitespace tokens that contain at least one alphanumeric character."""
    return sum(1 for tok in text.split() if any(ch.isalnum() for ch in tok))


def target_word_count(text: str, ratio: float) -> int:
    """Number of words to insert: ``max(1, round_half_up(ratio * n_words))``."""
    if not 0 < ratio <= 1:
        raise InputError("insertion ratio must be in (0, 1]")
    n = count_words(text)
    if n < 1:
        raise EmptyTextError("text has no words")
    # Decimal keeps 0.12 * 25 == 3 exactly instead of 2.9999999999999996
    k = (Decimal(str(ratio)) * n).quantize(Decimal(1), rounding=ROUND_HALF_UP)
    return max(1, int(k))


def cosine(u, v) -> float:
    """Cosine of two unit vectors, clamped to [-1, 1]."""
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if u.shape != v.shape:
        raise DimensionMismatchError(f"cosine of vectors with shapes {u.shape} and {v.shape}")
    return float(min(1.0, max(-1.0, np.dot(u, v))))


def _cosines(matrix: np.ndarray, query: np.ndarray) -> np.ndarray:
    scores = matrix.astype(np.float64) @ np.asarray(query, dtype=np.float64)
    return np.clip(scores, -1.0, 1.0)


def _ranked(words, scores) -> list[int]:
    """Indices sorted by score descending, ties by word ascending."""
    return sorted(range(len(words)), key=lambda i: (-scores[i], words[i]))


class WordEmbeddingCache:
    """Word -> embedding cache keyed by embedder fingerprint.

    Backed by an optional ``PMWC`` file. Reads are lock-free; writes take a
    lock, and ``flush`` rewrites the file atomically.
    """

    def __init__(self, backend: EmbeddingBackend, path=None):
        self.backend = backend
        self.path = Path(path) if path else None
        self._vectors: dict[str, np.ndarray] = {}
        self._lock = threading.Lock()
        self._dirty = False
        if self.path and self.path.exists():
            _, fingerprint, _, words, vectors = decode_vector_file(self.path.read_bytes(), CACHE_MAGIC)
            if fingerprint == backend.fingerprint:
                self._vectors = dict(zip(words, vectors))
            else:
                logger.warning("ignoring word cache %s built for %s", self.path, fingerprint)

    def __len__(self):
        return len(self._vectors)

    def get(self, words) -> list[np.ndarray]:
        missing = [w for w in dict.fromkeys(words) if w not in self._vectors]
        if missing:
            fresh = embed_batch(self.backend, missing)
            with self._lock:
                self._vectors.update(zip(missing, fresh))
                self._dirty = True
        return [self._vectors[w] for w in words]

    def flush(self):
        if not self.path or not self._dirty:
            return
        with self._lock:
            words = sorted(self._vectors)
            data = encode_vector_file(CACHE_MAGIC, self.backend.fingerprint, words,
                                      np.stack([self._vectors[w] for w in words]))
            _atomic_write(self.path, data)
            self._dirty = False


def text_hash(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def select_watermark_words(text: str, table: SecretTable, policy: InsertionPolicy,
                           backend: EmbeddingBackend, cache: WordEmbeddingCache | None = None,
                           text_embedding: np.ndarray | None = None) -> WatermarkWordList:
    table.check_fingerprint(backend)
    k = target_word_count(text, policy.ratio)
    if k > len(table):
        warnings.warn(f"k={k} exceeds table size {len(table)}; clamping", stacklevel=2)
        k = len(table)
    k_prime = min(len(table), max(k, math.ceil(k * policy.k_prime_multiplier)))

    e_t = embed_text(backend, text) if text_embedding is None else text_embedding
    table_scores = _cosines(table.vectors, e_t)
    candidates = _ranked(table.words, table_scores)[:k_prime]
    cand_words = [table.words[i] for i in candidates]

    if cache is None:
        actual = embed_batch(backend, cand_words)
    else:
        actual = cache.get(cand_words)
    semantic = _cosines(np.stack(actual), e_t)
    keep = _ranked(cand_words, semantic)[:k]

    return WatermarkWordList(
        words=tuple(cand_words[i] for i in keep),
        table_scores=tuple(float(table_scores[candidates[i]]) for i in keep),
        semantic_scores=tuple(float(semantic[i]) for i in keep),
        k=k,
        k_prime=k_prime,
        source_text_hash=text_hash(text),
        table_id=table.table_id,
    )
