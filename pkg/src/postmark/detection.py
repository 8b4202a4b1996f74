"""Presence-score detection.

Detection re-derives the watermark word list from the candidate text exactly
as insertion did, then counts how many list words have a close match among
the text's tokens under a separate word-vector model (the match embedder).
"""

from __future__ import annotations

import logging
import re
from dataclasses import dataclass
from typing import Mapping, NamedTuple

import numpy as np

from .backends import EmbeddingBackend
from .exceptions import EmptyTextError, InputError, MalformedLineError
from .sectable import SecretTable, read_records
from .selection import InsertionPolicy, WordEmbeddingCache, select_watermark_words

logger = logging.getLogger(__name__)

DEFAULT_TAU = 0.7
_TOKEN_RE = re.compile(r"[^\W\d_]+(?:['-][^\W\d_]+)*")


def text_tokens(text: str) -> list[str]:
    """Unique case-folded alphabetic tokens in order of first appearance."""
    return list(dict.fromkeys(_TOKEN_RE.findall(text.casefold())))


class MatchEmbedder:
    """Word vectors used only to decide whether a list word appears in a text.

    Keys are case-folded; every vector is stored with unit norm. Words missing
    from the vocabulary can only match by exact string equality.
    """

    oov_policy = "exact-string-fallback"

    def __init__(self, vectors: Mapping[str, np.ndarray]):
        if not vectors:
            raise InputError("match embedder vocabulary is empty")
        rows: dict[str, np.ndarray] = {}
        dim = None
        for word, vec in vectors.items():
            key = word.casefold()
            if key in rows:
                continue
            vec = np.asarray(vec, dtype=np.float64).ravel()
            if dim is None:
                dim = vec.size
            elif vec.size != dim:
                raise InputError(f"vector for {word!r} has dimension {vec.size}, expected {dim}")
            norm = np.linalg.norm(vec)
            if norm == 0 or not np.isfinite(norm):
                raise InputError(f"vector for {word!r} is zero or non-finite")
            rows[key] = vec / norm
        self.words = tuple(rows)
        self.matrix = np.asarray(list(rows.values()), dtype=np.float32)
        self.matrix.setflags(write=False)
        self.index = {w: i for i, w in enumerate(self.words)}

    @property
    def dimension(self) -> int:
        return int(self.matrix.shape[1])

    def __len__(self):
        return len(self.words)

    def __contains__(self, word):
        return word.casefold() in self.index

    def vector(self, word: str) -> np.ndarray:
        return self.matrix[self.index[word.casefold()]]

    def similarity(self, a: str, b: str) -> float:
        a, b = a.casefold(), b.casefold()
        if a == b:
            return 1.0
        if a not in self.index or b not in self.index:
            return 0.0
        return float(np.clip(np.dot(self.vector(a).astype(np.float64), self.vector(b)), -1.0, 1.0))

    @classmethod
    def load(cls, path, limit: int | None = None) -> "MatchEmbedder":
        """Read a GloVe/paragram style text file: ``word v1 v2 ... vd`` per line.

        A leading word2vec ``count dim`` header line is tolerated.
        """
        vectors: dict[str, np.ndarray] = {}
        dim = None
        with open(path, encoding="utf-8", errors="replace") as fh:
            for lineno, line in enumerate(fh, 1):
                parts = line.rstrip().split(" ")
                if not parts or not parts[0]:
                    continue
                if lineno == 1 and len(parts) == 2 and all(p.isdigit() for p in parts):
                    continue
                try:
                    vec = np.array(parts[1:], dtype=np.float64)
                except ValueError:
                    raise MalformedLineError(path, lineno, "non-numeric vector component") from None
                if dim is None:
                    dim = vec.size
                    if dim == 0:
                        raise MalformedLineError(path, lineno, "no vector components")
                elif vec.size != dim:
                    raise MalformedLineError(path, lineno, f"dimension {vec.size}, expected {dim}")
                vectors.setdefault(parts[0], vec)
                if limit and len(vectors) >= limit:
                    break
        return cls(vectors)


class Match(NamedTuple):
    list_word: str
    text_word: str | None
    similarity: float


@dataclass(frozen=True)
class DetectionResult:
    score: float
    matched: tuple[Match, ...]
    list_size: int
    threshold: float | None = None
    verdict: bool | None = None
    table_id: str = ""
    words: tuple[str, ...] = ()

    @property
    def matched_count(self) -> int:
        return len(self.matched)

    def to_dict(self, expose_matches: bool = False, digits: int = 6) -> dict:
        out = {
            "score": round(self.score, digits),
            "matched_count": self.matched_count,
            "list_size": self.list_size,
            "threshold": None if self.threshold is None else round(self.threshold, digits),
            "verdict": self.verdict,
            "table_id": self.table_id,
        }
        if expose_matches:
            out["matched_words"] = [
                {"list_word": m.list_word, "text_word": m.text_word,
                 "similarity": round(m.similarity, digits)} for m in self.matched]
        return out


class _TextIndex:
    """Tokens of one candidate text, with the in-vocabulary ones stacked for matching."""

    def __init__(self, tokens, match_embedder: MatchEmbedder | None):
        self.tokens = list(dict.fromkeys(t.casefold() for t in tokens))
        self.token_set = set(self.tokens)
        self.match_embedder = match_embedder
        if match_embedder is not None:
            self.known = sorted(t for t in self.token_set if t in match_embedder.index)
            rows = [match_embedder.index[t] for t in self.known]
            self.matrix = match_embedder.matrix[rows].astype(np.float64)
        else:
            self.known = []
            self.matrix = np.zeros((0, 1))

    def best(self, list_word: str) -> tuple[str | None, float]:
        w = list_word.casefold()
        if w in self.token_set:
            return w, 1.0
        me = self.match_embedder
        if me is None or w not in me.index or not self.known:
            return None, 0.0
        sims = np.clip(self.matrix @ me.vector(w).astype(np.float64), -1.0, 1.0)
        # self.known is sorted, so argmax picks the lexicographically first among ties
        i = int(np.argmax(sims))
        return self.known[i], float(sims[i])


def word_present(list_word: str, text_tokens_, match_embedder: MatchEmbedder | None,
                 tau: float = DEFAULT_TAU) -> tuple[bool, str | None, float]:
    """Whether ``list_word`` has a match with cosine >= ``tau`` among the tokens."""
    _check_tau(tau)
    best, sim = _TextIndex(text_tokens_, match_embedder).best(list_word)
    return sim >= tau, best, sim


def _check_tau(tau):
    if not 0 < tau <= 1:
        raise InputError("tau must be in (0, 1]")


def match_words(text: str, words, match_embedder: MatchEmbedder | None,
                tau: float = DEFAULT_TAU) -> list[Match]:
    """Matches for a fixed word list; the building block of the presence score."""
    _check_tau(tau)
    index = _TextIndex(text_tokens(text), match_embedder)
    out = []
    for w in words:
        best, sim = index.best(w)
        if sim >= tau:
            out.append(Match(w, best, sim))
    return out


def presence_score(text: str, table: SecretTable, policy: InsertionPolicy, backend: EmbeddingBackend,
                   match_embedder: MatchEmbedder | None, tau: float = DEFAULT_TAU,
                   cache: WordEmbeddingCache | None = None) -> DetectionResult:
    if not text or not text.strip():
        raise EmptyTextError("cannot score empty text")
    word_list = select_watermark_words(text, table, policy, backend, cache=cache)
    if not word_list.words:
        raise InputError("derived word list is empty")
    matched = match_words(text, word_list.words, match_embedder, tau)
    return DetectionResult(
        score=len(matched) / len(word_list.words),
        matched=tuple(matched),
        list_size=len(word_list.words),
        table_id=table.table_id,
        words=word_list.words,
    )


def apply_threshold(result: DetectionResult, threshold: float) -> DetectionResult:
    return DetectionResult(result.score, result.matched, result.list_size, threshold,
                           result.score >= threshold, result.table_id, result.words)


def detect(text: str, table: SecretTable, threshold: float, backend: EmbeddingBackend,
           match_embedder: MatchEmbedder | None, policy: InsertionPolicy | None = None,
           tau: float = DEFAULT_TAU, cache: WordEmbeddingCache | None = None) -> DetectionResult:
    """Score ``text`` and flag it as watermarked when the score is >= ``threshold``."""
    result = presence_score(text, table, policy or InsertionPolicy(), backend, match_embedder, tau, cache)
    return apply_threshold(result, threshold)


class MatchEmbedderEval(NamedTuple):
    positive: float
    negative: float
    used: int
    skipped: int


def evaluate_match_embedder(pairs_file, match_embedder: MatchEmbedder) -> MatchEmbedderEval:
    """Mean cosine (x100) of word/synonym and word/irrelevant-word pairs.

    Triples with any member outside the vocabulary are skipped and counted.
    """
    pos, neg = [], []
    skipped = 0
    for lineno, fields in read_records(pairs_file):
        if len(fields) < 3:
            raise MalformedLineError(pairs_file, lineno, "expected word<TAB>synonym<TAB>irrelevant")
        word, syn, irr = fields[:3]
        if not all(w in match_embedder for w in (word, syn, irr)):
            skipped += 1
            continue
        pos.append(match_embedder.similarity(word, syn))
        neg.append(match_embedder.similarity(word, irr))
    if skipped:
        logger.info("skipped %d triples with out-of-vocabulary words", skipped)
    if not pos:
        raise InputError("no usable triples")
    return MatchEmbedderEval(100.0 * float(np.mean(pos)), 100.0 * float(np.mean(neg)), len(pos), skipped)
