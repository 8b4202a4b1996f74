"""The secret word-embedding table and its on-disk format.

A table maps every vocabulary word to the embedding of an unrelated random
document. The assignment is a seeded Fisher-Yates permutation driven by a
Philox counter-based generator keyed with the secret seed, so a given
``(vocabulary, snippets, seed, embedder)`` always yields the same table.

File layout (all integers little-endian)::

    b"PMRK" | version u16 | fingerprint (u16 len + utf-8)
    [v2 only: metadata (u32 len + utf-8 JSON)]
    dimension u32 | count u32
    count x (word (u16 len + utf-8) | dimension x float32)
    crc32 u32 over every preceding byte
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import re
import struct
import zlib
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .backends import EmbeddingBackend, embed_batch
from .exceptions import (
    ChecksumError,
    EmptyVocabularyError,
    FingerprintMismatchError,
    FormatVersionError,
    InputError,
    InsufficientSnippetsError,
    KeyMaterialError,
    MalformedLineError,
    TruncatedFileError,
)

logger = logging.getLogger(__name__)

TABLE_MAGIC = b"PMRK"
CACHE_MAGIC = b"PMWC"
FORMAT_VERSION = 2
SUPPORTED_VERSIONS = (1, 2)
GENERATOR_NAME = "philox4x64-10/fisher-yates/rejection-u64"

WORD_RE = re.compile(r"^[a-z][a-z'-]*$")
CONTENT_TAGS = ("noun", "verb", "adjective", "adverb")
_TAG_ALIASES = {
    "noun": "noun", "n": "noun", "nn": "noun", "nns": "noun",
    "verb": "verb", "v": "verb", "vb": "verb", "vbd": "verb", "vbg": "verb",
    "vbn": "verb", "vbp": "verb", "vbz": "verb",
    "adjective": "adjective", "adj": "adjective", "a": "adjective", "jj": "adjective",
    "jjr": "adjective", "jjs": "adjective",
    "adverb": "adverb", "adv": "adverb", "r": "adverb", "rb": "adverb", "rbr": "adverb",
    "rbs": "adverb",
}


@dataclass(frozen=True, order=True)
class VocabularyEntry:
    word: str
    corpus_frequency: int
    pos_tag: str


def content_tag(tag: str) -> str | None:
    """Map a lexicon tag onto one of the four content classes, or None."""
    return _TAG_ALIASES.get(tag.strip().lower())


def read_records(path) -> Iterable[tuple[int, list[str]]]:
    """Yield ``(line_number, fields)`` for a TAB-separated UTF-8 file.

    Blank lines and ``#`` comments are skipped. Lines without a TAB fall back
    to whitespace splitting.
    """
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n").rstrip("\r")
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            fields = line.split("\t") if "\t" in line else line.split()
            yield lineno, [f.strip() for f in fields]


def build_vocabulary(frequency_file, pos_lexicon_file, frequency_floor: int = 1000) -> list[VocabularyEntry]:
    """Filter a corpus word-frequency list down to frequent lowercase content words.

    ``frequency_file`` holds ``word<TAB>count`` lines (an optional third column is
    a fallback POS tag); ``pos_lexicon_file`` holds ``word<TAB>tag`` lines, where
    the first listing of a word wins. Proper nouns, function words and anything
    below ``frequency_floor`` are dropped.
    """
    if frequency_floor < 1:
        raise InputError("frequency floor must be >= 1")

    lexicon: dict[str, str] = {}
    for lineno, fields in read_records(pos_lexicon_file):
        if len(fields) < 2 or not fields[0]:
            raise MalformedLineError(pos_lexicon_file, lineno, "expected word<TAB>tag")
        lexicon.setdefault(fields[0], fields[1])

    counts: Counter[str] = Counter()
    inline_tags: dict[str, str] = {}
    for lineno, fields in read_records(frequency_file):
        if len(fields) < 2 or not fields[0]:
            raise MalformedLineError(frequency_file, lineno, "expected word<TAB>count")
        try:
            count = int(fields[1])
        except ValueError:
            raise MalformedLineError(frequency_file, lineno, f"count {fields[1]!r} is not an integer") from None
        if count < 0:
            raise MalformedLineError(frequency_file, lineno, "negative count")
        counts[fields[0]] += count
        if len(fields) > 2:
            inline_tags.setdefault(fields[0], fields[2])

    entries = []
    for word, count in counts.items():
        if count < frequency_floor or not WORD_RE.match(word):
            continue
        raw_tag = lexicon.get(word, inline_tags.get(word))
        tag = content_tag(raw_tag) if raw_tag else None
        if tag is None:
            continue
        entries.append(VocabularyEntry(word, count, tag))
    if not entries:
        raise EmptyVocabularyError("no word survived the vocabulary filters")
    entries.sort()
    logger.info("vocabulary: %d words (floor=%d)", len(entries), frequency_floor)
    return entries


class KeyedGenerator:
    """Philox counter-based generator keyed by a 64-bit seed.

    Only raw 64-bit outputs are used, so the integer stream is fixed by the
    Philox4x64-10 definition rather than by numpy's sampling routines.
    """

    def __init__(self, seed: int):
        if not 0 <= int(seed) < 2**64:
            raise InputError("seed must be a 64-bit unsigned integer")
        self._bitgen = np.random.Philox(key=int(seed), counter=0)

    def next_u64(self) -> int:
        return int(self._bitgen.random_raw())

    def below(self, bound: int) -> int:
        """Uniform integer in ``[0, bound)`` by rejection sampling."""
        if bound < 1:
            raise ValueError("bound must be positive")
        limit = 2**64 - (2**64 % bound)
        while True:
            x = self.next_u64()
            if x < limit:
                return x % bound


def seeded_permutation(n: int, seed: int) -> list[int]:
    perm = list(range(n))
    rng = KeyedGenerator(seed)
    for i in range(n - 1, 0, -1):
        j = rng.below(i + 1)
        perm[i], perm[j] = perm[j], perm[i]
    return perm


def seed_digest(seed: int, fingerprint: str) -> str:
    return hashlib.blake2b(int(seed).to_bytes(8, "little"), key=fingerprint.encode("utf-8")[:64],
                           digest_size=16, person=b"pmrk-seed").hexdigest()


@dataclass(frozen=True, eq=False)
class SecretTable:
    """Immutable word -> unit-vector mapping, words sorted lexicographically."""

    embedder_fingerprint: str
    words: tuple[str, ...]
    vectors: np.ndarray
    table_id: str = ""
    seed_digest: str | None = None
    created_at: str | None = None
    generator: str = GENERATOR_NAME
    policy: dict | None = None
    _index: dict = field(init=False, repr=False)

    def __post_init__(self):
        vectors = np.array(self.vectors, dtype=np.float32, copy=True)
        if vectors.ndim != 2 or vectors.shape[0] != len(self.words):
            raise InputError("vectors must be a (len(words), dimension) matrix")
        if list(self.words) != sorted(set(self.words)):
            raise InputError("table words must be unique and sorted")
        vectors.setflags(write=False)
        object.__setattr__(self, "words", tuple(self.words))
        object.__setattr__(self, "vectors", vectors)
        object.__setattr__(self, "_index", {w: i for i, w in enumerate(self.words)})
        if not self.table_id:
            object.__setattr__(self, "table_id", content_id(self.embedder_fingerprint, self.words, vectors))

    @property
    def dimension(self) -> int:
        return int(self.vectors.shape[1])

    def __len__(self):
        return len(self.words)

    def __contains__(self, word):
        return word in self._index

    def vector(self, word: str) -> np.ndarray:
        return self.vectors[self._index[word]]

    def __eq__(self, other):
        if not isinstance(other, SecretTable):
            return NotImplemented
        return (self.embedder_fingerprint == other.embedder_fingerprint
                and self.words == other.words
                and self.vectors.tobytes() == other.vectors.tobytes()
                and self.table_id == other.table_id
                and self.seed_digest == other.seed_digest
                and self.created_at == other.created_at
                and self.policy == other.policy)

    __hash__ = None

    def check_fingerprint(self, backend: EmbeddingBackend):
        if backend.fingerprint != self.embedder_fingerprint:
            raise FingerprintMismatchError(
                f"table {self.table_id} was built with {self.embedder_fingerprint!r}, "
                f"active embedder is {backend.fingerprint!r}")

    def __repr__(self):
        return (f"SecretTable(table_id={self.table_id!r}, words={len(self.words)}, "
                f"dimension={self.dimension}, embedder={self.embedder_fingerprint!r})")


def content_id(fingerprint: str, words: Sequence[str], vectors: np.ndarray) -> str:
    h = hashlib.sha256(fingerprint.encode("utf-8"))
    for w in words:
        h.update(w.encode("utf-8") + b"\0")
    h.update(np.ascontiguousarray(vectors, dtype="<f4").tobytes())
    return h.hexdigest()[:16]


def read_snippets(path) -> list[str]:
    """Snippets from a ``.jsonl`` file (``text`` field) or one per line otherwise."""
    path = Path(path)
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            if path.suffix == ".jsonl":
                try:
                    text = json.loads(line)["text"]
                except (ValueError, KeyError, TypeError):
                    raise MalformedLineError(path, lineno, "expected a JSON object with a text field") from None
            else:
                text = line.rstrip("\n")
            if text.strip():
                out.append(text)
    return out


def build_sectable(vocabulary, snippet_file, seed: int, backend: EmbeddingBackend,
                   created_at: str | None = None, policy: dict | None = None) -> SecretTable:
    """Assign every vocabulary word to a distinct snippet embedding.

    The first ``len(vocabulary)`` unique snippets in file order are embedded;
    word ``i`` in sorted order receives snippet ``perm[i]`` of the seeded
    permutation.
    """
    words = sorted({e.word if isinstance(e, VocabularyEntry) else str(e) for e in vocabulary})
    if not words:
        raise EmptyVocabularyError("vocabulary is empty")
    unique = list(dict.fromkeys(read_snippets(snippet_file)))
    if len(unique) < len(words):
        raise InsufficientSnippetsError(
            f"need {len(words)} unique snippets for the vocabulary, found {len(unique)}")
    docs = embed_batch(backend, unique[:len(words)])
    perm = seeded_permutation(len(words), seed)
    vectors = np.stack([docs[j] for j in perm])
    table = SecretTable(
        embedder_fingerprint=backend.fingerprint,
        words=tuple(words),
        vectors=vectors,
        seed_digest=seed_digest(seed, backend.fingerprint),
        created_at=created_at,
        policy=policy,
    )
    logger.info("built table %s: %d words, dimension %d", table.table_id, len(words), table.dimension)
    return table


def _pack_str(s: str, width: str = "<H") -> bytes:
    raw = s.encode("utf-8")
    if len(raw) >= 2 ** (8 * struct.calcsize(width)):
        raise InputError(f"string too long to serialize: {s[:40]!r}")
    return struct.pack(width, len(raw)) + raw


def encode_vector_file(magic: bytes, fingerprint: str, words: Sequence[str], vectors: np.ndarray,
                       metadata: dict | None = None, version: int = FORMAT_VERSION) -> bytes:
    if version not in SUPPORTED_VERSIONS:
        raise FormatVersionError(f"cannot write format version {version}")
    vectors = np.ascontiguousarray(vectors, dtype="<f4")
    parts = [magic, struct.pack("<H", version), _pack_str(fingerprint)]
    if version >= 2:
        parts.append(_pack_str(json.dumps(metadata or {}, sort_keys=True, separators=(",", ":")), "<I"))
    n, dim = vectors.shape
    parts.append(struct.pack("<II", dim, n))
    for word, row in zip(words, vectors):
        parts.append(_pack_str(word))
        parts.append(row.tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


class _Reader:
    def __init__(self, data: bytes, end: int):
        self.data = data
        self.pos = 0
        self.end = end

    def take(self, n: int) -> bytes:
        if self.pos + n > self.end:
            raise TruncatedFileError("file ends in the middle of a record")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def string(self, width: str = "<H") -> str:
        (n,) = self.unpack(width)
        try:
            return self.take(n).decode("utf-8")
        except UnicodeDecodeError:
            raise ChecksumError("corrupted string field") from None


def decode_vector_file(data: bytes, magic: bytes):
    """Parse a vector file; returns ``(version, fingerprint, metadata, words, vectors)``."""
    if len(data) < 4 + 2 + 4:
        raise TruncatedFileError("file too short")
    if data[:4] != magic:
        raise KeyMaterialError(f"bad magic {data[:4]!r}, expected {magic!r}")
    r = _Reader(data, len(data) - 4)
    r.take(4)
    (version,) = r.unpack("<H")
    if version not in SUPPORTED_VERSIONS:
        raise FormatVersionError(f"unsupported format version {version}")
    fingerprint = r.string()
    metadata = {}
    if version >= 2:
        try:
            metadata = json.loads(r.string("<I"))
        except ValueError:
            raise ChecksumError("corrupted metadata block") from None
    dim, n = r.unpack("<II")
    words = []
    rows = []
    for _ in range(n):
        words.append(r.string())
        rows.append(r.take(4 * dim))
    if r.pos != r.end:
        raise ChecksumError("trailing bytes before checksum")
    (stored,) = struct.unpack("<I", data[-4:])
    if zlib.crc32(data[:-4]) & 0xFFFFFFFF != stored:
        raise ChecksumError("checksum mismatch")
    vectors = np.frombuffer(b"".join(rows), dtype="<f4").reshape(n, dim).astype(np.float32)
    return version, fingerprint, metadata, words, vectors


def _atomic_write(path, data: bytes):
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)


def save_sectable(table: SecretTable, path, version: int = FORMAT_VERSION):
    metadata = {
        "table_id": table.table_id,
        "seed_digest": table.seed_digest,
        "created_at": table.created_at,
        "generator": table.generator,
        "policy": table.policy,
    }
    metadata = {k: v for k, v in metadata.items() if v is not None}
    _atomic_write(path, encode_vector_file(TABLE_MAGIC, table.embedder_fingerprint, table.words,
                                           table.vectors, metadata, version))


def load_sectable(path) -> SecretTable:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise InputError(f"cannot read table file {path}: {exc}") from None
    _, fingerprint, meta, words, vectors = decode_vector_file(data, TABLE_MAGIC)
    return SecretTable(
        embedder_fingerprint=fingerprint,
        words=tuple(words),
        vectors=vectors,
        table_id=meta.get("table_id", ""),
        seed_digest=meta.get("seed_digest"),
        created_at=meta.get("created_at"),
        generator=meta.get("generator", GENERATOR_NAME),
        policy=meta.get("policy"),
    )


@dataclass
class FrequencyHistogram:
    """How many documents selected each word."""

    bins: dict[str, int]
    total_documents: int

    def fractions(self) -> dict[str, float]:
        return {w: c / self.total_documents for w, c in self.bins.items()}

    def share_below(self, fraction: float = 0.05) -> float:
        """Share of selected words chosen for fewer than ``fraction`` of documents."""
        if not self.bins:
            return 0.0
        return sum(c < fraction * self.total_documents for c in self.bins.values()) / len(self.bins)

    def share_above(self, fraction: float = 0.20) -> float:
        if not self.bins:
            return 0.0
        return sum(c > fraction * self.total_documents for c in self.bins.values()) / len(self.bins)

    def hubs(self, fraction: float = 0.20) -> list[str]:
        return sorted((w for w, c in self.bins.items() if c > fraction * self.total_documents),
                      key=lambda w: (-self.bins[w], w))

    def to_dict(self) -> dict:
        return {
            "total_documents": self.total_documents,
            "distinct_words": len(self.bins),
            "share_below_5pct": self.share_below(0.05),
            "share_above_20pct": self.share_above(0.20),
            "hubs": self.hubs(0.20),
            "bins": dict(sorted(self.bins.items(), key=lambda kv: (-kv[1], kv[0]))),
        }


def hubness_report(word_lists) -> FrequencyHistogram:
    word_lists = list(word_lists)
    if not word_lists:
        raise InputError("hubness report needs at least one word list")
    table_ids = {wl.table_id for wl in word_lists if wl.table_id}
    if len(table_ids) > 1:
        raise InputError(f"word lists come from different tables: {sorted(table_ids)}")
    bins: Counter[str] = Counter()
    for wl in word_lists:
        bins.update(set(wl.words))
    return FrequencyHistogram(dict(bins), len(word_lists))
