"""Synthetic corpus, table and match-vector fixtures for offline pipeline tests.

Everything is a pure function of the seed. Words are pronounceable nonsense
strings so that nothing depends on real-language data; each content word has
one synonym whose match vector sits at cosine exactly ``SYNONYM_COSINE``.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from postmark.backends import MockEmbeddingBackend
from postmark.detection import MatchEmbedder
from postmark.sectable import SecretTable, build_sectable

SYNONYM_COSINE = 0.75
MATCH_DIM = 128
FUNCTION_WORDS = ("the", "of", "and", "a", "to", "in", "is", "was", "for", "on", "with", "as", "by", "at")

_ONSETS = "b c d f g h j k l m n p r s t v w z br ch cl dr fl gr pl sh st tr".split()
_VOWELS = "a e i o u ai ea oo".split()
_CODAS = "b d g k l m n p r s t x nd nt rk st".split()


def _syllables():
    return ["".join(p) for p in itertools.product(_ONSETS, _VOWELS, _CODAS)]


@dataclass
class World:
    words: list[str]
    topics: list[list[str]]
    synonyms: dict[str, str]
    match_vectors: dict[str, np.ndarray]
    rng_seed: int

    def document(self, rng: np.random.Generator, n_words: int) -> str:
        topic = self.topics[rng.integers(len(self.topics))]
        out = []
        for _ in range(n_words):
            u = rng.random()
            if u < 0.25:
                out.append(FUNCTION_WORDS[rng.integers(len(FUNCTION_WORDS))])
            elif u < 0.80:
                out.append(topic[rng.integers(len(topic))])
            else:
                out.append(self.words[rng.integers(len(self.words))])
        # sentences of ~12 words, capitalized, period-terminated
        sentences = []
        for i in range(0, len(out), 12):
            chunk = out[i:i + 12]
            sentences.append(" ".join([chunk[0].capitalize(), *chunk[1:]]) + ".")
        return " ".join(sentences)

    def documents(self, n_docs: int, min_words: int = 80, max_words: int = 140, seed: int = 0):
        rng = np.random.default_rng([self.rng_seed, seed])
        return [self.document(rng, int(rng.integers(min_words, max_words + 1))) for _ in range(n_docs)]

    def match_embedder(self) -> MatchEmbedder:
        return MatchEmbedder(self.match_vectors)


def make_world(n_words: int = 1500, n_topics: int = 25, topic_size: int = 60, seed: int = 0) -> World:
    rng = np.random.default_rng(seed)
    pool = _syllables()
    rng.shuffle(pool)
    # two-syllable words; the first n_words are content words, the next n_words their synonyms
    names = []
    seen = set()
    for a, b in zip(pool, pool[1:] + pool[:1]):
        w = a + b
        if w not in seen and w not in FUNCTION_WORDS:
            seen.add(w)
            names.append(w)
        if len(names) == 2 * n_words:
            break
    words, syns = names[:n_words], names[n_words:]
    topics = [list(rng.choice(words, size=topic_size, replace=False)) for _ in range(n_topics)]

    vectors = {}
    for w, s in zip(words, syns):
        v = rng.standard_normal(MATCH_DIM)
        v /= np.linalg.norm(v)
        u = rng.standard_normal(MATCH_DIM)
        u -= np.dot(u, v) * v
        u /= np.linalg.norm(u)
        vectors[w] = v
        vectors[s] = SYNONYM_COSINE * v + np.sqrt(1 - SYNONYM_COSINE**2) * u
    for w in FUNCTION_WORDS:
        v = rng.standard_normal(MATCH_DIM)
        vectors[w] = v / np.linalg.norm(v)
    return World(words, topics, dict(zip(words, syns)), vectors, seed)


def make_table(world: World, backend: MockEmbeddingBackend, tmp_path, n_vocab: int = 500,
               seed: int = 42) -> SecretTable:
    """Table over the first ``n_vocab`` content words, keyed on synthetic snippets."""
    snippets = world.documents(n_vocab, 60, 90, seed=10_000 + seed)
    path = tmp_path / f"snippets-{seed}.txt"
    path.write_text("\n".join(snippets) + "\n", encoding="utf-8")
    return build_sectable(sorted(world.words[:n_vocab]), path, seed, backend)
