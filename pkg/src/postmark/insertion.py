"""Rewriting text so it contains the watermark words."""

from __future__ import annotations

import logging
import re
from dataclasses import dataclass

from .backends import InstructionBackend, InstructionRequest, complete
from .exceptions import DestructiveRewriteError, EmptyTextError, InputError
from .prompts import insertion_prompt
from .selection import InsertionPolicy, WatermarkWordList, count_words

logger = logging.getLogger(__name__)

DEFAULT_MAX_REPAIR_PASSES = 2
MIN_LENGTH_FRACTION = 0.30
_SUFFIXES = ("ing", "ed", "es", "ly", "s")
_TOKEN_RE = re.compile(r"[^\W_]+(?:['-][^\W_]+)*")


@dataclass(frozen=True)
class InsertionOutcome:
    watermarked_text: str
    inserted_words_confirmed: tuple[str, ...]
    missing_words: tuple[str, ...]
    passes: int
    length_before: int
    length_after: int

    def to_dict(self):
        return {
            "watermarked_text": self.watermarked_text,
            "inserted_words_confirmed": list(self.inserted_words_confirmed),
            "missing_words": list(self.missing_words),
            "passes": self.passes,
            "length_before": self.length_before,
            "length_after": self.length_after,
        }


def stems(word: str) -> set[str]:
    """The case-folded word plus every single-suffix strip that leaves >= 3 letters."""
    w = word.casefold()
    out = {w}
    for suffix in _SUFFIXES:
        if w.endswith(suffix) and len(w) - len(suffix) >= 3:
            out.add(w[: -len(suffix)])
    return out


def verify_presence(text: str, words) -> tuple[list[str], list[str]]:
    """Split ``words`` into those found in ``text`` and those missing.

    Matching is near-literal: a word counts as present when some token of the
    text shares a suffix-stripped stem with it ("resign" ~ "resigned").
    """
    text_stems = set()
    for tok in _TOKEN_RE.findall(text):
        text_stems |= stems(tok)
    confirmed, missing = [], []
    for w in words:
        (confirmed if stems(w) & text_stems else missing).append(w)
    return confirmed, missing


def _chunks(items, size):
    return [items[i:i + size] for i in range(0, len(items), size)]


def _rewrite(backend, text, words, temperature, max_output_tokens):
    request = InstructionRequest(user_text=insertion_prompt(text, words), temperature=temperature,
                                 max_output_tokens=max_output_tokens)
    before = count_words(text)
    for attempt in (1, 2):
        out = complete(backend, request)
        if count_words(out) >= MIN_LENGTH_FRACTION * before:
            return out
        logger.warning("rewrite shrank text from %d to %d words (attempt %d)", before,
                       count_words(out), attempt)
    raise DestructiveRewriteError(f"inserter shrank the text below {MIN_LENGTH_FRACTION:.0%} twice")


def insert_words(text: str, word_list, backend: InstructionBackend, policy: InsertionPolicy | None = None,
                 max_repair_passes: int = DEFAULT_MAX_REPAIR_PASSES, temperature: float = 0.0,
                 max_output_tokens: int = 2048) -> InsertionOutcome:
    """Ask the inserter to work the words into ``text`` one sublist at a time.

    Each sublist prompt sees the latest rewritten text. Words still missing
    afterwards get up to ``max_repair_passes`` extra prompts; whatever remains
    missing is reported rather than raised.
    """
    policy = policy or InsertionPolicy()
    words = list(word_list.words if isinstance(word_list, WatermarkWordList) else word_list)
    if not text or not text.strip():
        raise EmptyTextError("cannot insert words into empty text")
    if not words:
        raise InputError("word list is empty")
    if max_repair_passes < 0:
        raise InputError("max_repair_passes must be non-negative")

    working = text
    passes = 0
    for sublist in _chunks(words, policy.sublist_size):
        working = _rewrite(backend, working, sublist, temperature, max_output_tokens)
        passes += 1

    confirmed, missing = verify_presence(working, words)
    for _ in range(max_repair_passes):
        if not missing:
            break
        logger.info("repair pass for %d missing words", len(missing))
        working = _rewrite(backend, working, missing, temperature, max_output_tokens)
        passes += 1
        confirmed, missing = verify_presence(working, words)

    if missing:
        logger.warning("%d of %d words missing after insertion: %s", len(missing), len(words), missing)
    return InsertionOutcome(
        watermarked_text=working,
        inserted_words_confirmed=tuple(confirmed),
        missing_words=tuple(missing),
        passes=passes,
        length_before=count_words(text),
        length_after=count_words(working),
    )
