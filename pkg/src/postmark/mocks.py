"""Deterministic instruction-backend mocks for offline pipelines and tests."""

from __future__ import annotations

import hashlib
import json
import re
from pathlib import Path

from .backends import CallableInstructionBackend, EchoInstructionBackend
from .exceptions import InputError
from .prompts import parse_insertion_prompt, parse_paraphrase_prompt


def oracle_inserter(drop=()):
    """Inserter that appends the requested words to the text verbatim.

    Words in ``drop`` are never inserted, which makes an adversarial inserter
    for exercising the repair loop.
    """
    dropped = {w.lower() for w in drop}

    def fn(prompt):
        text, words = parse_insertion_prompt(prompt)
        kept = [w for w in words if w.lower() not in dropped]
        return f"{text} {' '.join(kept)}".strip()

    return CallableInstructionBackend(fn, model_id="mock-oracle-inserter")


def identity_paraphraser():
    return CallableInstructionBackend(lambda prompt: parse_paraphrase_prompt(prompt)[1],
                                      model_id="mock-identity-paraphraser")


_WORD_RE = re.compile(r"[A-Za-z]+(?:['-][A-Za-z]+)*")


def synonym_swapper(synonyms: dict[str, str], fraction: float = 1.0, salt: int = 0):
    """Paraphraser that replaces words with fixed synonyms.

    A word that has an entry in ``synonyms`` is swapped when a hash of
    ``(salt, word)`` falls below ``fraction``, so the same word is treated the
    same way in every sentence and every run.
    """
    def chosen(word):
        if fraction >= 1.0:
            return True
        h = hashlib.blake2b(f"{salt}:{word}".encode(), digest_size=8).digest()
        return int.from_bytes(h, "little") / 2**64 < fraction

    def swap(match):
        word = match.group(0)
        repl = synonyms.get(word.lower())
        if repl is None or not chosen(word.lower()):
            return word
        return repl.capitalize() if word[0].isupper() else repl

    def fn(prompt):
        sentence = parse_paraphrase_prompt(prompt)[1]
        return _WORD_RE.sub(swap, sentence)

    return CallableInstructionBackend(fn, model_id="mock-synonym-swap")


def _load_synonyms(path) -> dict[str, str]:
    path = Path(path)
    if path.suffix == ".json":
        return json.loads(path.read_text(encoding="utf-8"))
    out = {}
    for line in path.read_text(encoding="utf-8").splitlines():
        if line.strip() and not line.startswith("#"):
            word, syn = line.split("\t")[:2]
            out[word.strip()] = syn.strip()
    return out


def _synonym_swap_mock(d):
    if "synonyms" not in d.options:
        raise InputError("synonym-swap mock needs synonyms=<path to .json or .tsv>")
    return synonym_swapper(_load_synonyms(d.options["synonyms"]), float(d.options.get("fraction", 1.0)),
                           int(d.seed or 0))


# descriptor options: oracle-inserter takes drop=word1|word2, synonym-swap takes
# synonyms=<file>, fraction=<0..1> and uses the descriptor seed as hash salt
INSTRUCTION_MOCKS = {
    "echo": lambda d: EchoInstructionBackend(),
    "oracle-inserter": lambda d: oracle_inserter(filter(None, str(d.options.get("drop", "")).split("|"))),
    "identity-paraphraser": lambda d: identity_paraphraser(),
    "synonym-swap": _synonym_swap_mock,
}
