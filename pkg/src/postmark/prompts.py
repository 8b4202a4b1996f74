"""Prompt templates for the inserter and the paraphrase attack.

The template text lives in ``resources/`` so operators can audit it; ``{}``
placeholders are filled positionally.
"""

from __future__ import annotations

import re
from functools import lru_cache
from importlib import resources

WORD_LIST_SEPARATOR = ", "


@lru_cache(maxsize=None)
def load_template(name: str) -> str:
    return resources.files("postmark").joinpath("resources", name).read_text(encoding="utf-8")


def insertion_prompt(text: str, words) -> str:
    return load_template("insertion_prompt.txt").format(text, WORD_LIST_SEPARATOR.join(words))


def paraphrase_prompt(context: str, sentence: str) -> str:
    return load_template("paraphrase_prompt.txt").format(context, sentence)


def _template_regex(name: str) -> re.Pattern:
    head, middle, tail = load_template(name).split("{}")
    return re.compile(re.escape(head) + "(.*)" + re.escape(middle) + "(.*)" + re.escape(tail) + r"\Z",
                      re.DOTALL)


def parse_insertion_prompt(prompt: str) -> tuple[str, list[str]]:
    """Recover ``(text, words)`` from a rendered insertion prompt."""
    m = _template_regex("insertion_prompt.txt").match(prompt)
    if m is None:
        raise ValueError("not an insertion prompt")
    text, words = m.groups()
    return text, [w for w in words.split(WORD_LIST_SEPARATOR) if w]


def parse_paraphrase_prompt(prompt: str) -> tuple[str, str]:
    """Recover ``(context, sentence)`` from a rendered paraphrase prompt."""
    m = _template_regex("paraphrase_prompt.txt").match(prompt)
    if m is None:
        raise ValueError("not a paraphrase prompt")
    return m.group(1), m.group(2)
