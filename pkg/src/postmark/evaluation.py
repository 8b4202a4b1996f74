"""Threshold calibration, TPR at fixed FPR, similarity, and the paraphrase attack."""

from __future__ import annotations

import json
import logging
import math
import re
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .backends import EmbeddingBackend, InstructionBackend, InstructionRequest, complete, embed_text
from .detection import DEFAULT_TAU, MatchEmbedder, presence_score
from .exceptions import InputError, InsufficientSamplesError, MalformedLineError, PostMarkError
from .insertion import DEFAULT_MAX_REPAIR_PASSES, insert_words
from .prompts import paraphrase_prompt
from .sectable import SecretTable
from .selection import InsertionPolicy, WordEmbeddingCache, cosine, select_watermark_words

logger = logging.getLogger(__name__)

DEFAULT_TARGET_FPR = 0.01
RECOMMENDED_NULL_SAMPLES = 100
MAX_FAILURE_RATE = 0.05


def calibrate_threshold(null_scores: Sequence[float], target_fpr: float = DEFAULT_TARGET_FPR) -> float:
    """Lowest-placed threshold whose false positive rate on ``null_scores`` is <= target.

    With scores sorted descending and ``m = floor(n * target_fpr)``, at most
    ``m`` scores may sit at or above the threshold, so it must exceed the
    ``(m+1)``-th largest score. The threshold is put halfway between that
    score and the next larger distinct one; when nothing is larger, just
    above it.
    """
    if not 0 < target_fpr <= 0.5:
        raise InputError("target FPR must be in (0, 0.5]")
    scores = np.sort(np.asarray(null_scores, dtype=np.float64))[::-1]
    n = scores.size
    needed = math.ceil(1.0 / target_fpr - 1e-9)
    if n < needed:
        raise InsufficientSamplesError(f"{n} null scores cannot resolve FPR {target_fpr}; need >= {needed}")
    if n < RECOMMENDED_NULL_SAMPLES:
        logger.warning("calibrating on only %d null scores", n)
    if not np.all(np.isfinite(scores)):
        raise InputError("null scores must be finite")
    allowed = math.floor(n * target_fpr + 1e-9)
    pivot = scores[allowed]
    above = scores[:allowed][scores[:allowed] > pivot]
    if above.size:
        return float((pivot + above.min()) / 2.0)
    return float(np.nextafter(pivot, np.inf))


def false_positive_rate(null_scores, threshold: float) -> float:
    scores = np.asarray(null_scores, dtype=np.float64)
    return float(np.mean(scores >= threshold))


def tpr_at_fpr(pos_scores, neg_scores, target_fpr: float = DEFAULT_TARGET_FPR) -> tuple[float, float, float]:
    """Return ``(tpr, threshold, achieved_fpr)`` with the threshold calibrated on negatives."""
    threshold = calibrate_threshold(neg_scores, target_fpr)
    pos = np.asarray(pos_scores, dtype=np.float64)
    if pos.size == 0:
        raise InputError("no positive scores")
    return float(np.mean(pos >= threshold)), threshold, false_positive_rate(neg_scores, threshold)


def semantic_similarity(text_a: str, text_b: str, backend: EmbeddingBackend) -> float:
    """Cosine between the two texts' embeddings, on a 0-100 scale."""
    return 100.0 * cosine(embed_text(backend, text_a), embed_text(backend, text_b))


ABBREVIATIONS = frozenset("""
    mr mrs ms dr prof sr jr st mt ft gen col lt sgt capt cmdr adm gov sen rep rev hon pres
    vs etc e.g i.e cf al approx dept est fig no nos vol vols ch sec inc ltd co corp bros
    jan feb mar apr jun jul aug sep sept oct nov dec u.s u.k a.m p.m ph.d
""".split())

_BOUNDARY_RE = re.compile(r"""([.!?]+["'”’)\]]*)(\s+)(?=["'“‘(\[]?[A-Z0-9"'“‘])""")


def split_sentences(text: str) -> list[str]:
    """Rule-based splitter on ``. ! ?`` followed by whitespace and a capital or quote.

    A period ending a known abbreviation ("Dr.", "e.g.") does not end a
    sentence. Joining the result with single spaces reproduces the input up to
    whitespace between sentences.
    """
    text = text.strip()
    if not text:
        return []
    out = []
    start = 0
    for m in _BOUNDARY_RE.finditer(text):
        end = m.end(1)
        if m.group(1).startswith(".") and len(m.group(1).rstrip("\"'”’)]")) == 1:
            prev = re.search(r"([\w.]+)\.$", text[start:m.start(1) + 1])
            if prev and prev.group(1).lower() in ABBREVIATIONS:
                continue
        out.append(text[start:end].strip())
        start = m.end()
    tail = text[start:].strip()
    if tail:
        out.append(tail)
    return out


def paraphrase_attack(text: str, backend: InstructionBackend, temperature: float = 0.0,
                      max_output_tokens: int = 512) -> str:
    """Paraphrase sentence by sentence; each prompt carries the already paraphrased prefix."""
    sentences = split_sentences(text)
    if not sentences:
        raise InputError("nothing to paraphrase")
    done: list[str] = []
    for sentence in sentences:
        request = InstructionRequest(user_text=paraphrase_prompt(" ".join(done), sentence),
                                     temperature=temperature, max_output_tokens=max_output_tokens)
        done.append(complete(backend, request))
    return " ".join(done)


@dataclass
class ScoreSample:
    document_id: str
    label: str
    score: float
    condition: str

    def to_dict(self):
        return asdict(self)


@dataclass
class EvalReport:
    threshold: float
    target_fpr: float
    achieved_fpr: float
    tpr_clean: float
    tpr_attacked: float | None
    n_positive: int
    n_negative: int
    sim_mean: float | None
    runtime_per_doc: float | None
    n_failed: int = 0
    valid: bool = True
    attack: str = "none"
    missing_word_rate: float = 0.0
    samples: list[ScoreSample] = field(default_factory=list, repr=False)
    failures: list[dict] = field(default_factory=list, repr=False)

    def to_dict(self, digits: int = 6) -> dict:
        def r(x):
            return None if x is None else round(x, digits)

        return {
            "report": {
                "threshold": r(self.threshold),
                "target_fpr": self.target_fpr,
                "achieved_fpr": r(self.achieved_fpr),
                "tpr_clean": r(self.tpr_clean),
                "tpr_attacked": r(self.tpr_attacked),
                "n_positive": self.n_positive,
                "n_negative": self.n_negative,
                "sim_mean": r(self.sim_mean),
                "runtime_per_doc": r(self.runtime_per_doc),
                "n_failed": self.n_failed,
                "valid": self.valid,
                "attack": self.attack,
                "missing_word_rate": r(self.missing_word_rate),
            },
            "samples": [{**s.to_dict(), "score": r(s.score)} for s in self.samples],
            "failures": self.failures,
        }

    def render_table(self) -> str:
        def pct(x):
            return "-" if x is None else f"{100 * x:.1f}"

        rows = [
            f"TPR at {100 * self.target_fpr:g}% FPR (before / after paraphrasing)",
            f"{pct(self.tpr_clean)} / {pct(self.tpr_attacked)}",
            "",
            f"threshold      {self.threshold:.6f}",
            f"achieved FPR   {pct(self.achieved_fpr)}%",
            f"positives      {self.n_positive}",
            f"negatives      {self.n_negative}",
            f"SIM            {'-' if self.sim_mean is None else f'{self.sim_mean:.1f}'}",
            f"sec per doc    {'-' if self.runtime_per_doc is None else f'{self.runtime_per_doc:.3f}'}",
            f"failed docs    {self.n_failed}{'' if self.valid else '  (REPORT INVALID)'}",
        ]
        return "\n".join(rows)


def recompute_tprs(samples: Sequence[ScoreSample], threshold: float) -> tuple[float, float | None]:
    def rate(condition):
        xs = [s.score >= threshold for s in samples if s.label == "watermarked" and s.condition == condition]
        return sum(xs) / len(xs) if xs else None

    return rate("clean"), rate("paraphrased")


def read_dataset(path) -> list[dict]:
    """JSONL records with ``id`` and ``text`` (``prefix`` optional)."""
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except ValueError:
                raise MalformedLineError(path, lineno, "invalid JSON") from None
            if not isinstance(rec, dict) or not isinstance(rec.get("text"), str):
                raise MalformedLineError(path, lineno, "record needs a string text field")
            rec.setdefault("id", str(lineno))
            rec["id"] = str(rec["id"])
            records.append(rec)
    return records


def run_eval(dataset, table: SecretTable, embedder: EmbeddingBackend, inserter: InstructionBackend,
             match_embedder: MatchEmbedder | None, policy: InsertionPolicy | None = None,
             tau: float = DEFAULT_TAU, target_fpr: float = DEFAULT_TARGET_FPR, attack: str = "none",
             attacker: InstructionBackend | None = None, measure_sim: bool = True,
             max_repair_passes: int = DEFAULT_MAX_REPAIR_PASSES,
             cache: WordEmbeddingCache | None = None) -> EvalReport:
    """Watermark, optionally attack, score, and calibrate over a document set.

    ``dataset`` is a JSONL path or a list of ``{"id", "text"}`` records. The
    threshold is calibrated on the unwatermarked texts' scores.
    """
    policy = policy or InsertionPolicy()
    if attack not in ("none", "paraphrase"):
        raise InputError(f"unknown attack {attack!r}")
    if attack == "paraphrase" and attacker is None:
        raise InputError("paraphrase attack needs an attacker backend")
    records = read_dataset(dataset) if isinstance(dataset, (str, Path)) else list(dataset)
    if not records:
        raise InputError("dataset is empty")
    table.check_fingerprint(embedder)
    cache = cache or WordEmbeddingCache(embedder)

    samples: list[ScoreSample] = []
    failures = []
    sims = []
    requested = missing = 0
    t0 = time.perf_counter()
    for rec in records:
        doc_id, text = str(rec["id"]), rec["text"]
        try:
            neg = presence_score(text, table, policy, embedder, match_embedder, tau, cache).score
            word_list = select_watermark_words(text, table, policy, embedder, cache=cache)
            outcome = insert_words(text, word_list, inserter, policy, max_repair_passes)
            wm_text = outcome.watermarked_text
            pos = presence_score(wm_text, table, policy, embedder, match_embedder, tau, cache).score
            attacked = None
            if attack == "paraphrase":
                attacked_text = paraphrase_attack(wm_text, attacker)
                attacked = presence_score(attacked_text, table, policy, embedder, match_embedder, tau,
                                          cache).score
            sim = semantic_similarity(text, wm_text, embedder) if measure_sim else None
        except PostMarkError as exc:
            logger.warning("document %s failed: %s", doc_id, exc)
            failures.append({"id": doc_id, "error": f"{type(exc).__name__}: {exc}"})
            continue
        requested += len(word_list.words)
        missing += len(outcome.missing_words)
        samples.append(ScoreSample(doc_id, "unwatermarked", neg, "clean"))
        samples.append(ScoreSample(doc_id, "watermarked", pos, "clean"))
        if attacked is not None:
            samples.append(ScoreSample(doc_id, "watermarked", attacked, "paraphrased"))
        if sim is not None:
            sims.append(sim)
    elapsed = time.perf_counter() - t0

    valid = len(failures) <= MAX_FAILURE_RATE * len(records)
    if not valid:
        logger.error("%d of %d documents failed; report is invalid", len(failures), len(records))
    neg_scores = [s.score for s in samples if s.label == "unwatermarked"]
    if not neg_scores:
        raise InputError("every document failed")
    threshold = calibrate_threshold(neg_scores, target_fpr)
    tpr_clean, tpr_attacked = recompute_tprs(samples, threshold)
    n_ok = len(records) - len(failures)
    report = EvalReport(
        threshold=threshold,
        target_fpr=target_fpr,
        achieved_fpr=false_positive_rate(neg_scores, threshold),
        tpr_clean=tpr_clean,
        tpr_attacked=tpr_attacked,
        n_positive=n_ok,
        n_negative=len(neg_scores),
        sim_mean=float(np.mean(sims)) if sims else None,
        runtime_per_doc=elapsed / max(1, n_ok),
        n_failed=len(failures),
        valid=valid,
        attack=attack,
        missing_word_rate=missing / requested if requested else 0.0,
        samples=samples,
        failures=failures,
    )
    logger.info("eval: tpr_clean=%.3f tpr_attacked=%s threshold=%.4f (%.3fs/doc)", tpr_clean,
                tpr_attacked, threshold, report.runtime_per_doc)
    return report
