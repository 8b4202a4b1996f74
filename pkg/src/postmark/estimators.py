"""scikit-learn compatible wrappers.

``PostMarkWatermarker`` is a transformer (texts in, watermarked texts out) and
``PostMarkDetector`` a binary classifier whose ``fit`` calibrates the decision
threshold on unwatermarked texts. Both accept any iterable of strings and
compose with ``Pipeline``, ``clone`` and ``get_params``/``set_params``.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .detection import DEFAULT_TAU, apply_threshold, presence_score
from .evaluation import DEFAULT_TARGET_FPR, calibrate_threshold, false_positive_rate
from .exceptions import EmptyTextError, InputError
from .insertion import DEFAULT_MAX_REPAIR_PASSES, insert_words
from .selection import (
    DEFAULT_K_PRIME_MULTIPLIER,
    DEFAULT_RATIO,
    DEFAULT_SUBLIST_SIZE,
    InsertionPolicy,
    WordEmbeddingCache,
    select_watermark_words,
)


def check_texts(X, allow_empty_list: bool = False) -> list[str]:
    """Validate a collection of documents and return it as a list of str."""
    if isinstance(X, (str, bytes)):
        raise InputError("expected a collection of texts, got a single string")
    if isinstance(X, np.ndarray):
        X = X.ravel().tolist()
    try:
        texts = list(X)
    except TypeError:
        raise InputError(f"expected an iterable of texts, got {type(X).__name__}") from None
    if not texts and not allow_empty_list:
        raise InputError("no texts given")
    for i, t in enumerate(texts):
        if not isinstance(t, str):
            raise InputError(f"text {i} is {type(t).__name__}, not str")
        if not t.strip():
            raise EmptyTextError(f"text {i} is empty")
    return texts


def check_table(table, embedder):
    if table is None or embedder is None:
        raise InputError("a secret table and an embedding backend are required")
    table.check_fingerprint(embedder)


class _PolicyParams:
    def _policy(self) -> InsertionPolicy:
        return InsertionPolicy(self.ratio, self.k_prime_multiplier, self.sublist_size)

    def _cache(self):
        cache = getattr(self, "cache_", None)
        if cache is None or cache.backend is not self.embedder:
            cache = WordEmbeddingCache(self.embedder)
            self.cache_ = cache
        return cache


class PostMarkWatermarker(_PolicyParams, TransformerMixin, BaseEstimator):
    """Watermark texts by inserting words chosen through a secret table.

    ``transform`` returns the watermarked texts; per-document insertion
    outcomes from the last call are kept in ``outcomes_``.
    """

    def __init__(self, table=None, embedder=None, inserter=None, ratio=DEFAULT_RATIO,
                 k_prime_multiplier=DEFAULT_K_PRIME_MULTIPLIER, sublist_size=DEFAULT_SUBLIST_SIZE,
                 max_repair_passes=DEFAULT_MAX_REPAIR_PASSES):
        self.table = table
        self.embedder = embedder
        self.inserter = inserter
        self.ratio = ratio
        self.k_prime_multiplier = k_prime_multiplier
        self.sublist_size = sublist_size
        self.max_repair_passes = max_repair_passes

    def fit(self, X=None, y=None):
        check_table(self.table, self.embedder)
        if self.inserter is None:
            raise InputError("an instruction backend is required")
        self.policy_ = self._policy()
        self.table_id_ = self.table.table_id
        return self

    def word_lists(self, X):
        check_is_fitted(self, "policy_")
        return [select_watermark_words(t, self.table, self.policy_, self.embedder, cache=self._cache())
                for t in check_texts(X)]

    def transform(self, X):
        check_is_fitted(self, "policy_")
        texts = check_texts(X)
        outcomes = []
        for text, word_list in zip(texts, self.word_lists(texts)):
            outcomes.append(insert_words(text, word_list, self.inserter, self.policy_,
                                         self.max_repair_passes))
        self.outcomes_ = outcomes
        return [o.watermarked_text for o in outcomes]


class PostMarkDetector(_PolicyParams, ClassifierMixin, BaseEstimator):
    """Presence-score detector.

    ``fit(X, y)`` takes texts with labels (1 = watermarked, 0 = not) and
    calibrates the threshold on the label-0 texts; with ``y=None`` every text
    in ``X`` is treated as unwatermarked. An explicit ``threshold`` skips
    calibration.
    """

    def __init__(self, table=None, embedder=None, match_embedder=None, ratio=DEFAULT_RATIO,
                 k_prime_multiplier=DEFAULT_K_PRIME_MULTIPLIER, sublist_size=DEFAULT_SUBLIST_SIZE,
                 tau=DEFAULT_TAU, target_fpr=DEFAULT_TARGET_FPR, threshold=None):
        self.table = table
        self.embedder = embedder
        self.match_embedder = match_embedder
        self.ratio = ratio
        self.k_prime_multiplier = k_prime_multiplier
        self.sublist_size = sublist_size
        self.tau = tau
        self.target_fpr = target_fpr
        self.threshold = threshold

    def _score_results(self, X):
        policy = self._policy()
        return [presence_score(t, self.table, policy, self.embedder, self.match_embedder, self.tau,
                               self._cache()) for t in check_texts(X)]

    def fit(self, X=None, y=None):
        check_table(self.table, self.embedder)
        self.classes_ = np.array([0, 1])
        if self.threshold is not None:
            if not np.isfinite(self.threshold) or self.threshold < 0:
                raise InputError("threshold must be a non-negative number")
            self.threshold_ = float(self.threshold)
            self.null_scores_ = None
            return self
        if X is None:
            raise InputError("calibration needs unwatermarked texts (or pass threshold=...)")
        texts = check_texts(X)
        if y is not None:
            y = np.asarray(y)
            if y.shape != (len(texts),):
                raise InputError("y must have one label per text")
            texts = [t for t, label in zip(texts, y) if not label]
        scores = self.decision_function(texts)
        self.threshold_ = calibrate_threshold(scores, self.target_fpr)
        self.null_scores_ = scores
        self.achieved_fpr_ = false_positive_rate(scores, self.threshold_)
        return self

    def decision_function(self, X) -> np.ndarray:
        check_table(self.table, self.embedder)
        return np.array([r.score for r in self._score_results(X)], dtype=np.float64)

    def detect(self, X):
        """Full detection results at the fitted threshold."""
        check_is_fitted(self, "threshold_")
        return [apply_threshold(r, self.threshold_) for r in self._score_results(X)]

    def predict(self, X) -> np.ndarray:
        check_is_fitted(self, "threshold_")
        return (self.decision_function(X) >= self.threshold_).astype(int)
