import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from postmark.backends import MockEmbeddingBackend
from postmark.estimators import PostMarkDetector, PostMarkWatermarker, check_texts
from postmark.exceptions import EmptyTextError, FingerprintMismatchError, InputError
from postmark.mocks import oracle_inserter


def test_check_texts():
    assert check_texts(("a", "b")) == ["a", "b"]
    assert check_texts(np.array([["a"], ["b"]])) == ["a", "b"]
    with pytest.raises(InputError):
        check_texts("a single string")
    with pytest.raises(InputError):
        check_texts([])
    with pytest.raises(InputError):
        check_texts(["ok", 3])
    with pytest.raises(EmptyTextError):
        check_texts(["ok", "   "])
    with pytest.raises(InputError):
        check_texts(5)


def test_get_params_and_clone(table, mock_backend):
    wm = PostMarkWatermarker(table, mock_backend, oracle_inserter(), ratio=0.2)
    params = wm.get_params()
    assert params["ratio"] == 0.2 and params["sublist_size"] == 10
    c = clone(wm)
    assert c.get_params()["ratio"] == 0.2 and c is not wm
    det = PostMarkDetector(table, mock_backend, tau=0.8).set_params(target_fpr=0.05)
    assert det.get_params()["target_fpr"] == 0.05


def test_unfitted_raises(table, mock_backend):
    with pytest.raises(NotFittedError):
        PostMarkWatermarker(table, mock_backend, oracle_inserter()).transform(["text"])
    with pytest.raises(NotFittedError):
        PostMarkDetector(table, mock_backend).predict(["text"])


def test_fingerprint_checked_on_fit(table):
    with pytest.raises(FingerprintMismatchError):
        PostMarkWatermarker(table, MockEmbeddingBackend(7, 64), oracle_inserter()).fit()


def test_round_trip(world, table, mock_backend, match_embedder):
    clean = world.documents(120, seed=30)
    wm = PostMarkWatermarker(table, mock_backend, oracle_inserter()).fit()
    marked = wm.fit_transform(clean[:20])
    assert len(marked) == 20 and all(o.missing_words == () for o in wm.outcomes_)

    det = PostMarkDetector(table, mock_backend, match_embedder, target_fpr=0.01)
    X = clean[20:] + marked
    y = np.r_[np.zeros(100, int), np.ones(20, int)]
    det.fit(X, y)
    assert det.achieved_fpr_ <= 0.01
    assert det.predict(marked).mean() >= 0.95
    assert det.score(X, y) >= 0.95
    results = det.detect(marked[:2])
    assert all(r.verdict for r in results)


def test_explicit_threshold(table, mock_backend, match_embedder, world):
    det = PostMarkDetector(table, mock_backend, match_embedder, threshold=1.01).fit()
    assert det.predict(world.documents(3, seed=4)).tolist() == [0, 0, 0]
    with pytest.raises(InputError):
        PostMarkDetector(table, mock_backend, threshold=-0.1).fit()
    with pytest.raises(InputError):
        PostMarkDetector(table, mock_backend).fit()
    with pytest.raises(InputError):
        PostMarkDetector(table, mock_backend).fit(["a b c"] * 3, [0, 1])
