import threading
from concurrent.futures import ThreadPoolExecutor

import pytest
from fastapi.testclient import TestClient

from postmark.backends import CallableInstructionBackend
from postmark.evaluation import calibrate_threshold
from postmark.detection import presence_score
from postmark.exceptions import TransportError
from postmark.mocks import oracle_inserter
from postmark.selection import InsertionPolicy
from postmark.service import ServiceState, create_app


@pytest.fixture(scope="module")
def threshold(world, table, mock_backend, match_embedder):
    null = world.documents(100, seed=60)
    return calibrate_threshold([presence_score(t, table, InsertionPolicy(), mock_backend, match_embedder).score
                                for t in null], 0.01)


@pytest.fixture()
def client(table, mock_backend, match_embedder, threshold):
    state = ServiceState()
    state.load(table, mock_backend, inserter=oracle_inserter(), match_embedder=match_embedder,
               threshold=threshold)
    return TestClient(create_app(state))


def test_unloaded_service_is_503():
    c = TestClient(create_app())
    assert c.get("/health").status_code == 503
    assert c.post("/detect", json={"text": "hello there"}).status_code == 503
    assert c.post("/watermark", json={"text": "hello there"}).status_code == 503


def test_health(client, table):
    body = client.get("/health").json()
    assert body == {"status": "ok", "table_id": table.table_id, "embedder_fingerprint": "mock-embed:256"}


def test_request_validation(client):
    assert client.post("/watermark", json={"text": "  "}).status_code == 422
    assert client.post("/detect", json={"text": ""}).status_code == 422
    assert client.post("/detect", content=b"{not json").status_code == 400
    assert client.post("/detect", json={"txt": "x"}).status_code == 400
    assert client.post("/detect", json=["x"]).status_code == 400
    assert client.post("/watermark", json={"text": 5}).status_code == 400


def test_watermark_then_detect(client, world):
    for text in world.documents(5, seed=61):
        wm = client.post("/watermark", json={"text": text})
        assert wm.status_code == 200
        body = wm.json()
        assert set(body) == {"watermarked_text", "missing_words"} and body["missing_words"] == []
        det = client.post("/detect", json={"text": body["watermarked_text"]}).json()
        assert det["verdict"] is True
        assert "matched_words" not in det and "words" not in det
        assert det["score"] == round(det["score"], 6)


def test_expose_matches(table, mock_backend, match_embedder, world):
    state = ServiceState()
    state.load(table, mock_backend, match_embedder=match_embedder, expose_matches=True)
    c = TestClient(create_app(state))
    det = c.post("/detect", json={"text": world.documents(1, seed=62)[0]}).json()
    assert det["verdict"] is None and isinstance(det["matched_words"], list)
    # no inserter configured
    assert c.post("/watermark", json={"text": "some text here"}).status_code == 503


def test_backend_failure_is_502(table, mock_backend):
    def boom(prompt):
        raise TransportError("upstream down", attempts=3)

    state = ServiceState()
    state.load(table, mock_backend, inserter=CallableInstructionBackend(boom))
    c = TestClient(create_app(state))
    assert c.post("/watermark", json={"text": "a b c d e f g"}).status_code == 502


def test_concurrent_requests_do_not_mutate_table(client, table, world):
    before = table.vectors.tobytes()
    texts = world.documents(16, seed=63)
    with ThreadPoolExecutor(8) as pool:
        codes = list(pool.map(lambda t: client.post("/detect", json={"text": t}).status_code, texts))
    assert codes == [200] * 16
    assert table.vectors.tobytes() == before


def test_parallelism_bound(table, mock_backend):
    active, peak = [0], [0]
    lock = threading.Lock()
    release = threading.Event()

    def slow(prompt):
        with lock:
            active[0] += 1
            peak[0] = max(peak[0], active[0])
        release.wait(0.2)
        with lock:
            active[0] -= 1
        return "alpha beta gamma delta"

    state = ServiceState()
    state.load(table, mock_backend, inserter=CallableInstructionBackend(slow), max_repair_passes=0)
    c = TestClient(create_app(state, parallelism=2))
    with ThreadPoolExecutor(6) as pool:
        list(pool.map(lambda i: c.post("/watermark", json={"text": f"word{i} alpha beta gamma"}), range(6)))
    assert peak[0] <= 2
