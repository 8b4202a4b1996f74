import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from postmark.backends import EmbeddingBackend, MockEmbeddingBackend, normalize  # noqa: E402
from synth import make_table, make_world  # noqa: E402

FIXTURES = Path(__file__).parent / "fixtures"


class DictEmbeddingBackend(EmbeddingBackend):
    """Embedding backend returning hand-set vectors, for exact ranking fixtures."""

    def __init__(self, vectors, model_id="dict-embed"):
        self.vectors = {k: normalize(v) for k, v in vectors.items()}
        self.dimension = len(next(iter(self.vectors.values())))
        self.model_id = model_id
        self.calls = 0

    def embed_raw(self, texts):
        self.calls += 1
        return [self.vectors[t] for t in texts]


def unit(c, axis, dim=5):
    """Unit vector at cosine ``c`` to e0, tilted toward basis vector ``axis``."""
    v = np.zeros(dim)
    v[0] = c
    v[axis] = np.sqrt(1 - c * c)
    return v


@pytest.fixture(scope="session")
def world():
    return make_world()


@pytest.fixture(scope="session")
def mock_backend():
    return MockEmbeddingBackend(seed=7, dimension=256)


@pytest.fixture(scope="session")
def table(world, mock_backend, tmp_path_factory):
    return make_table(world, mock_backend, tmp_path_factory.mktemp("table"))


@pytest.fixture(scope="session")
def match_embedder(world):
    return world.match_embedder()


@pytest.fixture(scope="session")
def match_fixture_path():
    return FIXTURES / "match_vectors.txt"


# one line per acceptance criterion, printed after the run
ACCEPTANCE_LINES: dict[int, str] = {}


def record_criterion(number: int, ok: bool | None, detail: str):
    status = {True: "PASS", False: "FAIL", None: "SKIP"}[ok]
    ACCEPTANCE_LINES[number] = f"criterion {number}: {status}  {detail}"
    print(ACCEPTANCE_LINES[number])


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[n])
