import sys
from pathlib import Path

import numpy as np
import pytest

from intent_rationale.model import PAD_TOKEN, UNK_TOKEN, ClassifierParams, Vocabulary

FIXTURES = Path(__file__).parent / "fixtures"
sys.path.insert(0, str(Path(__file__).parent))


def random_params(rng, V=12, d=5, c=3, scale=1.0) -> ClassifierParams:
    vocab = {PAD_TOKEN: 0, UNK_TOKEN: 1}
    for i in range(2, V):
        vocab[f"t{i}"] = i
    emb = rng.normal(0, scale, size=(V, d))
    emb[0] = 0.0
    return ClassifierParams(
        emb, rng.normal(0, scale, size=(c, d)), rng.normal(0, scale, size=c), Vocabulary(vocab, [f"c{j}" for j in range(c)])
    )


def random_instance(rng, max_V=20, max_d=8, max_m=6, max_c=3, scale=1.0):
    """Random small model plus one token sequence (no PAD)."""
    V = int(rng.integers(3, max_V + 1))
    d = int(rng.integers(1, max_d + 1))
    c = int(rng.integers(2, max_c + 1))
    m = int(rng.integers(1, max_m + 1))
    params = random_params(rng, V, d, c, scale)
    ids = rng.integers(1, V, size=m).tolist()
    return params, ids


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def fixtures_dir():
    return FIXTURES


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
