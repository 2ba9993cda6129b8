import numpy as np
import pytest

from avcleanse.embed_store import EmbeddingSet, LabelMap, l2_normalize

ACCEPTANCE_LINES: list[str] = []


def make_set(vectors, modality="speech", normalize=True, prefix="s"):
    v = np.asarray(vectors, dtype=np.float32)
    emb = EmbeddingSet(modality, [f"{prefix}{i}" for i in range(len(v))], v)
    return l2_normalize(emb) if normalize else emb


def make_labels(emb, classes):
    return LabelMap.from_raw(emb.sample_ids, classes)


def random_instance(rng, n, d, k):
    """Normalized set plus labels with every one of the k classes populated."""
    classes = np.r_[np.arange(k), rng.integers(0, k, n - k)]
    rng.shuffle(classes)
    emb = make_set(rng.standard_normal((n, d)))
    return emb, make_labels(emb, classes)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
