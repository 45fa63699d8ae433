import numpy as np
import pytest

from mmagen import tensor as T
from mmagen.config import RunConfig
from mmagen.graph import Mmag, MmagNode

WORDS = ["red", "green", "blue", "cat", "dog", "tree", "sky", "sea"]


def random_graph(n, p, seed, d_img=8, words=WORDS):
    """Erdos-Renyi graph with random texts (every word used at least twice overall)."""
    rng = np.random.default_rng(seed)
    nodes = []
    for i in range(n):
        text = " ".join(rng.choice(words, size=int(rng.integers(1, 6))))
        nodes.append(MmagNode(i, text, rng.standard_normal(d_img).astype(np.float32)))
    iu, ju = np.triu_indices(n, k=1)
    keep = rng.random(len(iu)) < p
    return Mmag(nodes, zip(iu[keep].tolist(), ju[keep].tolist()), d_img)


def tiny_config(**kw):
    """Small, fast configuration used across tests."""
    base = dict(
        n_nodes=32,
        n_clusters=4,
        d_img=8,
        d_model=16,
        n_heads=2,
        n_layers=1,
        aligner_d_model=16,
        aligner_heads=2,
        node_layers=1,
        graph_layers=1,
        node_queries=4,
        graph_tokens=4,
        image_codes=8,
        steps=20,
        lr=1e-3,
        log_every=0,
        max_new=12,
    )
    base.update(kw)
    return RunConfig(**base)


@pytest.fixture(autouse=True)
def _reset_precision():
    T.set_precision("f32")
    yield
    T.set_precision("f32")


# One line per acceptance criterion, printed at the end of the session.
ACCEPTANCE = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE, key=lambda s: int(s.split()[0])):
            terminalreporter.write_line(line)
