import sys

import numpy as np
import pytest

from advxmtc.dataset import Dataset, Document, GenConfig, build_vocab


class BagOracle:
    """Toy linear victim: sigmoid(bias + sum of per-word weight vectors).

    Unknown words (including MASK) contribute nothing.
    """

    def __init__(self, weights: dict, bias):
        self.weights = {w: np.asarray(v, dtype=float) for w, v in weights.items()}
        self.bias = np.asarray(bias, dtype=float)
        self.calls = 0

    def logits(self, tokens):
        z = self.bias.copy()
        for t in tokens:
            if t in self.weights:
                z = z + self.weights[t]
        return z

    def __call__(self, tokens):
        self.calls += 1
        return 1.0 / (1.0 + np.exp(-self.logits(tokens)))


class TableProvider:
    """Fixed candidate lists keyed by the word at the masked position."""

    def __init__(self, table: dict):
        self.table = table
        self.calls = 0

    def __call__(self, tokens, position, max_candidates=50):
        self.calls += 1
        return [w for w in self.table.get(tokens[position], []) if w != tokens[position]][:max_candidates]


def make_dataset(rows, num_labels=None):
    docs = tuple(Document(tuple(text.split()), frozenset(labels)) for labels, text in rows)
    L = num_labels if num_labels is not None else max(max(d.labels) for d in docs) + 1
    return Dataset(docs, L, build_vocab(docs))


@pytest.fixture(scope="session")
def small_cfg():
    return GenConfig(n_docs=400, n_labels=40, vocab_size=600, doc_length=30.0, topic_size=4)


def pytest_terminal_summary(terminalreporter):
    acceptance = sys.modules.get("test_acceptance")
    if acceptance is not None and acceptance.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(acceptance.RESULTS, key=lambda l: int(l.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
