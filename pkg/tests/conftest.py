import numpy as np
import pytest

from scpo_lab.data import DatasetBundle
from scpo_lab.difficulty import ImageRecord
from scpo_lab.model import NULL_IMAGE, Context, PolicyTable
from scpo_lab.objectives import PreferencePair

# acceptance results, filled by tests/test_acceptance.py
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[k]
        terminalreporter.write_line(f"AC{k:<2} {'PASS' if ok else 'FAIL'}  {detail}")


def _image(image_id, emb, feats, pos):
    return ImageRecord(image_id, np.asarray(emb, float), np.asarray(feats, float), np.asarray(pos, float))


@pytest.fixture
def tiny_bundle() -> DatasetBundle:
    """Two hand-written pairs over two queries and a three-response vocab."""
    s = np.sqrt(0.5)
    images = [
        _image("a_w", [1.0, 0.0], [[0.0, 0.0], [1.0, 0.0]], [[0.25, 0.25], [0.75, 0.75]]),
        _image("a_l", [s, s], [[0.0, 0.5], [1.0, 0.5]], [[0.25, 0.25], [0.75, 0.75]]),
        _image("b_w", [0.0, 1.0], [[2.0, 2.0], [0.0, 1.0]], [[0.1, 0.9], [0.9, 0.1]]),
        _image("b_l", [0.0, -1.0], [[-2.0, 0.0], [3.0, 1.0]], [[0.5, 0.5], [0.2, 0.2]]),
    ]
    pairs = [
        PreferencePair("p0", "qa", "a_w", "a_l", 0, 1),
        PreferencePair("p1", "qb", "b_w", "b_l", 2, 0),
    ]
    return DatasetBundle(images, ["qa", "qb"], pairs, [0, 1, 2])


def random_instance(rng: np.random.Generator, n_vocab: int | None = None, scale: float = 2.0):
    """One pair with a random policy and an independent random reference."""
    n_vocab = n_vocab or int(rng.integers(2, 6))
    y_w, y_l = rng.choice(n_vocab, size=2, replace=False).tolist()
    pair = PreferencePair("p", "q", "iw", "il", y_w, y_l)
    contexts = [Context("iw", "q"), Context("il", "q"), Context(NULL_IMAGE, "q")]
    vocab = list(range(n_vocab))
    pi = PolicyTable(contexts, vocab, scale * rng.standard_normal((3, n_vocab)))
    ref = PolicyTable(contexts, vocab, scale * rng.standard_normal((3, n_vocab)))
    return pi, ref, pair
