import json
from pathlib import Path

import numpy as np
import pytest

from distortlab import TokenModel, Vocabulary, load_model, train_ngram

FIXTURES = Path(__file__).resolve().parent.parent / "fixtures"


@pytest.fixture(scope="session")
def catsat():
    return load_model(FIXTURES / "catsat.json")


@pytest.fixture(scope="session")
def catsat_prompt(catsat):
    return catsat.encode("The cat sat on")


@pytest.fixture(scope="session")
def ab_model():
    return load_model(FIXTURES / "abmodel.json")


@pytest.fixture(scope="session")
def tiny_bigram():
    """Char bigram on the small cat corpus (11 distinct characters)."""
    text = (FIXTURES / "tiny.txt").read_text()
    return train_ngram(text, order=1, smoothing=0.5, mode="char")


@pytest.fixture(scope="session")
def corpus_text():
    return (FIXTURES / "corpus.txt").read_text()


def make_table_model(rows, vocab, order=1, default=None, unit="word"):
    """Build an in-memory table model from plain lists."""
    prepared = {}
    for key, row in rows.items():
        arr = np.asarray(row, dtype=np.float64)
        arr.flags.writeable = False
        prepared[key] = arr
    default_row = None
    if default is not None:
        default_row = np.asarray(default, dtype=np.float64)
        default_row.flags.writeable = False
    return TokenModel(kind="table", order=order,
                      vocab=Vocabulary(tuple(vocab)), rows=prepared,
                      default_row=default_row, unit=unit)


def random_table_model(rng, size=6, zeros=False):
    """Random order-1 model: one row per token plus a start row."""
    rows = {}
    for key in [""] + [str(i) for i in range(size)]:
        probs = rng.dirichlet(np.full(size, 0.7))
        if zeros and size > 2:
            kill = rng.choice(size, size // 3, replace=False)
            probs[kill] = 0.0
            probs = probs / probs.sum()
        rows[key if key else "x"] = probs
    # reuse the start row as the default so every context resolves
    table = {str(i): rows[str(i)] for i in range(size)}
    return make_table_model(table, [f"t{i}" for i in range(size)],
                            order=1, default=rows["x"])


def write_model_file(tmp_path, doc, name="model.json"):
    path = tmp_path / name
    path.write_text(json.dumps(doc))
    return path
