import numpy as np
import pytest

from ghacap import tensor as tn
from ghacap import corpus as C


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def f64():
    with tn.default_dtype(np.float64):
        yield


@pytest.fixture(scope="session")
def tiny_corpus():
    examples = C.synthetic_examples(0, 24)
    vocab = C.build_vocab([c for ex in examples for c in ex.captions])
    return examples, vocab
