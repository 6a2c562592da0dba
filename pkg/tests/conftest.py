import numpy as np
import pytest

from roster.corpus import sample_corpus
from roster.model import ModelConfig, init_model


@pytest.fixture(scope="session")
def toy_model():
    """Reference toy: 4 layers, 8 experts, top-2, d_model 64, vocab 256."""
    return init_model(ModelConfig(), seed=7)


@pytest.fixture(scope="session")
def toy_corpus(toy_model):
    return sample_corpus(toy_model, 2000, seed=0)


@pytest.fixture
def rng():
    return np.random.Generator(np.random.PCG64(1234))
