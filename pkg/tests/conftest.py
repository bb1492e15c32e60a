import random
from pathlib import Path

import pytest

from treeperturb.autoenc import load_autoencoder
from treeperturb.data import bundled_embeddings, bundled_vocab, data_path
from treeperturb.victims import load_victim

FIXTURES = Path(__file__).parent / "fixtures"


@pytest.fixture(scope="session")
def vocab():
    return bundled_vocab()


@pytest.fixture(scope="session")
def table():
    return bundled_embeddings()


@pytest.fixture(scope="session")
def ae():
    return load_autoencoder(data_path("autoencoder.npz"))


@pytest.fixture(scope="session")
def victim_cls():
    return load_victim(data_path("victim_cls_attention.npz"))


@pytest.fixture(scope="session")
def victim_cls_rec():
    return load_victim(data_path("victim_cls_recurrent.npz"))


@pytest.fixture(scope="session")
def victim_qa():
    return load_victim(data_path("victim_qa_recurrent.npz"))


@pytest.fixture(scope="session")
def victim_qa_conv():
    return load_victim(data_path("victim_qa_conv.npz"))


@pytest.fixture
def rng():
    return random.Random(1234)
