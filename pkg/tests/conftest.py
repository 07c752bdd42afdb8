import numpy as np
import pytest
import torch

from hintstream import synth


@pytest.fixture(scope="session")
def tiny_ss_corpus(tmp_path_factory):
    """Small on-disk SS corpus shared by training and CLI tests."""
    root = tmp_path_factory.mktemp("corpus-ss")
    manifest = synth.build_corpus(
        root, "ss", {"train": 4, "test": 2, "val": 2}, seed=0, duration=1.0
    )
    return manifest


@pytest.fixture(autouse=True)
def _deterministic_torch():
    torch.manual_seed(0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
