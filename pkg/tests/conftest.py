import numpy as np
import pytest
import torch

torch.set_num_threads(2)


@pytest.fixture(autouse=True)
def _seed_everything():
    torch.manual_seed(0)
    np.random.seed(0)


@pytest.fixture(scope="session")
def tiny_corpus(tmp_path_factory):
    """A small synthetic corpus shared by data-dependent tests."""
    from radgen.data import generate_synthetic

    root = tmp_path_factory.mktemp("tiny_corpus")
    manifest = generate_synthetic(root, n=40, k_findings=3, seed=11, image_size=64)
    return root, manifest
