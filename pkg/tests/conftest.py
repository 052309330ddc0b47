import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from refseg.config import DatasetConfig, GenerationConfig
from refseg.data.store import build_dataset


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    """A small generated dataset shared across tests (40/8/8 samples)."""
    root = tmp_path_factory.mktemp("tiny_dataset")
    config = DatasetConfig(
        train=40, val=8, test=8, seed=11, generation=GenerationConfig()
    )
    build_dataset(root, config)
    return root
