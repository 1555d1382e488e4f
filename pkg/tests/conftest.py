import numpy as np
import pytest
import torch

from cilforge.backbone import BackboneConfig, FeatureExtractor
from cilforge.heads import CosineHead

ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if ACCEPTANCE_LINES:
        terminalreporter.write_sep("-", "acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture(autouse=True)
def _seeded():
    torch.manual_seed(0)
    np.random.seed(0)


@pytest.fixture
def tiny_config():
    """Smallest legal 3-level config: 16x16 input, 2px patches, 16-dim."""
    return BackboneConfig(
        patch_size=2, num_hierarchies=3, embed_dims=(16,), heads=(2,),
        blocks_per_level=(1,), image_size=16, channels=1,
    )


@pytest.fixture
def tiny_model(tiny_config):
    return FeatureExtractor(tiny_config)


@pytest.fixture
def tiny_head(tiny_config):
    return CosineHead(tiny_config.feature_dim, 4)
