import sys
from pathlib import Path

import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))

from tinymodel import build


@pytest.fixture(scope="session")
def tiny_checkpoint(tmp_path_factory):
    root = tmp_path_factory.mktemp("ckpt")
    model = build()
    path = root / "tiny.pt"
    torch.save(model.state_dict(), path)
    return path, model


@pytest.fixture(scope="session")
def samples():
    torch.manual_seed(1)
    return torch.randint(0, 32, (64, 6))
