import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from tournet.encoders import EncoderConfig
from tournet.model import PolicyModel


@pytest.fixture
def rng():
    return np.random.default_rng(20240817)


def tiny_gat(layers=1, d=16, heads=2, ff=32):
    return EncoderConfig(kind="gat", layers=layers, embed_dim=d, heads=heads, ff_dim=ff)


def tiny_gcn(layers=1, d=16):
    return EncoderConfig(kind="gcn", layers=layers, embed_dim=d)


@pytest.fixture
def tiny_model():
    return PolicyModel.init(tiny_gat(), 7, {"model_id": "tiny", "paradigm": "sl", "train_size": 6})
