import numpy as np
import pytest
import torch

torch.set_num_threads(1)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_model():
    from dynexit.model import ModelConfig, build_model

    cfg = ModelConfig(
        stages=3,
        in_channels=8,
        channels=8,
        hidden=(8, 8, 8),
        k=2,
        n_blocks=2,
        order_sets=((0,), (0, 1), (0, 1, 2)),
        pcm_channels=8,
        se_hidden=4,
        cls_hidden=8,
    )
    return build_model(cfg, seed=7).eval()
