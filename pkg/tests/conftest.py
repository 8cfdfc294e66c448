import numpy as np
import pytest
import torch

from voldiff.unet import UNetConfig, build_unet


def toy_config(**overrides) -> UNetConfig:
    params = dict(
        levels=2,
        base_channels=4,
        channel_mult=[1, 2],
        blocks_per_level=1,
        time_embed_dim=16,
        in_channels=1,
        patch_edge=8,
    )
    params.update(overrides)
    return UNetConfig(**params)


@pytest.fixture
def toy_net():
    return build_unet(toy_config(), seed=0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def torch_gen():
    return torch.Generator().manual_seed(1234)
