import pytest
import torch

from mmdiff.data import make_dataset
from mmdiff.embedder import DecoderConfig
from mmdiff.model import DiffusionModel, ScheduleConfig
from mmdiff.unet import UNetConfig

torch.set_num_threads(1)


def tiny_decoder_config(**overrides) -> DecoderConfig:
    kwargs = dict(n_layers=2, n_heads=2, d_model=16, vocab_size=16,
                  image_tokens=4, image_size=32, adapter_rank=4)
    kwargs.update(overrides)
    return DecoderConfig(**kwargs)


def tiny_unet_config(**overrides) -> UNetConfig:
    kwargs = dict(base_channels=8, channel_mults=(1, 2), attention_levels=(1,),
                  cross_attention_dim=16, time_dim=16, n_heads=2, image_size=32)
    kwargs.update(overrides)
    return UNetConfig(**kwargs)


def tiny_model(seed: int = 0, T: int = 50, **kwargs) -> DiffusionModel:
    torch.manual_seed(seed)
    return DiffusionModel(
        decoder_config=tiny_decoder_config(),
        unet_config=tiny_unet_config(),
        schedule_config=ScheduleConfig(T=T),
        **kwargs,
    )


@pytest.fixture(scope="session")
def small_dataset():
    return make_dataset(48, seed=11)


@pytest.fixture(scope="session")
def shared_tiny_model():
    model = tiny_model(seed=3)
    model.eval()
    return model
