import numpy as np
import pytest
import torch
from hypothesis import HealthCheck, settings

from sdcodec.codec import preset
from sdcodec.config import default_config

settings.register_profile(
    "default", deadline=None, max_examples=25, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("default")
torch.set_num_threads(1)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def toy_cfg():
    return preset("toy")


def micro_config(steps=20, seed=0):
    """Smallest run that still exercises every discriminator and mel scale."""
    cfg = default_config("toy")
    cfg.codec.encoder_channels = 4
    cfg.codec.decoder_channels = 16
    cfg.train.total_steps = steps
    cfg.train.batch_size = 2
    cfg.train.segment_s = 0.128  # 2048 samples, the largest window
    cfg.train.warmup_steps = min(5, steps - 1)
    cfg.train.checkpoint_every = 10
    cfg.train.seed = seed
    cfg.train.gamma = None
    cfg.disc.mpd_channels = (4, 4, 8, 8)
    cfg.disc.stft_channels = 2
    return cfg.validate()


@pytest.fixture
def micro_cfg():
    return micro_config()
