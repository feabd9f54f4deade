from __future__ import annotations

import numpy as np
import pytest
import torch

from meco.rvq import CodecConfig, CodecTrainConfig, motion_windows, train_codec
from meco.synth import SynthConfig, synth_generate

# keep CPU math deterministic and the box responsive
torch.set_num_threads(2)


@pytest.fixture(scope="session")
def small_dataset():
    """10 clips, 2 styles, 4-6 s; shared by tokenizer and metric tests."""
    config = SynthConfig(count=10, min_duration=4.0, max_duration=6.0, style_count=2)
    return synth_generate(123, config)


@pytest.fixture(scope="session")
def tiny_codec_config():
    return CodecConfig(codebook_size=32, latent_dim=32, n_residual_layers=3)


@pytest.fixture(scope="session")
def tiny_codecs(small_dataset, tiny_codec_config):
    """Quickly trained per-part codecs; good enough for contract tests."""
    train = CodecTrainConfig(window=64, batch_size=8, steps=400, lr=2e-3)
    clips = [s.motion for s in small_dataset]
    out = {}
    for part in ("upper", "hands", "lower"):
        windows = motion_windows(clips, part, stride=8)
        out[part], _ = train_codec(windows, part, config=tiny_codec_config, train=train, seed=7)
    return out


@pytest.fixture()
def rng():
    return np.random.default_rng(0)
