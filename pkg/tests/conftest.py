import warnings

import numpy as np
import pytest

from fundusda.config import build_config
from fundusda.data import generate_synthetic_pair

# model-construction warnings about missing pretrained weights are expected
warnings.filterwarnings("ignore", message=".*without pretrained weights.*")
warnings.filterwarnings("ignore", message=".*frozen random weights.*")


def toy_config(**overrides):
    base = {
        "encoder_variant": "toy",
        "image_size": 64,
        "batch_size": 4,
        "epochs": 2,
        "eval_every": 1,
        "seed": 0,
        "augment": {"enabled": False},
        "synthetic": {"n_images": 8},
    }
    for key, value in overrides.items():
        if isinstance(value, dict) and isinstance(base.get(key), dict):
            base[key].update(value)
        else:
            base[key] = value
    return build_config(base)


@pytest.fixture(scope="session")
def tiny_domains():
    """Small labeled source/target sets shared by training-path tests."""
    rng = np.random.default_rng(99)
    synth = build_config({}).synthetic
    return generate_synthetic_pair(synth.source, synth.target, 12, rng, size=64)
