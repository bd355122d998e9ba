"""
Shared fixtures: a tiny denoiser and a short schedule so everything runs on CPU in seconds
"""

import os
import sys

import pytest
import torch

# Add the project root to the path (one level up from tests/)
sys.path.append(os.path.join(os.path.dirname(__file__), '..'))

from src.denoiser import DenoiserConfig, ToyDenoiser
from src.schedule import make_schedule

RUN_SLOW = os.environ.get("VIDEO_EDIT_RUN_SLOW") == "1"

slow = pytest.mark.skipif(not RUN_SLOW, reason="needs a trained toy model; set VIDEO_EDIT_RUN_SLOW=1")


def tiny_config() -> DenoiserConfig:
    return DenoiserConfig(image_size=16, base_channels=8, text_dim=8)


@pytest.fixture
def tiny_model() -> ToyDenoiser:
    torch.manual_seed(0)
    model = ToyDenoiser(tiny_config())
    model.eval()
    return model


@pytest.fixture
def tiny_sched():
    return make_schedule(1000, 10)


@pytest.fixture(scope="session")
def trained_model() -> ToyDenoiser:
    """Full-size toy denoiser: VIDEO_EDIT_WEIGHTS if set, else trained on the standard corpus"""
    from src.denoiser import load_denoiser
    from src.synth import generate_corpus
    from src.training import train_toy

    weights = os.environ.get("VIDEO_EDIT_WEIGHTS")
    if weights:
        return load_denoiser(weights)
    return train_toy(generate_corpus(64, seed=0), steps=5000).model


@pytest.fixture(scope="session")
def trained_classifier():
    from src.attribute_classifier import load_classifier, train_attribute_classifier
    from src.synth import generate_corpus

    weights = os.environ.get("VIDEO_EDIT_CLASSIFIER")
    if weights:
        return load_classifier(weights)
    examples = generate_corpus(400, seed=0, n_frames=1)
    images = torch.stack([(e.image + 1) / 2 for e in examples])
    return train_attribute_classifier(images, [e.caption for e in examples])
