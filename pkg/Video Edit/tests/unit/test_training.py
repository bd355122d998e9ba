#!/usr/bin/env python3
"""
Smoke tests for toy denoiser and attribute classifier training
"""

import math
import os
import sys

import pytest
import torch

# Add the project root to the path (two levels up from tests/unit/)
sys.path.append(os.path.join(os.path.dirname(__file__), '..', '..'))

from conftest import slow, tiny_config
from src.attribute_classifier import (
    classifier_accuracy, load_classifier, save_classifier, train_attribute_classifier,
)
from src.errors import ArchiveFormatError, ParameterError, ShapeError
from src.schedule import make_schedule
from src.synth import generate_corpus
from src.training import TrainingConfig, train_toy


def test_single_step_is_finite():
    dataset = generate_corpus(2, seed=0, resolution=16, n_frames=2)
    result = train_toy(dataset, steps=1, config=tiny_config(), training=TrainingConfig(batch_size=2))
    assert len(result.losses) == 1 and math.isfinite(result.final_loss)
    assert not result.model.training


def test_training_is_seeded():
    dataset = generate_corpus(2, seed=0, resolution=16, n_frames=2)
    settings = TrainingConfig(batch_size=2, seed=3)
    a = train_toy(dataset, steps=3, config=tiny_config(), training=settings)
    b = train_toy(dataset, steps=3, config=tiny_config(), training=settings)
    assert a.losses == b.losses


def test_training_input_errors():
    with pytest.raises(ParameterError):
        train_toy([], steps=1, config=tiny_config())
    with pytest.raises(ShapeError):
        train_toy(generate_corpus(1, seed=0, resolution=32, n_frames=1), steps=1, config=tiny_config())
    with pytest.raises(ParameterError):
        TrainingConfig(caption_dropout=1.0)


@slow
def test_loss_halves():
    dataset = generate_corpus(64, seed=0)
    result = train_toy(dataset, steps=5000, sched=make_schedule())
    assert result.final_loss <= 0.5 * result.initial_loss


def _classifier_data(n_clips: int, seed: int, resolution: int = 16):
    examples = generate_corpus(n_clips, seed=seed, resolution=resolution, n_frames=1)
    images = torch.stack([(e.image + 1) / 2 for e in examples])
    return images, [e.caption for e in examples]


def test_classifier_round_trip(tmp_path):
    images, captions = _classifier_data(4, seed=0)
    classifier = train_attribute_classifier(images, captions, steps=2, batch_size=4)
    loaded = load_classifier(save_classifier(classifier, tmp_path / "classifier.bin"))
    assert loaded.predict(images) == classifier.predict(images)
    with pytest.raises(ParameterError):
        train_attribute_classifier(images, captions[:2], steps=1)


def test_classifier_rejects_other_archives(tmp_path):
    from src.clip_io import write_arrays
    with pytest.raises(ArchiveFormatError):
        load_classifier(write_arrays(tmp_path / "x.bin", {"w": torch.zeros(1)}, {"kind": "denoiser"}))


@slow
def test_classifier_accuracy():
    images, captions = _classifier_data(400, seed=0, resolution=64)
    classifier = train_attribute_classifier(images, captions)
    held_out, held_captions = _classifier_data(100, seed=99, resolution=64)
    accuracy = classifier_accuracy(classifier, held_out, held_captions)
    assert accuracy["color"] >= 0.95 and accuracy["shape"] >= 0.95


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-q"]))
