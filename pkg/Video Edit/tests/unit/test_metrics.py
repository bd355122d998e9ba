#!/usr/bin/env python3
"""
Unit tests for flow warping, Pixel-MSE, frame similarity, prompt fidelity and block matching
"""

import os
import sys

import pytest
import torch

# Add the project root to the path (two levels up from tests/unit/)
sys.path.append(os.path.join(os.path.dirname(__file__), '..', '..'))

from src.attribute_classifier import AttributeClassifier
from src.errors import ParameterError, ShapeError, UnsupportedConfigurationError
from src.metrics import (
    FlowField, ToyImageEmbedder, attribute_score, block_matching_flow, consistency_mask, estimate_flow,
    evaluate_clip, frame_similarity, pixel_mse, prompt_fidelity, warp,
)
from src.synth import moving_shapes_fixture
from src.vocabulary import COLORS, SHAPES


def _textured(seed: int = 0, size: int = 32) -> torch.Tensor:
    generator = torch.Generator().manual_seed(seed)
    coarse = torch.rand(1, 3, 6, 6, generator=generator)
    smooth = torch.nn.functional.interpolate(coarse, size=(size, size), mode="bicubic", align_corners=True)[0]
    return (smooth + 0.1 * torch.rand(3, size, size, generator=generator)).clamp(0, 1)


class FixedClassifier:
    """Stands in for AttributeClassifier with fixed labels"""

    def __init__(self, color: str, shape: str):
        self.color, self.shape = color, shape

    def predict(self, images):
        n = len(images)
        return {"color": [self.color] * n, "shape": [self.shape] * n}


def test_zero_flow_is_identity():
    frame = _textured()
    warped, valid = warp(frame, FlowField.zeros(32, 32))
    assert torch.equal(warped, frame)
    assert bool(valid.all())


def test_integer_translation_is_exact():
    frame = _textured()
    warped, valid = warp(frame, FlowField.constant(2, 0, 32, 32))
    assert torch.equal(warped[:, :, 2:], frame[:, :, :-2])
    assert not bool(valid[:, :2].any()) and bool(valid[:, 2:].all())


def test_half_pixel_shift_interpolates():
    ramp = torch.arange(16, dtype=torch.float32).repeat(3, 16, 1)
    warped, valid = warp(ramp, FlowField.constant(0.5, 0, 16, 16))
    assert torch.allclose(warped[:, :, 1:], ramp[:, :, 1:] - 0.5, atol=1e-5)
    assert not bool(valid[:, 0].any()) and bool(valid[:, 1:].all())


def test_warp_size_mismatch():
    with pytest.raises(ShapeError):
        warp(torch.zeros(3, 16, 16), FlowField.zeros(8, 8))


def test_synthetic_flow_warps_exactly():
    clip = moving_shapes_fixture(seed=3)
    for i, flow in enumerate(clip.flows):
        warped, valid = warp(clip.frames[i], flow)
        err = ((warped - clip.frames[i + 1]).pow(2).mean(dim=0) * valid).sum() / valid.sum()
        assert float(err) < 1e-3


def test_pixel_mse_static_clip_is_zero():
    frames = _textured().expand(4, -1, -1, -1)
    assert pixel_mse(frames, [FlowField.zeros(32, 32)] * 3) == 0.0


def test_pixel_mse_unit_offset():
    first = torch.full((3, 8, 8), 100.0 / 255.0)
    second = first + 1.0 / 255.0
    assert pixel_mse([first, second], [FlowField.zeros(8, 8)]) == pytest.approx(1.0, rel=1e-4)


def test_pixel_mse_edge_cases():
    frame = torch.rand(3, 8, 8)
    assert pixel_mse([frame], []) == 0.0
    with pytest.raises(ParameterError):
        pixel_mse([frame, frame], [])


def test_similarity_of_identical_frames():
    frame = _textured()
    assert frame_similarity([frame, frame, frame]) == pytest.approx(1.0)


def test_similarity_of_negated_frame():
    frame = _textured()
    assert frame_similarity([frame, 1.0 - frame]) == pytest.approx(-1.0)


def test_constant_frame_embeds_to_zero():
    embedder = ToyImageEmbedder()
    assert float(embedder.embed_image(torch.full((3, 16, 16), 0.3)).abs().sum()) == 0.0
    with pytest.raises(UnsupportedConfigurationError):
        embedder.embed_text("red")
    with pytest.raises(ParameterError):
        frame_similarity([_textured()])


@pytest.mark.parametrize("alpha, beta", [(0.5, 0.2), (2.0, -0.3), (1.0, 0.4)])
def test_embedding_ignores_brightness_and_contrast(alpha, beta):
    embedder = ToyImageEmbedder()
    frame = _textured(seed=2)
    assert torch.allclose(embedder.embed_image(alpha * frame + beta), embedder.embed_image(frame), atol=1e-6)
    assert frame_similarity([frame, alpha * frame + beta]) == pytest.approx(1.0)


def test_more_frame_noise_means_worse_scores():
    base = _textured(seed=5)
    generator = torch.Generator().manual_seed(0)
    noise = [torch.randn(3, 32, 32, generator=generator) for _ in range(4)]
    flows = [FlowField.zeros(32, 32)] * 3
    mse, similarity = [], []
    for sigma in (0.05, 0.2, 0.8):
        frames = [base + sigma * n for n in noise]
        mse.append(pixel_mse(frames, flows))
        similarity.append(frame_similarity(frames))
    assert mse[0] < mse[1] < mse[2]
    assert similarity[0] > similarity[1] > similarity[2]


def test_uniform_noise_scores_chance():
    generator = torch.Generator().manual_seed(3)
    frames = torch.rand(12, 3, 16, 16, generator=generator)
    classifier = AttributeClassifier()
    colours = [prompt_fidelity(frames, c, classifier) for c in COLORS]
    shapes = [prompt_fidelity(frames, s, classifier) for s in SHAPES]
    assert sum(colours) / len(COLORS) == pytest.approx(1.0 / len(COLORS))
    assert sum(shapes) / len(SHAPES) == pytest.approx(1.0 / len(SHAPES))


def test_prompt_fidelity_with_fixed_classifier():
    frames = torch.rand(4, 3, 16, 16)
    classifier = FixedClassifier("red", "circle")
    assert prompt_fidelity(frames, "red circle", classifier) == 1.0
    assert prompt_fidelity(frames, "blue square", classifier) == 0.0
    assert prompt_fidelity(frames, "red square", classifier) == 0.5
    assert attribute_score(frames, "red", classifier) == 1.0
    with pytest.raises(ParameterError):
        prompt_fidelity(frames, "on gray", classifier)
    with pytest.raises(ParameterError, match="pink"):
        prompt_fidelity(frames, "pink circle", classifier)
    with pytest.raises(ParameterError, match="hexagon"):
        prompt_fidelity(frames, "red hexagon", classifier)
    with pytest.raises(ParameterError):
        attribute_score(frames, "gray", classifier)


def test_untrained_classifier_runs():
    frames = torch.rand(3, 3, 16, 16)
    predictions = AttributeClassifier().predict(frames)
    assert len(predictions["color"]) == 3 and len(predictions["shape"]) == 3


def test_block_matching_identical_frames():
    frame = _textured()
    assert float(block_matching_flow(frame, frame).flow.abs().max()) == 0.0


def test_block_matching_finds_shift():
    frame = _textured(size=48)
    shifted = torch.zeros_like(frame)
    shifted[:, :, 3:] = frame[:, :, :-3]
    flow = block_matching_flow(frame, shifted, block=8, radius=4).flow
    interior = flow[:, 8:40, 8:40]
    assert bool((interior[0] == 3).all()) and bool((interior[1] == 0).all())
    with pytest.raises(ParameterError):
        block_matching_flow(frame, shifted, radius=0)


def test_block_matching_on_textured_pair():
    frame = _textured(seed=4, size=64)
    shifted = torch.roll(frame, shifts=(1, 2), dims=(1, 2))
    truth = FlowField.constant(2, 1, 64, 64).flow
    estimated = block_matching_flow(frame, shifted, block=8, radius=4).flow
    interior = (slice(None), slice(8, 56), slice(8, 56))
    error = (estimated[interior] - truth[interior]).pow(2).sum(dim=0).sqrt()
    assert float((error < 1.0).float().mean()) >= 0.9


def test_consistency_mask_keeps_consistent_flow():
    forward = FlowField.constant(2, 0, 16, 16)
    backward = FlowField.constant(-2, 0, 16, 16)
    mask = consistency_mask(forward, backward)
    assert bool(mask[:, 2:].bool().all()) and not bool(mask[:, :2].bool().any())
    inconsistent = consistency_mask(forward, FlowField.constant(2, 0, 16, 16))
    assert not bool(inconsistent.bool().any())


def test_estimate_flow_attaches_mask():
    frame = _textured()
    flow = estimate_flow(frame, frame)
    assert flow.mask is not None and bool(flow.mask.bool().all())


def test_evaluate_clip_report():
    clip = moving_shapes_fixture(seed=0, resolution=32, n_frames=3)
    report = evaluate_clip(clip, "red circle", clip.flows, FixedClassifier("red", "circle"), variant="input")
    data = report.to_dict()
    assert set(data) == {"clip_id", "variant", "pixel_mse", "frame_similarity", "prompt_fidelity",
                         "n_frames", "resolution"}
    assert data["n_frames"] == 3 and data["resolution"] == [32, 32]
    assert data["prompt_fidelity"] == 1.0 and data["pixel_mse"] < 1.0
    assert evaluate_clip(clip, "red circle", clip.flows).prompt_fidelity is None


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-q"]))
