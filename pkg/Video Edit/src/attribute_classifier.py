#!/usr/bin/env python3
"""
Shape attribute classifier
Small CNN with a colour head and a shape head, trained on the synthetic corpus;
stands in for a joint text-image embedding when scoring prompt fidelity
"""

import logging
from pathlib import Path
from typing import Dict, List, Sequence, Tuple, Union

import torch
from torch import nn
from torch.nn import functional as F
from tqdm import tqdm

from .clip_io import read_arrays, write_arrays
from .errors import ArchiveFormatError, ParameterError
from .vocabulary import COLORS, SHAPES, prompt_attributes

logger = logging.getLogger(__name__)


class AttributeClassifier(nn.Module):
    """Predicts (colour, shape) of the dominant shape in a [0, 1] RGB image"""

    def __init__(self, width: int = 32):
        super().__init__()
        self.width = width
        self.features = nn.Sequential(
            nn.Conv2d(3, width // 2, 3, stride=2, padding=1), nn.SiLU(),
            nn.Conv2d(width // 2, width, 3, stride=2, padding=1), nn.SiLU(),
            nn.Conv2d(width, width, 3, stride=2, padding=1), nn.SiLU(),
            nn.AdaptiveAvgPool2d(1), nn.Flatten(),
        )
        self.color_head = nn.Linear(width, len(COLORS))
        self.shape_head = nn.Linear(width, len(SHAPES))

    def forward(self, images: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        h = self.features(images * 2.0 - 1.0)
        return self.color_head(h), self.shape_head(h)

    @torch.no_grad()
    def predict(self, images: torch.Tensor) -> Dict[str, List[str]]:
        if images.ndim == 3:
            images = images[None]
        color_logits, shape_logits = self(images.float())
        return {
            "color": [COLORS[i] for i in color_logits.argmax(dim=1).tolist()],
            "shape": [SHAPES[i] for i in shape_logits.argmax(dim=1).tolist()],
        }


def caption_labels(caption: str) -> Tuple[int, int]:
    attrs = prompt_attributes(caption)
    if "color" not in attrs or "shape" not in attrs:
        raise ParameterError(f"caption '{caption}' lacks a colour or shape label")
    return COLORS.index(attrs["color"]), SHAPES.index(attrs["shape"])


def train_attribute_classifier(images: torch.Tensor, captions: Sequence[str], steps: int = 1500,
                               batch_size: int = 32, learning_rate: float = 1e-3, seed: int = 0,
                               show_progress: bool = False) -> AttributeClassifier:
    """
    Args:
        images: (N, 3, H, W) in [0, 1]
        captions: "<color> <shape> on <background>" per image

    Returns:
        Classifier in eval mode
    """
    if len(images) == 0 or len(images) != len(captions):
        raise ParameterError("classifier training needs matching, non-empty images and captions")
    labels = torch.tensor([caption_labels(c) for c in captions], dtype=torch.long)

    torch.manual_seed(seed)
    generator = torch.Generator().manual_seed(seed)
    classifier = AttributeClassifier()
    optimizer = torch.optim.Adam(classifier.parameters(), lr=learning_rate)
    classifier.train()

    for step in tqdm(range(steps), desc="classifier", disable=not show_progress):
        idx = torch.randint(len(images), (batch_size,), generator=generator)
        color_logits, shape_logits = classifier(images[idx].float())
        loss = F.cross_entropy(color_logits, labels[idx, 0]) + F.cross_entropy(shape_logits, labels[idx, 1])
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()
        if step % 250 == 0:
            logger.debug(f"classifier step {step}: loss {loss.item():.4f}")

    classifier.eval()
    accuracy = classifier_accuracy(classifier, images, captions)
    logger.info(f"✅ Attribute classifier trained: colour {accuracy['color']:.2%}, shape {accuracy['shape']:.2%}")
    return classifier


def classifier_accuracy(classifier: AttributeClassifier, images: torch.Tensor,
                        captions: Sequence[str]) -> Dict[str, float]:
    predictions = classifier.predict(images)
    truth = [prompt_attributes(c) for c in captions]
    return {
        head: sum(p == t[head] for p, t in zip(predictions[head], truth)) / len(truth)
        for head in ("color", "shape")
    }


def save_classifier(classifier: AttributeClassifier, path: Union[str, Path]) -> Path:
    header = {"kind": "attribute_classifier", "width": classifier.width,
              "colors": list(COLORS), "shapes": list(SHAPES)}
    return write_arrays(path, {k: v.detach().cpu() for k, v in classifier.state_dict().items()}, header)


def load_classifier(path: Union[str, Path]) -> AttributeClassifier:
    arrays, header = read_arrays(path)
    if header.get("kind") != "attribute_classifier":
        raise ArchiveFormatError(f"{path} is not an attribute classifier archive")
    if header.get("colors") != list(COLORS) or header.get("shapes") != list(SHAPES):
        raise ArchiveFormatError(f"{path} was trained on a different label set")
    classifier = AttributeClassifier(int(header["width"]))
    classifier.load_state_dict(arrays)
    classifier.eval()
    return classifier
