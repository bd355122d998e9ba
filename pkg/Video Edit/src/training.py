#!/usr/bin/env python3
"""
Toy denoiser training
Standard noise-prediction objective over (image, caption, depth) triples
"""

import logging
import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import torch
from torch.nn import functional as F
from tqdm import tqdm

from .denoiser import DenoiserConfig, ToyDenoiser
from .errors import ParameterError, ShapeError
from .schedule import DiffusionSchedule, add_noise, make_schedule

logger = logging.getLogger(__name__)


@dataclass(eq=False)
class TrainingExample:
    image: torch.Tensor    # (3, H, W) in [-1, 1]
    caption: str
    depth: torch.Tensor    # (H, W) in [0, 1]


@dataclass
class TrainingConfig:
    steps: int = 5000
    batch_size: int = 16
    learning_rate: float = 2e-4
    caption_dropout: float = 0.1
    grad_clip: float = 1.0
    log_every: int = 100
    seed: int = 0

    def __post_init__(self):
        if self.steps < 1 or self.batch_size < 1:
            raise ParameterError("training needs steps >= 1 and batch_size >= 1")
        if not 0.0 <= self.caption_dropout < 1.0:
            raise ParameterError(f"caption_dropout must lie in [0, 1), got {self.caption_dropout}")
        if self.learning_rate <= 0:
            raise ParameterError(f"learning_rate must be positive, got {self.learning_rate}")


@dataclass(eq=False)
class TrainingResult:
    model: ToyDenoiser
    losses: List[float] = field(default_factory=list)

    @property
    def initial_loss(self) -> float:
        head = self.losses[:max(1, len(self.losses) // 20)]
        return sum(head) / len(head)

    @property
    def final_loss(self) -> float:
        tail = self.losses[-max(1, len(self.losses) // 20):]
        return sum(tail) / len(tail)


def train_toy(dataset: Sequence[TrainingExample], steps: Optional[int] = None,
              config: Optional[DenoiserConfig] = None, sched: Optional[DiffusionSchedule] = None,
              training: Optional[TrainingConfig] = None, show_progress: bool = False) -> TrainingResult:
    """
    Train a toy denoiser from scratch

    Args:
        dataset: Training triples at config.image_size resolution
        steps: Optimizer steps (overrides training.steps)
        config: Denoiser architecture
        sched: Schedule supplying alpha_bar (default 1000-step linear)
        training: Optimizer settings
        show_progress: Show a tqdm bar

    Returns:
        TrainingResult with the trained model (eval mode) and per-step losses
    """
    if not dataset:
        raise ParameterError("cannot train on an empty dataset")
    config = config or DenoiserConfig()
    training = training or TrainingConfig()
    steps = training.steps if steps is None else int(steps)
    if steps < 1:
        raise ParameterError(f"steps must be >= 1, got {steps}")
    sched = sched or make_schedule()

    size = config.image_size
    for example in dataset:
        if tuple(example.image.shape) != (config.image_channels, size, size):
            raise ShapeError(f"training image {tuple(example.image.shape)} does not match "
                             f"{config.image_size}x{config.image_size} model")

    torch.manual_seed(training.seed)
    generator = torch.Generator().manual_seed(training.seed)
    model = ToyDenoiser(config)
    model.train()
    optimizer = torch.optim.Adam(model.parameters(), lr=training.learning_rate)

    images = torch.stack([e.image for e in dataset]).float()
    depths = torch.stack([e.depth for e in dataset]).float().unsqueeze(1)
    captions = [e.caption for e in dataset]

    logger.info(f"🏋️ Training toy denoiser: {len(dataset)} examples, {steps} steps, "
                f"batch {training.batch_size}")
    losses: List[float] = []
    progress = tqdm(range(steps), desc="train", disable=not show_progress)
    for step in progress:
        idx = torch.randint(len(dataset), (training.batch_size,), generator=generator)
        x0 = images[idx]
        noise = torch.randn(x0.shape, generator=generator)
        t = torch.randint(sched.num_train_steps, (training.batch_size,), generator=generator)
        x_t = add_noise(x0, noise, t, sched).float()

        drop = torch.rand(training.batch_size, generator=generator) < training.caption_dropout
        batch_captions = ["" if d else captions[i] for i, d in zip(idx.tolist(), drop.tolist())]
        ids, mask = model.tokens.batch_ids(batch_captions)
        context = model.tokens(ids)

        eps, _ = model(x_t, t, context, mask, depths[idx])
        loss = F.mse_loss(eps, noise)
        if not math.isfinite(loss.item()):
            raise FloatingPointError(f"training loss became {loss.item()} at step {step}")

        optimizer.zero_grad()
        loss.backward()
        torch.nn.utils.clip_grad_norm_(model.parameters(), training.grad_clip)
        optimizer.step()

        losses.append(loss.item())
        progress.set_postfix(loss=f"{loss.item():.4f}")
        if step % training.log_every == 0 or step == steps - 1:
            logger.debug(f"step {step}: loss {loss.item():.4f}",
                         extra={"event": "training_progress", "step": step, "loss": loss.item()})

    model.eval()
    result = TrainingResult(model, losses)
    logger.info(f"✅ Training done: loss {result.initial_loss:.4f} -> {result.final_loss:.4f}")
    return result
