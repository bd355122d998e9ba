#!/usr/bin/env python3
"""
Guided latent update
Pulls a frame's x0 prediction toward the previous frame's by a gradient step on the latent
"""

import logging
import math
from dataclasses import dataclass, replace
from enum import Enum
from typing import Dict, Iterable, Optional, Sequence, Tuple

import torch

from .attention_injection import AttentionControl
from .denoiser import ConditioningBundle, ToyDenoiser, denoise
from .errors import ParameterError, ShapeError
from .schedule import DiffusionSchedule, LatentFrame, TensorLike, predict_x0

logger = logging.getLogger(__name__)


class GradMethod(str, Enum):
    AUTODIFF = "autodiff"
    FROZEN_EPS = "frozen_eps"
    FINITE_DIFF = "finite_diff"


class Reduction(str, Enum):
    SUM = "sum"
    MEAN = "mean"


@dataclass(frozen=True)
class GuidanceConfig:
    """
    delta is the step size; guidance runs for the first active_steps
    iterations of the denoising loop (the highest-noise ones)
    """
    delta: float = 100.0
    active_steps: int = 25
    grad_method: GradMethod = GradMethod.AUTODIFF
    reduction: Reduction = Reduction.SUM
    finite_diff_h: float = 1e-3

    def __post_init__(self):
        try:
            object.__setattr__(self, "grad_method", GradMethod(self.grad_method))
            object.__setattr__(self, "reduction", Reduction(self.reduction))
        except ValueError as e:
            raise ParameterError(str(e))
        if self.delta < 0:
            raise ParameterError(f"delta must be >= 0, got {self.delta}")
        if self.active_steps < 0:
            raise ParameterError(f"active_steps must be >= 0, got {self.active_steps}")
        if self.finite_diff_h <= 0:
            raise ParameterError("finite_diff_h must be positive")

    def validate_for(self, sched: DiffusionSchedule) -> None:
        if self.active_steps > sched.num_inference_steps:
            raise ParameterError(f"active_steps {self.active_steps} exceeds the "
                                 f"{sched.num_inference_steps} inference steps")

    def disabled(self) -> "GuidanceConfig":
        return replace(self, delta=0.0)


def is_guidance_active(frame_index: int, step_index: int, cfg: GuidanceConfig) -> bool:
    """Frames after the first, inside the first active_steps iterations, with a nonzero delta"""
    return frame_index > 1 and step_index < cfg.active_steps and cfg.delta > 0


def guidance_loss(x0_cur: torch.Tensor, x0_prev: torch.Tensor,
                  reduction: Reduction = Reduction.SUM) -> torch.Tensor:
    """g = ||x0_cur - x0_prev||^2 (summed, or averaged with reduction="mean")"""
    if x0_cur.shape != x0_prev.shape:
        raise ShapeError(f"x0 shapes differ: {tuple(x0_cur.shape)} vs {tuple(x0_prev.shape)}")
    sq = (x0_cur - x0_prev).pow(2)
    return sq.mean() if Reduction(reduction) == Reduction.MEAN else sq.sum()


@dataclass(eq=False)
class GuidedPrediction:
    eps: torch.Tensor
    captured: Dict[int, torch.Tensor]
    x0: torch.Tensor
    grad: Optional[torch.Tensor] = None
    loss: Optional[float] = None


def _frozen_eps_grad(x0: torch.Tensor, x0_prev: torch.Tensor, a_t: float, reduction: Reduction) -> torch.Tensor:
    grad = 2.0 * (x0 - x0_prev) / math.sqrt(a_t)
    return grad / x0.numel() if reduction == Reduction.MEAN else grad


def _finite_diff_grad(model: ToyDenoiser, x: torch.Tensor, t: int, cond: ConditioningBundle,
                      control: Optional[AttentionControl], x0_prev: torch.Tensor, sched: DiffusionSchedule,
                      reduction: Reduction, h: float,
                      coords: Optional[Iterable[Tuple[int, ...]]]) -> torch.Tensor:
    def g(point: torch.Tensor) -> float:
        eps, _ = denoise(model, point, t, cond, control.without_capture() if control else None)
        return float(guidance_loss(predict_x0(point, eps, t, sched), x0_prev, reduction))

    grad = torch.zeros_like(x)
    coords = list(coords) if coords is not None else [tuple(c) for c in torch.nonzero(torch.ones_like(x)).tolist()]
    with torch.no_grad():
        for coord in coords:
            step = torch.zeros_like(x)
            step[coord] = h
            grad[coord] = (g(x + step) - g(x - step)) / (2 * h)
    return grad


def compute_grad(model: ToyDenoiser, x_t: TensorLike, t: int, cond: ConditioningBundle,
                 control: Optional[AttentionControl], x0_prev: torch.Tensor, sched: DiffusionSchedule,
                 method: GradMethod = GradMethod.AUTODIFF, reduction: Reduction = Reduction.SUM,
                 h: float = 1e-3, coords: Optional[Sequence[Tuple[int, ...]]] = None) -> torch.Tensor:
    """
    Gradient of g(x0(x_t), x0_prev) with respect to x_t

    Args:
        method: autodiff (through the denoiser), frozen_eps (eps held constant,
            closed form 2 (x0 - x0_prev) / sqrt(alpha_bar_t)) or finite_diff
            (central differences, for tests; coords restricts the entries
            evaluated, the rest stay zero)

    Returns:
        Tensor shaped like x_t
    """
    try:
        method = GradMethod(method)
        reduction = Reduction(reduction)
    except ValueError as e:
        raise ParameterError(str(e))
    x = x_t.data if isinstance(x_t, LatentFrame) else x_t
    if x.shape != x0_prev.shape:
        raise ShapeError(f"latent {tuple(x.shape)} and previous x0 {tuple(x0_prev.shape)} differ")

    if method == GradMethod.FINITE_DIFF:
        return _finite_diff_grad(model, x.detach(), t, cond, control, x0_prev, sched, reduction, h, coords)
    control = control.without_capture() if control else None
    return denoise_with_grad(model, x, t, cond, control, x0_prev, sched, method, reduction).grad


def denoise_with_grad(model: ToyDenoiser, x_t: TensorLike, t: int, cond: ConditioningBundle,
                      control: Optional[AttentionControl], x0_prev: Optional[torch.Tensor],
                      sched: DiffusionSchedule, method: GradMethod = GradMethod.AUTODIFF,
                      reduction: Reduction = Reduction.SUM) -> GuidedPrediction:
    """
    One denoiser call that also yields the guidance gradient

    With x0_prev None this is a plain no-grad denoise. finite_diff falls back to
    compute_grad and so costs extra denoiser calls.
    """
    method = GradMethod(method)
    reduction = Reduction(reduction)
    x = (x_t.data if isinstance(x_t, LatentFrame) else x_t).detach()

    if x0_prev is None or method != GradMethod.AUTODIFF:
        with torch.no_grad():
            eps, captured = denoise(model, x, t, cond, control)
            x0 = predict_x0(x, eps, t, sched)
        if x0_prev is None:
            return GuidedPrediction(eps, captured, x0)
        loss = float(guidance_loss(x0, x0_prev, reduction))
        if method == GradMethod.FROZEN_EPS:
            grad = _frozen_eps_grad(x0, x0_prev, sched.alpha_bar_at(t), reduction)
        else:
            grad = compute_grad(model, x, t, cond, control, x0_prev, sched, method, reduction)
        return GuidedPrediction(eps, captured, x0, grad, loss)

    with torch.enable_grad():
        x = x.requires_grad_(True)
        eps, captured = denoise(model, x, t, cond, control)
        x0 = predict_x0(x, eps, t, sched)
        loss = guidance_loss(x0, x0_prev.detach(), reduction)
        grad, = torch.autograd.grad(loss, x)
    return GuidedPrediction(eps.detach(), captured, x0.detach(), grad.detach(), float(loss.detach()))


def guided_update(x_prev_latent: LatentFrame, grad: torch.Tensor, delta: float) -> LatentFrame:
    """x_{t-1} - delta * grad, where grad was taken at x_t"""
    if delta < 0:
        raise ParameterError(f"delta must be >= 0, got {delta}")
    if x_prev_latent.data.shape != grad.shape:
        raise ShapeError(f"latent {tuple(x_prev_latent.data.shape)} and gradient {tuple(grad.shape)} differ")
    return x_prev_latent.with_data(x_prev_latent.data - delta * grad)
