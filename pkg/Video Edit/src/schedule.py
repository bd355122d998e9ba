#!/usr/bin/env python3
"""
DDIM noise schedule
Deterministic sampling step, x0 prediction and exact DDIM inversion
"""

import hashlib
import json
import logging
import math
from dataclasses import dataclass, field, replace
from typing import Dict, Optional, Tuple, Union

import torch

from .errors import ParameterError, ShapeError, UnsupportedConfigurationError

logger = logging.getLogger(__name__)

# Train-step index standing for the clean end of the chain (alpha_bar = 1)
CLEAN_STEP = -1


@dataclass(frozen=True, eq=False)
class LatentFrame:
    """An image-shaped latent at one diffusion step of one frame"""
    data: torch.Tensor
    step: int
    frame_index: int = 1

    def with_data(self, data: torch.Tensor, step: Optional[int] = None) -> "LatentFrame":
        return replace(self, data=data, step=self.step if step is None else step)


TensorLike = Union[LatentFrame, torch.Tensor]


def _tensor(x: TensorLike) -> torch.Tensor:
    return x.data if isinstance(x, LatentFrame) else x


@dataclass(frozen=True, eq=False)
class DiffusionSchedule:
    """
    Alpha-bar table plus the strided inference timesteps

    timesteps holds train-step indices in strictly decreasing order; the step
    after the last one is CLEAN_STEP, where alpha_bar is taken to be 1.
    """
    num_train_steps: int
    num_inference_steps: int
    beta_start: float
    beta_end: float
    eta: float
    alpha_bar: torch.Tensor = field(repr=False)
    timesteps: torch.Tensor = field(repr=False)

    @property
    def stride(self) -> int:
        return self.num_train_steps // self.num_inference_steps

    def alpha_bar_at(self, t: int) -> float:
        t = int(t)
        if t == CLEAN_STEP:
            return 1.0
        if not 0 <= t < self.num_train_steps:
            raise ParameterError(f"train step {t} outside [0, {self.num_train_steps})")
        return float(self.alpha_bar[t])

    def index_of(self, t: int) -> int:
        """Position of t in the inference timesteps (0 = noisiest)"""
        matches = (self.timesteps == int(t)).nonzero()
        if len(matches) == 0:
            raise ParameterError(f"{t} is not an inference timestep of this schedule")
        return int(matches[0])

    def prev_timestep(self, t: int) -> int:
        """The less noisy step a DDIM step from t lands on"""
        idx = self.index_of(t)
        if idx + 1 < self.num_inference_steps:
            return int(self.timesteps[idx + 1])
        return CLEAN_STEP

    def next_timestep(self, t: int) -> int:
        """The noisier step an inversion step from t lands on"""
        if int(t) == CLEAN_STEP:
            return int(self.timesteps[-1])
        idx = self.index_of(t)
        if idx == 0:
            raise ParameterError(f"{t} is the noisiest timestep; nothing to invert towards")
        return int(self.timesteps[idx - 1])

    def sigma(self, t: int) -> float:
        if self.eta == 0:
            return 0.0
        a_t = self.alpha_bar_at(t)
        a_prev = self.alpha_bar_at(self.prev_timestep(t))
        return self.eta * math.sqrt((1 - a_prev) / (1 - a_t)) * math.sqrt(1 - a_t / a_prev)

    def fingerprint(self) -> Dict:
        return {
            "num_train_steps": self.num_train_steps,
            "num_inference_steps": self.num_inference_steps,
            "beta_start": self.beta_start,
            "beta_end": self.beta_end,
            "eta": self.eta,
            "schedule": "linear",
        }

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.fingerprint(), sort_keys=True).encode()).hexdigest()


def make_schedule(num_train_steps: int = 1000, num_inference_steps: int = 50,
                  beta_start: float = 1e-4, beta_end: float = 2e-2,
                  eta: float = 0.0) -> DiffusionSchedule:
    """
    Build a linear-beta schedule with evenly strided inference timesteps

    Args:
        num_train_steps: Length of the alpha_bar table
        num_inference_steps: Number T of sampling steps
        beta_start: First beta
        beta_end: Last beta
        eta: Stochasticity of the sampler (0 = deterministic DDIM)

    Returns:
        DiffusionSchedule
    """
    if int(num_train_steps) != num_train_steps or num_train_steps <= 0:
        raise ParameterError(f"num_train_steps must be a positive integer, got {num_train_steps}")
    if int(num_inference_steps) != num_inference_steps or not 0 < num_inference_steps <= num_train_steps:
        raise ParameterError(
            f"num_inference_steps must lie in (0, {num_train_steps}], got {num_inference_steps}")
    if not 0 < beta_start <= beta_end < 1:
        raise ParameterError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    if eta < 0:
        raise ParameterError(f"eta must be >= 0, got {eta}")

    betas = torch.linspace(beta_start, beta_end, num_train_steps, dtype=torch.float64)
    alpha_bar = torch.cumprod(1.0 - betas, dim=0)
    if num_train_steps > 1 and not bool((alpha_bar[1:] < alpha_bar[:-1]).all()):
        raise ParameterError("alpha_bar is not strictly decreasing")
    if alpha_bar[0] <= 0.99 or alpha_bar[-1] >= 0.05:
        logger.warning(
            f"⚠️  Schedule endpoints alpha_bar[0]={float(alpha_bar[0]):.4f}, "
            f"alpha_bar[-1]={float(alpha_bar[-1]):.4f} do not span clean to pure noise")

    stride = num_train_steps // num_inference_steps
    timesteps = (torch.arange(num_inference_steps, dtype=torch.long) * stride).flip(0)

    return DiffusionSchedule(
        num_train_steps=int(num_train_steps),
        num_inference_steps=int(num_inference_steps),
        beta_start=float(beta_start),
        beta_end=float(beta_end),
        eta=float(eta),
        alpha_bar=alpha_bar,
        timesteps=timesteps,
    )


def _check_pair(x: torch.Tensor, eps: torch.Tensor) -> None:
    if x.shape != eps.shape:
        raise ShapeError(f"latent shape {tuple(x.shape)} != noise shape {tuple(eps.shape)}")


def add_noise(x0: torch.Tensor, noise: torch.Tensor, t: Union[int, torch.Tensor],
              sched: DiffusionSchedule) -> torch.Tensor:
    """Forward noising sqrt(a)*x0 + sqrt(1-a)*noise; t may be a batch of train steps"""
    _check_pair(x0, noise)
    if isinstance(t, torch.Tensor) and t.ndim > 0:
        a = sched.alpha_bar[t.cpu()].to(dtype=x0.dtype, device=x0.device)
        a = a.view(-1, *([1] * (x0.ndim - 1)))
        return a.sqrt() * x0 + (1 - a).sqrt() * noise
    a = sched.alpha_bar_at(int(t))
    return math.sqrt(a) * x0 + math.sqrt(1 - a) * noise


def predict_x0(x_t: TensorLike, eps: torch.Tensor, t: int, sched: DiffusionSchedule) -> torch.Tensor:
    """x0 = (x_t - sqrt(1 - a_t) * eps) / sqrt(a_t)"""
    x = _tensor(x_t)
    _check_pair(x, eps)
    a_t = sched.alpha_bar_at(t)
    return (x - math.sqrt(1 - a_t) * eps) / math.sqrt(a_t)


def ddim_step(x_t: LatentFrame, eps: torch.Tensor, t: int, sched: DiffusionSchedule,
              noise: Optional[torch.Tensor] = None) -> Tuple[LatentFrame, torch.Tensor]:
    """
    One DDIM sampling step from t to its predecessor

    Returns:
        (x_prev, x0_pred) - the next latent and the x0 estimate used to build it
    """
    x = _tensor(x_t)
    t_prev = sched.prev_timestep(t)
    a_prev = sched.alpha_bar_at(t_prev)
    sigma = sched.sigma(t)

    x0 = predict_x0(x, eps, t, sched)
    direction = math.sqrt(max(1.0 - a_prev - sigma ** 2, 0.0))
    x_prev = math.sqrt(a_prev) * x0 + direction * eps
    if sigma > 0:
        if noise is None:
            raise ParameterError(f"sigma_t = {sigma:.3g} > 0 requires a noise sample")
        _check_pair(x, noise)
        x_prev = x_prev + sigma * noise

    frame_index = x_t.frame_index if isinstance(x_t, LatentFrame) else 1
    return LatentFrame(x_prev, t_prev, frame_index), x0


def ddim_invert_step(x_t: LatentFrame, eps: torch.Tensor, t: int,
                     sched: DiffusionSchedule) -> LatentFrame:
    """
    Algebraic inverse of the deterministic DDIM step

    Maps x at step t to x at next_timestep(t) so that ddim_step with the same
    eps brings it back. t = CLEAN_STEP starts from the image itself.
    """
    if sched.eta != 0:
        raise UnsupportedConfigurationError("DDIM inversion needs the deterministic sampler (eta = 0)")
    x = _tensor(x_t)
    _check_pair(x, eps)
    t_next = sched.next_timestep(t)
    a_t = sched.alpha_bar_at(t)
    a_next = sched.alpha_bar_at(t_next)

    x0 = (x - math.sqrt(1 - a_t) * eps) / math.sqrt(a_t)
    x_next = math.sqrt(a_next) * x0 + math.sqrt(1 - a_next) * eps

    frame_index = x_t.frame_index if isinstance(x_t, LatentFrame) else 1
    return LatentFrame(x_next, t_next, frame_index)
