#!/usr/bin/env python3
"""
Video editing pipeline
Invert every frame, then edit frame by frame with anchor/previous feature injection
and the guided latent update; plus single-image sampling and the ablation harness
"""

import logging
import threading
import time
from concurrent.futures import ThreadPoolExecutor, as_completed
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Protocol, Sequence, Tuple

import torch

from .attention_injection import (
    ALL_LAYERS, DECODER_LAYERS, LAYER_PRESETS, AttentionControl, FeatureCache, InjectionMode,
    InjectionPolicy, build_control, choose_random_previous,
)
from .clip_io import LatentStore, VideoClip, clip_digest
from .denoiser import ConditioningBundle, ToyDenoiser, denoise, make_conditioning, weights_digest
from .errors import ParameterError, ShapeError, StateError, UnsupportedConfigurationError
from .guidance import GuidanceConfig, denoise_with_grad, guided_update, is_guidance_active
from .metrics import (
    EmbeddingBackend, FlowField, MetricsReport, estimate_clip_flows, evaluate_clip,
)
from .schedule import CLEAN_STEP, DiffusionSchedule, LatentFrame, ddim_invert_step, ddim_step

logger = logging.getLogger(__name__)

__all__ = [
    "VideoClip", "EditSession", "AnchorUpdateHook", "AblationVariant", "VARIANT_PRESETS",
    "invert_frame", "invert_clip", "latent_sidecar", "sample", "generate_image", "reconstruct_clip",
    "edit_frame", "edit_clip", "make_variants", "run_ablation",
]


def to_model_space(image: torch.Tensor) -> torch.Tensor:
    return image * 2.0 - 1.0


def to_image_space(x: torch.Tensor) -> torch.Tensor:
    return ((x + 1.0) / 2.0).clamp(0.0, 1.0)


def _check_resolution(model: ToyDenoiser, clip: VideoClip) -> None:
    size = model.config.image_size
    if clip.resolution != (size, size):
        raise ShapeError(f"clip resolution {clip.resolution} does not match the {size}x{size} weights")


def invert_frame(model: ToyDenoiser, image: torch.Tensor, cond: ConditioningBundle,
                 sched: DiffusionSchedule, frame_index: int = 1) -> LatentFrame:
    """DDIM-invert one [0, 1] image to its x_T"""
    if sched.eta != 0:
        raise UnsupportedConfigurationError("DDIM inversion needs the deterministic sampler (eta = 0)")
    x = LatentFrame(to_model_space(image), CLEAN_STEP, frame_index)
    with torch.no_grad():
        for _ in range(sched.num_inference_steps):
            t_next = sched.next_timestep(x.step)
            eps, _ = denoise(model, x, t_next, cond)
            x = ddim_invert_step(x, eps, x.step, sched)
    return x


def latent_sidecar(clip: VideoClip, model: ToyDenoiser, sched: DiffusionSchedule,
                   guidance_scale: float) -> Dict:
    """Provenance stored next to inverted latents"""
    return {
        "clip_hash": clip_digest(clip),
        "weights_hash": weights_digest(model),
        "schedule": sched.fingerprint(),
        "guidance_scale": float(guidance_scale),
        "source_prompt": clip.source_prompt,
    }


def invert_clip(clip: VideoClip, model: ToyDenoiser, sched: DiffusionSchedule,
                guidance_scale: float = 1.0, store: Optional[LatentStore] = None) -> List[LatentFrame]:
    """
    Independent per-frame inversion under the source prompt and each frame's depth

    With a store, latents are looked up by clip, source prompt, weights, schedule
    and inversion CFG scale, and saved after a miss.
    """
    _check_resolution(model, clip)
    if sched.eta != 0:
        raise UnsupportedConfigurationError("DDIM inversion needs the deterministic sampler (eta = 0)")
    t_start = int(sched.timesteps[0])

    key = None
    if store is not None:
        key = LatentStore.key(clip_digest(clip), weights_digest(model), sched.digest(),
                              clip.source_prompt, guidance_scale)
        cached = store.load(key)
        if cached is not None:
            return [LatentFrame(x, t_start, i + 1) for i, x in enumerate(cached)]

    started = time.perf_counter()
    latents = []
    for i in range(clip.n_frames):
        cond = make_conditioning(model, clip.source_prompt, clip.depths[i], guidance_scale)
        latents.append(invert_frame(model, clip.frames[i], cond, sched, frame_index=i + 1))
    seconds = time.perf_counter() - started
    logger.info(f"🔄 Inverted {clip.n_frames} frames in {seconds:.1f}s",
                extra={"event": "inversion_done", "n_frames": clip.n_frames, "seconds": seconds})

    if store is not None:
        store.save(key, [x.data.float() for x in latents], latent_sidecar(clip, model, sched, guidance_scale))
    return latents


@dataclass(eq=False)
class SampleResult:
    image: torch.Tensor
    latent: LatentFrame
    x0s: List[torch.Tensor]
    features: Optional[FeatureCache] = None


def sample(model: ToyDenoiser, x_T: LatentFrame, cond: ConditioningBundle, sched: DiffusionSchedule,
           control_for_step: Optional[Callable[[int, int], AttentionControl]] = None,
           generator: Optional[torch.Generator] = None) -> SampleResult:
    """
    Plain DDIM sampling from x_T; control_for_step(step_index, t) chooses the
    attention control at each step and any captured features are cached
    """
    x = x_T
    x0s: List[torch.Tensor] = []
    cache = FeatureCache(x_T.frame_index)
    with torch.no_grad():
        for step_index, t in enumerate(sched.timesteps.tolist()):
            control = control_for_step(step_index, t) if control_for_step else None
            eps, captured = denoise(model, x, t, cond, control)
            for layer, features in captured.items():
                cache.record(t, layer, features)
            noise = _step_noise(x.data, sched, t, generator)
            x, x0 = ddim_step(x, eps, t, sched, noise)
            x0s.append(x0)
    return SampleResult(to_image_space(x.data), x, x0s, cache if len(cache) else None)


def _step_noise(like: torch.Tensor, sched: DiffusionSchedule, t: int,
                generator: Optional[torch.Generator]) -> Optional[torch.Tensor]:
    if sched.sigma(t) == 0:
        return None
    return torch.randn(like.shape, generator=generator, dtype=like.dtype)


def generate_image(model: ToyDenoiser, prompt: str, depth: torch.Tensor, sched: DiffusionSchedule,
                   guidance_scale: float = 7.5, seed: int = 0) -> torch.Tensor:
    """Text+depth-to-image sampling from seeded noise; returns a [0, 1] image"""
    generator = torch.Generator().manual_seed(seed)
    size = model.config.image_size
    x_T = torch.randn((model.config.image_channels, size, size), generator=generator)
    cond = make_conditioning(model, prompt, depth, guidance_scale)
    return sample(model, LatentFrame(x_T, int(sched.timesteps[0])), cond, sched, generator=generator).image


def reconstruct_clip(clip: VideoClip, latents: Sequence[LatentFrame], model: ToyDenoiser,
                     sched: DiffusionSchedule, guidance_scale: float = 1.0) -> torch.Tensor:
    """Resample inverted latents with the source prompt; (n, 3, H, W) in [0, 1]"""
    frames = []
    for i, x_T in enumerate(latents):
        cond = make_conditioning(model, clip.source_prompt, clip.depths[i], guidance_scale)
        frames.append(sample(model, x_T, cond, sched).image)
    return torch.stack(frames)


class AnchorUpdateHook(Protocol):
    """Called after each non-anchor frame; returning True promotes that frame's cache to anchor"""

    def __call__(self, frame_index: int, image: torch.Tensor, features: FeatureCache,
                 session: "EditSession") -> bool:
        ...


@dataclass(eq=False)
class EditSession:
    """Mutable state of one clip edit"""
    model: ToyDenoiser
    sched: DiffusionSchedule
    edit_prompt: str
    policy: InjectionPolicy = field(default_factory=InjectionPolicy)
    guidance: GuidanceConfig = field(default_factory=GuidanceConfig)
    cfg_scale: float = 7.5
    seed: int = 0
    inverted: List[LatentFrame] = field(default_factory=list)
    anchor_features: Optional[FeatureCache] = None
    prev_features: Optional[FeatureCache] = None
    prev_x0: List[torch.Tensor] = field(default_factory=list)
    history: List[FeatureCache] = field(default_factory=list)
    frames_edited: int = 0
    anchor_hook: Optional[AnchorUpdateHook] = None
    rng: torch.Generator = field(init=False)

    def __post_init__(self):
        self.rng = torch.Generator().manual_seed(self.seed)
        self.guidance.validate_for(self.sched)

    @property
    def editing_anchor(self) -> bool:
        return self.frames_edited == 0


def edit_frame(session: EditSession, i: int, x_T: LatentFrame, cond: ConditioningBundle
               ) -> Tuple[torch.Tensor, Optional[FeatureCache], List[torch.Tensor]]:
    """
    Denoise one frame for T steps with injection and guidance

    The first frame edited in a session is the anchor: its features are
    captured into session.anchor_features, nothing is injected and no guidance
    applies. Later frames inject [anchor, previous] features and, during the
    active steps, take the guided update against the previous frame's x0.

    Returns:
        (edited image in [0, 1], this frame's feature cache, its per-step x0 predictions)
    """
    policy, guidance, sched = session.policy, session.guidance, session.sched
    position = session.frames_edited + 1
    is_anchor = session.editing_anchor

    prev_cache = session.prev_features
    if not is_anchor:
        if policy.mode == InjectionMode.ANCHOR_PLUS_RANDOM_PREV and session.history:
            prev_cache = choose_random_previous(session.history, session.rng)
        if policy.uses_prev and prev_cache is None:
            raise StateError(f"frame {i}: no previous-frame features in the session")
        if policy.uses_anchor and session.anchor_features is None:
            raise StateError(f"frame {i}: no anchor features in the session")
        if guidance.delta > 0 and guidance.active_steps > 0 and len(session.prev_x0) != sched.num_inference_steps:
            raise StateError(f"frame {i}: previous x0 trajectory has {len(session.prev_x0)} of "
                             f"{sched.num_inference_steps} steps")

    cache = FeatureCache(i) if policy.capture_layers else None
    x0s: List[torch.Tensor] = []
    x = x_T
    for step_index, t in enumerate(sched.timesteps.tolist()):
        if is_anchor:
            control = build_control(policy, None, None, t)
        else:
            control = build_control(policy, session.anchor_features, prev_cache, t)
        active = is_guidance_active(position, step_index, guidance)
        x0_prev = session.prev_x0[step_index] if active else None

        pred = denoise_with_grad(session.model, x, t, cond, control, x0_prev, sched,
                                 guidance.grad_method, guidance.reduction)
        if cache is not None:
            for layer, features in pred.captured.items():
                cache.record(t, layer, features)

        x_next, x0 = ddim_step(x, pred.eps, t, sched, _step_noise(x.data, sched, t, session.rng))
        if active:
            x_next = guided_update(x_next, pred.grad, guidance.delta)
            logger.debug(f"frame {i} step {step_index}: guided update |grad| {float(pred.grad.norm()):.4g}",
                         extra={"event": "guided_update", "frame": i, "step_index": step_index, "timestep": t,
                                "delta": guidance.delta, "grad_norm": float(pred.grad.norm()),
                                "loss": pred.loss})
        x0s.append(x0)
        x = x_next

    if is_anchor:
        session.anchor_features = cache
    return to_image_space(x.data), cache, x0s


def _edit_order(n: int, anchor_index: int) -> List[int]:
    return [anchor_index] + [i for i in range(1, n + 1) if i != anchor_index]


def edit_clip(clip: VideoClip, edit_prompt: str, policy: InjectionPolicy, guidance_cfg: GuidanceConfig,
              model: ToyDenoiser, sched: DiffusionSchedule, cfg_scale: float = 7.5, seed: int = 0,
              latents: Optional[Sequence[LatentFrame]] = None, invert_scale: float = 1.0,
              store: Optional[LatentStore] = None,
              anchor_hook: Optional[AnchorUpdateHook] = None) -> VideoClip:
    """
    Edit a whole clip

    The anchor frame is edited first, then the remaining frames in order, each
    reading the anchor cache and the cache of the frame edited just before it.

    Returns:
        The edited clip (same length, resolution, depths and metadata)
    """
    _check_resolution(model, clip)
    if policy.anchor_index > clip.n_frames:
        raise ParameterError(f"anchor_index {policy.anchor_index} exceeds the {clip.n_frames} frames")
    if latents is None:
        latents = invert_clip(clip, model, sched, invert_scale, store)
    if len(latents) != clip.n_frames:
        raise ShapeError(f"{len(latents)} inverted latents for {clip.n_frames} frames")

    session = EditSession(model, sched, edit_prompt, policy, guidance_cfg, cfg_scale, seed,
                          inverted=list(latents), anchor_hook=anchor_hook)
    outputs: Dict[int, torch.Tensor] = {}
    for i in _edit_order(clip.n_frames, policy.anchor_index):
        started = time.perf_counter()
        cond = make_conditioning(model, edit_prompt, clip.depths[i - 1], cfg_scale)
        image, cache, x0s = edit_frame(session, i, session.inverted[i - 1], cond)

        was_anchor = session.frames_edited == 0
        session.prev_features = cache
        session.prev_x0 = x0s
        if cache is not None:
            session.history.append(cache)
        session.frames_edited += 1
        if not was_anchor and anchor_hook is not None and cache is not None and anchor_hook(i, image, cache, session):
            session.anchor_features = cache
            logger.info(f"⚓ Frame {i} promoted to anchor")

        outputs[i] = image
        seconds = time.perf_counter() - started
        logger.info(f"🎞️  Edited frame {i}/{clip.n_frames} in {seconds:.1f}s",
                    extra={"event": "frame_edited", "frame": i, "seconds": seconds})

    frames = torch.stack([outputs[i] for i in range(1, clip.n_frames + 1)])
    return clip.with_frames(frames.to(clip.frames.dtype))


@dataclass(frozen=True)
class AblationVariant:
    name: str
    policy: InjectionPolicy
    guidance: GuidanceConfig


def _presets(guidance: GuidanceConfig, anchor_index: int) -> Dict[str, AblationVariant]:
    no_update = guidance.disabled()

    def variant(name, mode, layers=DECODER_LAYERS, g=guidance):
        return AblationVariant(name, InjectionPolicy(mode, anchor_index, layers), g)

    return {
        "ours": variant("ours", InjectionMode.ANCHOR_PLUS_PREV),
        "ours_wo_update": variant("ours_wo_update", InjectionMode.ANCHOR_PLUS_PREV, g=no_update),
        "per_frame": variant("per_frame", InjectionMode.NONE, g=no_update),
        "anchor_only": variant("anchor_only", InjectionMode.ANCHOR_ONLY),
        "prev_only": variant("prev_only", InjectionMode.PREV_ONLY),
        "random_prev": variant("random_prev", InjectionMode.ANCHOR_PLUS_RANDOM_PREV),
        "all_layers": variant("all_layers", InjectionMode.ANCHOR_PLUS_PREV, ALL_LAYERS),
        "deep_decoder": variant("deep_decoder", InjectionMode.ANCHOR_PLUS_PREV, LAYER_PRESETS["deep_decoder"]),
        "decoder_bottleneck": variant("decoder_bottleneck", InjectionMode.ANCHOR_PLUS_PREV,
                                      LAYER_PRESETS["decoder_bottleneck"]),
    }


VARIANT_PRESETS = tuple(_presets(GuidanceConfig(), 1))


def make_variants(names: Sequence[str], guidance: Optional[GuidanceConfig] = None,
                  anchor_index: int = 1) -> List[AblationVariant]:
    presets = _presets(guidance or GuidanceConfig(), anchor_index)
    unknown = [n for n in names if n not in presets]
    if unknown:
        raise ParameterError(f"unknown variants {unknown}; choose from {', '.join(presets)}")
    return [presets[n] for n in names]


def run_ablation(clip: VideoClip, edit_prompt: str, variants: Sequence[AblationVariant],
                 model: ToyDenoiser, sched: DiffusionSchedule, cfg_scale: float = 7.5, seed: int = 0,
                 flows: Optional[Sequence[FlowField]] = None, classifier=None,
                 backend: Optional[EmbeddingBackend] = None, max_workers: int = 1,
                 latents: Optional[Sequence[LatentFrame]] = None,
                 store: Optional[LatentStore] = None) -> List[MetricsReport]:
    """
    Edit the clip once per variant and score each result

    Inversion is shared. Pixel-MSE uses the input clip's flow (ground truth when
    present, block matching otherwise). Rows come back in variant order.
    """
    if not variants:
        raise ParameterError("run_ablation needs at least one variant")
    duplicates = sorted({v.name for v in variants if sum(w.name == v.name for w in variants) > 1})
    if duplicates:
        raise ParameterError(f"variant names must be unique, repeated: {duplicates}")
    if latents is None:
        latents = invert_clip(clip, model, sched, store=store)
    if flows is None:
        flows = clip.flows if clip.flows is not None else estimate_clip_flows(clip.frames)

    def run_variant(variant: AblationVariant) -> MetricsReport:
        edited = edit_clip(clip, edit_prompt, variant.policy, variant.guidance, model, sched,
                           cfg_scale, seed, latents=latents)
        report = evaluate_clip(edited, edit_prompt, flows, classifier, backend,
                               variant=variant.name, clip_id=clip.clip_id)
        logger.info(f"✅ Variant {variant.name} done", extra={"event": "variant_done", **report.to_dict()})
        return report

    if max_workers <= 1:
        return [run_variant(v) for v in variants]

    reports: Dict[int, MetricsReport] = {}
    lock = threading.Lock()
    with ThreadPoolExecutor(max_workers=max_workers) as executor:
        future_to_index = {executor.submit(run_variant, v): i for i, v in enumerate(variants)}
        for future in as_completed(future_to_index):
            report = future.result()
            with lock:
                reports[future_to_index[future]] = report
                logger.info(f"📊 Progress: {len(reports)}/{len(variants)} variants")
    return [reports[i] for i in range(len(variants))]
