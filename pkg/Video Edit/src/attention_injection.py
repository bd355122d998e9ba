#!/usr/bin/env python3
"""
Cross-frame self-attention feature injection
Per-trajectory feature caches, injection policies and the attention controls built from them
"""

import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, FrozenSet, Iterable, List, Optional, Sequence, Tuple, Union

import torch

from .errors import ParameterError, ShapeError, StateError

logger = logging.getLogger(__name__)

# 16 attention-bearing blocks: 1-6 encoder, 7 bottleneck, 8-16 decoder
NUM_LAYERS = 16
ENCODER_LAYERS = frozenset(range(1, 7))
BOTTLENECK_LAYERS = frozenset({7})
DECODER_LAYERS = frozenset(range(8, 17))
ALL_LAYERS = frozenset(range(1, NUM_LAYERS + 1))

LAYER_PRESETS: Dict[str, FrozenSet[int]] = {
    "decoder": DECODER_LAYERS,
    "deep_decoder": frozenset(range(13, 17)),
    "decoder_bottleneck": BOTTLENECK_LAYERS | DECODER_LAYERS,
    "bottleneck": BOTTLENECK_LAYERS,
    "encoder": ENCODER_LAYERS,
    "all": ALL_LAYERS,
}


def validate_layers(layers: Iterable[int]) -> FrozenSet[int]:
    layers = frozenset(int(l) for l in layers)
    bad = sorted(l for l in layers if l not in ALL_LAYERS)
    if bad:
        raise ParameterError(f"layer indices {bad} outside 1..{NUM_LAYERS}")
    return layers


def parse_layers(spec: Union[str, Iterable[int]]) -> FrozenSet[int]:
    """
    Parse a layer set: a preset name ("decoder", "all", ...), or a comma list
    with optional ranges such as "7,13-16"
    """
    if not isinstance(spec, str):
        return validate_layers(spec)
    text = spec.strip().lower()
    if text in LAYER_PRESETS:
        return LAYER_PRESETS[text]
    if not text:
        return frozenset()
    layers = set()
    for part in text.split(","):
        part = part.strip()
        try:
            if "-" in part:
                lo, hi = part.split("-", 1)
                layers.update(range(int(lo), int(hi) + 1))
            else:
                layers.add(int(part))
        except ValueError:
            raise ParameterError(f"cannot parse layer spec '{spec}'")
    return validate_layers(layers)


def format_layers(layers: Iterable[int]) -> str:
    """Inverse of parse_layers; presets come back by name"""
    layers = frozenset(layers)
    for name, preset in LAYER_PRESETS.items():
        if layers == preset:
            return name
    return ",".join(str(l) for l in sorted(layers))


@dataclass(frozen=True)
class ProjectionWeights:
    """Query/key/value projection matrices in nn.Linear layout (out, in)"""
    w_q: torch.Tensor
    w_k: torch.Tensor
    w_v: torch.Tensor


def cross_frame_attention(f_cur: torch.Tensor, kv_sources: Sequence[torch.Tensor],
                          weights: ProjectionWeights, return_probs: bool = False):
    """
    Self-attention whose keys and values come from concatenated source features

    Q = W_Q f_cur, K = W_K [s_1, ..., s_k], V = W_V [s_1, ..., s_k],
    out = softmax(Q K^T / sqrt(d)) V. With kv_sources = [f_cur] this is plain
    self-attention.

    Args:
        f_cur: (N, C) or (B, N, C) features of the frame being generated
        kv_sources: Non-empty list of (M_i, C) or (B, M_i, C) features
        weights: Projection matrices
        return_probs: Also return the (B, N, sum M_i) attention matrix

    Returns:
        Attended features with f_cur's leading shape (and the probabilities if asked)
    """
    if not kv_sources:
        raise ParameterError("cross-frame attention needs at least one key/value source")

    unbatched = f_cur.ndim == 2
    cur = f_cur.unsqueeze(0) if unbatched else f_cur
    channels = cur.shape[-1]
    sources = []
    for src in kv_sources:
        src = src.unsqueeze(0) if src.ndim == 2 else src
        if src.shape[-1] != channels:
            raise ShapeError(f"source width {src.shape[-1]} != current width {channels}")
        if src.shape[0] != cur.shape[0]:
            raise ShapeError(f"source batch {src.shape[0]} != current batch {cur.shape[0]}")
        sources.append(src)
    if weights.w_q.shape[-1] != channels or weights.w_k.shape[-1] != channels:
        raise ShapeError(f"projection input width does not match feature width {channels}")

    kv = torch.cat(sources, dim=1)
    q = cur @ weights.w_q.transpose(0, 1)
    k = kv @ weights.w_k.transpose(0, 1)
    v = kv @ weights.w_v.transpose(0, 1)

    scores = (q @ k.transpose(-1, -2)) * (q.shape[-1] ** -0.5)
    probs = torch.softmax(scores, dim=-1)
    out = probs @ v

    if unbatched:
        out = out.squeeze(0)
    return (out, probs) if return_probs else out


class ControlMode(str, Enum):
    VANILLA = "vanilla"
    CAPTURE = "capture"
    INJECT = "inject"


@dataclass
class AttentionControl:
    """
    Per-call instructions for the denoiser's self-attention blocks

    capture_layers are honoured in capture and inject mode: a frame that is
    being injected into still records its own features for the next frame.
    """
    mode: ControlMode = ControlMode.VANILLA
    capture_layers: FrozenSet[int] = frozenset()
    inject_layers: FrozenSet[int] = frozenset()
    injected_features: Dict[int, List[torch.Tensor]] = field(default_factory=dict)

    def __post_init__(self):
        self.mode = ControlMode(self.mode)
        self.capture_layers = validate_layers(self.capture_layers)
        self.inject_layers = validate_layers(self.inject_layers)
        validate_layers(self.injected_features.keys())
        if self.mode == ControlMode.INJECT:
            for layer in self.inject_layers:
                if not self.injected_features.get(layer):
                    raise ParameterError(f"inject mode lists layer {layer} but has no features for it")

    @classmethod
    def vanilla(cls) -> "AttentionControl":
        return cls(ControlMode.VANILLA)

    @classmethod
    def capture(cls, layers: Iterable[int]) -> "AttentionControl":
        return cls(ControlMode.CAPTURE, capture_layers=frozenset(layers))

    def captures(self, layer: int) -> bool:
        return self.mode != ControlMode.VANILLA and layer in self.capture_layers

    def sources_for(self, layer: int) -> Optional[List[torch.Tensor]]:
        """Key/value sources for a layer, or None to use its own features"""
        if self.mode == ControlMode.INJECT and layer in self.inject_layers:
            return self.injected_features[layer]
        return None

    def without_capture(self) -> "AttentionControl":
        if self.mode == ControlMode.CAPTURE:
            return AttentionControl.vanilla()
        return AttentionControl(self.mode, frozenset(), self.inject_layers, self.injected_features)


class FeatureCache:
    """Self-attention input features of one frame's trajectory, keyed by (step, layer)"""

    def __init__(self, frame_index: int):
        self.frame_index = frame_index
        self.entries: Dict[Tuple[int, int], torch.Tensor] = {}
        self._layer_shapes: Dict[int, Tuple[int, ...]] = {}

    def __len__(self) -> int:
        return len(self.entries)

    def __contains__(self, key: Tuple[int, int]) -> bool:
        return key in self.entries

    def record(self, t: int, layer: int, features: torch.Tensor) -> None:
        key = (int(t), int(layer))
        if key in self.entries:
            raise StateError(f"frame {self.frame_index}: features for step {t}, layer {layer} already recorded")
        shape = tuple(features.shape[-2:])
        expected = self._layer_shapes.setdefault(key[1], shape)
        if shape != expected:
            raise ShapeError(f"layer {layer} features {shape} differ from earlier {expected}")
        self.entries[key] = features.detach()

    def get(self, t: int, layer: int) -> torch.Tensor:
        try:
            return self.entries[(int(t), int(layer))]
        except KeyError:
            raise StateError(f"frame {self.frame_index}: no features for step {t}, layer {layer}")

    def steps(self) -> List[int]:
        return sorted({t for t, _ in self.entries}, reverse=True)

    def layers(self) -> List[int]:
        return sorted({l for _, l in self.entries})

    def missing(self, steps: Iterable[int], layers: Iterable[int]) -> List[Tuple[int, int]]:
        return [(int(t), int(l)) for t in steps for l in layers if (int(t), int(l)) not in self.entries]

    def nbytes(self) -> int:
        return sum(f.numel() * f.element_size() for f in self.entries.values())


def record(cache: FeatureCache, t: int, layer: int, features: torch.Tensor) -> None:
    """Store one (step, layer) entry; a duplicate key is a StateError"""
    cache.record(t, layer, features)


class InjectionMode(str, Enum):
    NONE = "none"
    ANCHOR_ONLY = "anchor_only"
    PREV_ONLY = "prev_only"
    ANCHOR_PLUS_PREV = "anchor_plus_prev"
    ANCHOR_PLUS_RANDOM_PREV = "anchor_plus_random_prev"


@dataclass(frozen=True)
class InjectionPolicy:
    """Which earlier frames feed the self-attention keys/values, and at which layers"""
    mode: InjectionMode = InjectionMode.ANCHOR_PLUS_PREV
    anchor_index: int = 1
    layers: FrozenSet[int] = DECODER_LAYERS

    def __post_init__(self):
        object.__setattr__(self, "mode", InjectionMode(self.mode))
        object.__setattr__(self, "layers", parse_layers(self.layers))
        if self.anchor_index < 1:
            raise ParameterError(f"anchor_index must be >= 1, got {self.anchor_index}")
        if self.mode != InjectionMode.NONE and not self.layers:
            raise ParameterError(f"injection mode {self.mode.value} needs at least one layer")

    @property
    def uses_anchor(self) -> bool:
        return self.mode in (InjectionMode.ANCHOR_ONLY, InjectionMode.ANCHOR_PLUS_PREV,
                             InjectionMode.ANCHOR_PLUS_RANDOM_PREV)

    @property
    def uses_prev(self) -> bool:
        return self.mode in (InjectionMode.PREV_ONLY, InjectionMode.ANCHOR_PLUS_PREV,
                             InjectionMode.ANCHOR_PLUS_RANDOM_PREV)

    @property
    def capture_layers(self) -> FrozenSet[int]:
        return frozenset() if self.mode == InjectionMode.NONE else self.layers


def choose_random_previous(history: Sequence[FeatureCache], rng: torch.Generator) -> FeatureCache:
    """Uniform draw among the caches of all earlier frames"""
    if not history:
        raise StateError("no earlier frame caches to draw a random previous frame from")
    pick = int(torch.randint(len(history), (1,), generator=rng))
    return history[pick]


def build_control(policy: InjectionPolicy, anchor: Optional[FeatureCache],
                  prev: Optional[FeatureCache], t: int,
                  history: Optional[Sequence[FeatureCache]] = None,
                  rng: Optional[torch.Generator] = None) -> AttentionControl:
    """
    Attention control for one denoising step

    Args:
        policy: Injection policy
        anchor: Anchor frame cache, None while the anchor itself is being edited
        prev: Previous frame cache
        t: Current inference timestep
        history: Caches of all earlier frames (random-previous mode draws from these)
        rng: Generator for the random-previous draw

    Returns:
        vanilla for mode none, capture while editing the anchor, else inject with
        sources ordered [anchor, previous]
    """
    if policy.mode == InjectionMode.NONE:
        return AttentionControl.vanilla()
    if anchor is None:
        return AttentionControl.capture(policy.layers)

    if policy.mode == InjectionMode.ANCHOR_PLUS_RANDOM_PREV and history:
        if rng is None:
            raise ParameterError("random-previous injection needs a seeded generator")
        prev = choose_random_previous(history, rng)
    if policy.uses_prev and prev is None:
        raise StateError(f"injection mode {policy.mode.value} needs a previous frame cache")

    injected: Dict[int, List[torch.Tensor]] = {}
    for layer in sorted(policy.layers):
        sources = []
        if policy.uses_anchor:
            sources.append(anchor.get(t, layer))
        if policy.uses_prev:
            sources.append(prev.get(t, layer))
        injected[layer] = sources

    return AttentionControl(
        ControlMode.INJECT,
        capture_layers=policy.layers,
        inject_layers=policy.layers,
        injected_features=injected,
    )
