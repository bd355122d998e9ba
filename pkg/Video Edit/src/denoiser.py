#!/usr/bin/env python3
"""
Toy depth-conditioned text-to-image noise predictor
A small UNet with 16 attention-bearing blocks (encoder 1-6, bottleneck 7, decoder 8-16)
whose self-attention inputs can be captured and whose keys/values can be injected
"""

import hashlib
import logging
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import torch
from torch import nn
from torch.nn import functional as F

from .attention_injection import (
    BOTTLENECK_LAYERS, DECODER_LAYERS, ENCODER_LAYERS, NUM_LAYERS,
    AttentionControl, ProjectionWeights, cross_frame_attention,
)
from .clip_io import read_arrays, write_arrays
from .errors import ArchiveFormatError, ParameterError, ShapeError
from .schedule import LatentFrame, TensorLike
from .vocabulary import MAX_PROMPT_TOKENS, TokenTable, Vocabulary, embed_prompt

logger = logging.getLogger(__name__)

LAYER_LAYOUT = {"encoder": len(ENCODER_LAYERS), "bottleneck": len(BOTTLENECK_LAYERS),
                "decoder": len(DECODER_LAYERS)}


@dataclass
class DenoiserConfig:
    """Architecture of the toy denoiser; image_size must be divisible by 16"""
    image_size: int = 64
    base_channels: int = 32
    text_dim: int = 32
    depth_channels: int = 1
    image_channels: int = 3
    channel_mult: Tuple[int, int, int] = (1, 2, 2)

    def __post_init__(self):
        self.channel_mult = tuple(int(m) for m in self.channel_mult)
        if self.image_size <= 0 or self.image_size % 16:
            raise ParameterError(f"image_size must be a positive multiple of 16, got {self.image_size}")
        if self.base_channels <= 0 or self.text_dim <= 0:
            raise ParameterError("base_channels and text_dim must be positive")
        if self.depth_channels != 1:
            raise ParameterError("the denoiser takes exactly one depth channel")
        if len(self.channel_mult) != 3 or min(self.channel_mult) <= 0:
            raise ParameterError(f"channel_mult needs three positive entries, got {self.channel_mult}")

    @property
    def layer_layout(self) -> Dict[str, int]:
        return dict(LAYER_LAYOUT)

    def to_dict(self) -> Dict:
        data = asdict(self)
        data["channel_mult"] = list(self.channel_mult)
        return data


@dataclass(eq=False)
class ConditioningBundle:
    """Prompt tokens plus depth for one frame; null_tokens feed the unconditional CFG branch"""
    prompt_tokens: torch.Tensor
    depth: torch.Tensor
    guidance_scale: float = 1.0
    null_tokens: Optional[torch.Tensor] = None

    def __post_init__(self):
        if self.prompt_tokens.ndim != 2 or not 1 <= self.prompt_tokens.shape[0] <= MAX_PROMPT_TOKENS:
            raise ShapeError(f"prompt_tokens must be (1..{MAX_PROMPT_TOKENS}, dim), "
                             f"got {tuple(self.prompt_tokens.shape)}")
        if self.depth.ndim == 3 and self.depth.shape[0] == 1:
            self.depth = self.depth[0]
        if self.depth.ndim != 2:
            raise ShapeError(f"depth must be a single-channel (H, W) map, got {tuple(self.depth.shape)}")
        if float(self.depth.min()) < 0.0 or float(self.depth.max()) > 1.0:
            raise ParameterError("depth values must lie in [0, 1]")
        if self.guidance_scale < 1.0:
            raise ParameterError(f"guidance_scale must be >= 1, got {self.guidance_scale}")
        if self.uses_cfg and self.null_tokens is None:
            raise ParameterError("classifier-free guidance needs null-prompt tokens")

    @property
    def uses_cfg(self) -> bool:
        return self.guidance_scale > 1.0

    @property
    def branches(self) -> int:
        """Batch size of one denoiser call: (null, cond) with CFG, cond alone without"""
        return 2 if self.uses_cfg else 1

    def with_scale(self, guidance_scale: float) -> "ConditioningBundle":
        return ConditioningBundle(self.prompt_tokens, self.depth, guidance_scale, self.null_tokens)


def _norm(channels: int) -> nn.GroupNorm:
    return nn.GroupNorm(math.gcd(8, channels), channels)


class TimestepEmbedding(nn.Module):
    """Sinusoidal timestep features followed by a two-layer MLP"""

    def __init__(self, base_dim: int, out_dim: int):
        super().__init__()
        half = base_dim // 2
        frequencies = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float32) / half)
        self.register_buffer("frequencies", frequencies)
        self.linear_1 = nn.Linear(2 * half, out_dim)
        self.linear_2 = nn.Linear(out_dim, out_dim)

    def forward(self, t: torch.Tensor) -> torch.Tensor:
        args = t[:, None].to(self.frequencies.dtype) * self.frequencies[None, :]
        emb = torch.cat([torch.sin(args), torch.cos(args)], dim=-1)
        return self.linear_2(F.silu(self.linear_1(emb)))


class ResidualUnit(nn.Module):
    def __init__(self, in_channels: int, out_channels: int, time_dim: int):
        super().__init__()
        self.norm_1 = _norm(in_channels)
        self.conv_1 = nn.Conv2d(in_channels, out_channels, 3, padding=1)
        self.time_proj = nn.Linear(time_dim, out_channels)
        self.norm_2 = _norm(out_channels)
        self.conv_2 = nn.Conv2d(out_channels, out_channels, 3, padding=1)
        self.shortcut = nn.Identity() if in_channels == out_channels else nn.Conv2d(in_channels, out_channels, 1)

    def forward(self, x: torch.Tensor, temb: torch.Tensor) -> torch.Tensor:
        h = self.conv_1(F.silu(self.norm_1(x)))
        h = h + self.time_proj(F.silu(temb))[:, :, None, None]
        h = self.conv_2(F.silu(self.norm_2(h)))
        return h + self.shortcut(x)


class FrameSelfAttention(nn.Module):
    """Single-head self-attention whose keys/values may come from other frames"""

    def __init__(self, channels: int):
        super().__init__()
        self.to_q = nn.Linear(channels, channels, bias=False)
        self.to_k = nn.Linear(channels, channels, bias=False)
        self.to_v = nn.Linear(channels, channels, bias=False)
        self.to_out = nn.Linear(channels, channels)

    @property
    def weights(self) -> ProjectionWeights:
        return ProjectionWeights(self.to_q.weight, self.to_k.weight, self.to_v.weight)

    def forward(self, f: torch.Tensor, sources: Optional[Sequence[torch.Tensor]] = None) -> torch.Tensor:
        return self.to_out(cross_frame_attention(f, list(sources) if sources else [f], self.weights))


class TextCrossAttention(nn.Module):
    def __init__(self, channels: int, text_dim: int):
        super().__init__()
        self.to_q = nn.Linear(channels, channels, bias=False)
        self.to_k = nn.Linear(text_dim, channels, bias=False)
        self.to_v = nn.Linear(text_dim, channels, bias=False)
        self.to_out = nn.Linear(channels, channels)

    def forward(self, x: torch.Tensor, context: torch.Tensor, context_mask: torch.Tensor) -> torch.Tensor:
        q, k, v = self.to_q(x), self.to_k(context), self.to_v(context)
        scores = (q @ k.transpose(-1, -2)) * (q.shape[-1] ** -0.5)
        scores = scores.masked_fill(context_mask[:, None, :], float("-inf"))
        return self.to_out(torch.softmax(scores, dim=-1) @ v)


class SpatialTransformer(nn.Module):
    """Self-attention, text cross-attention and a GEGLU feed-forward over the flattened map"""

    def __init__(self, channels: int, text_dim: int):
        super().__init__()
        self.norm = _norm(channels)
        self.proj_in = nn.Conv2d(channels, channels, 1)
        self.ln_1 = nn.LayerNorm(channels)
        self.self_attn = FrameSelfAttention(channels)
        self.ln_2 = nn.LayerNorm(channels)
        self.cross_attn = TextCrossAttention(channels, text_dim)
        self.ln_3 = nn.LayerNorm(channels)
        self.ff_in = nn.Linear(channels, 4 * channels * 2)
        self.ff_out = nn.Linear(4 * channels, channels)
        self.proj_out = nn.Conv2d(channels, channels, 1)

    def forward(self, x: torch.Tensor, context: torch.Tensor, context_mask: torch.Tensor,
                layer: int, control: AttentionControl, captured: Dict[int, torch.Tensor]) -> torch.Tensor:
        residual = x
        b, c, h, w = x.shape
        x = self.proj_in(self.norm(x)).view(b, c, h * w).transpose(1, 2)

        f = self.ln_1(x)
        if control.captures(layer):
            captured[layer] = f.detach()
        x = x + self.self_attn(f, control.sources_for(layer))

        x = x + self.cross_attn(self.ln_2(x), context, context_mask)

        hidden, gate = self.ff_in(self.ln_3(x)).chunk(2, dim=-1)
        x = x + self.ff_out(hidden * F.gelu(gate))

        x = x.transpose(1, 2).reshape(b, c, h, w)
        return self.proj_out(x) + residual


class AttentionBlock(nn.Module):
    """One of the 16 numbered blocks: residual unit, depth projection, spatial transformer"""

    def __init__(self, index: int, in_channels: int, out_channels: int, time_dim: int, text_dim: int):
        super().__init__()
        self.index = index
        self.res = ResidualUnit(in_channels, out_channels, time_dim)
        self.depth_proj = nn.Conv2d(1, out_channels, 1)
        self.transformer = SpatialTransformer(out_channels, text_dim)

    def forward(self, x, temb, depth, context, context_mask, control, captured):
        x = self.res(x, temb)
        x = x + self.depth_proj(F.interpolate(depth, size=x.shape[-2:], mode="bilinear", align_corners=False))
        return self.transformer(x, context, context_mask, self.index, control, captured)


class ToyDenoiser(nn.Module):
    """
    UNet noise predictor eps_theta(x_t, t, prompt, depth)

    Resolutions: input stem at H, attention blocks at H/2 (1, 2, 14-16),
    H/4 (3, 4, 11-13), H/8 (5, 6, 8-10) and H/16 (7). The decoder consumes
    one skip per block in reverse order of production.
    """

    def __init__(self, config: Optional[DenoiserConfig] = None, vocabulary: Optional[Vocabulary] = None):
        super().__init__()
        self.config = config or DenoiserConfig()
        cfg = self.config
        c = cfg.base_channels
        level_channels = [c * m for m in cfg.channel_mult]
        time_dim = 4 * c

        self.tokens = TokenTable(vocabulary or Vocabulary(), cfg.text_dim)
        self.time_embedding = TimestepEmbedding(c, time_dim)
        self.stem = nn.Conv2d(cfg.image_channels + cfg.depth_channels, c, 3, padding=1)
        self.stem_down = nn.Conv2d(c, c, 3, stride=2, padding=1)

        self.encoder = nn.ModuleList()
        self.downsamplers = nn.ModuleList()
        skip_channels = [c]
        ch = c
        index = 1
        for level, out_ch in enumerate(level_channels):
            for _ in range(2):
                self.encoder.append(AttentionBlock(index, ch, out_ch, time_dim, cfg.text_dim))
                ch = out_ch
                skip_channels.append(ch)
                index += 1
            self.downsamplers.append(nn.Conv2d(ch, ch, 3, stride=2, padding=1))
            if level < len(level_channels) - 1:
                skip_channels.append(ch)

        self.bottleneck = AttentionBlock(index, ch, ch, time_dim, cfg.text_dim)
        index += 1

        self.decoder = nn.ModuleList()
        self.upsamplers = nn.ModuleList()
        for out_ch in reversed(level_channels):
            self.upsamplers.append(nn.Conv2d(ch, ch, 3, padding=1))
            for _ in range(3):
                self.decoder.append(AttentionBlock(index, ch + skip_channels.pop(), out_ch, time_dim, cfg.text_dim))
                ch = out_ch
                index += 1
        assert index == NUM_LAYERS + 1 and not skip_channels

        self.final_up = nn.Conv2d(ch, c, 3, padding=1)
        self.out_norm = _norm(2 * c)
        self.out_conv = nn.Conv2d(2 * c, cfg.image_channels, 3, padding=1)

    @property
    def vocabulary(self) -> Vocabulary:
        return self.tokens.vocabulary

    def blocks(self) -> List[AttentionBlock]:
        return list(self.encoder) + [self.bottleneck] + list(self.decoder)

    def forward(self, x: torch.Tensor, t: torch.Tensor, context: torch.Tensor, context_mask: torch.Tensor,
                depth: torch.Tensor, control: Optional[AttentionControl] = None
                ) -> Tuple[torch.Tensor, Dict[int, torch.Tensor]]:
        """
        Args:
            x: (B, 3, H, W) noisy images
            t: (B,) train-step indices
            context: (B, L, text_dim) prompt embeddings
            context_mask: (B, L) True where the context is padding
            depth: (B, 1, H, W) depth in [0, 1]
            control: Capture/inject instructions (vanilla when None)

        Returns:
            (eps, captured) with captured mapping layer -> (B, N, C) self-attention inputs
        """
        control = control or AttentionControl.vanilla()
        captured: Dict[int, torch.Tensor] = {}
        temb = self.time_embedding(t)

        h_full = self.stem(torch.cat([x, depth], dim=1))
        h = self.stem_down(h_full)
        skips = [h]
        encoder = iter(self.encoder)
        for level, down in enumerate(self.downsamplers):
            for _ in range(2):
                h = next(encoder)(h, temb, depth, context, context_mask, control, captured)
                skips.append(h)
            h = down(h)
            if level < len(self.downsamplers) - 1:
                skips.append(h)

        h = self.bottleneck(h, temb, depth, context, context_mask, control, captured)

        decoder = iter(self.decoder)
        for up in self.upsamplers:
            h = up(F.interpolate(h, scale_factor=2.0, mode="nearest"))
            for _ in range(3):
                h = next(decoder)(torch.cat([h, skips.pop()], dim=1), temb, depth, context, context_mask,
                                  control, captured)

        h = self.final_up(F.interpolate(h, scale_factor=2.0, mode="nearest"))
        h = torch.cat([h, h_full], dim=1)
        return self.out_conv(F.silu(self.out_norm(h))), captured


def stack_context(sequences: Sequence[torch.Tensor]) -> Tuple[torch.Tensor, torch.Tensor]:
    """Right-pad (L_i, D) token sequences into (B, L, D) plus a padding mask"""
    length = max(s.shape[0] for s in sequences)
    dim = sequences[0].shape[1]
    context = sequences[0].new_zeros((len(sequences), length, dim))
    mask = torch.ones((len(sequences), length), dtype=torch.bool, device=sequences[0].device)
    for i, seq in enumerate(sequences):
        context[i, :seq.shape[0]] = seq
        mask[i, :seq.shape[0]] = False
    return context, mask


def make_conditioning(model: ToyDenoiser, prompt: str, depth: torch.Tensor,
                      guidance_scale: float = 1.0) -> ConditioningBundle:
    """Embed a prompt (and the null prompt) with the model's token table"""
    unknown = model.vocabulary.unknown_words(prompt)
    if unknown:
        logger.warning(f"⚠️  Words not in the toy vocabulary map to <unk>: {unknown}")
    return ConditioningBundle(
        prompt_tokens=embed_prompt(prompt, model.tokens),
        depth=depth,
        guidance_scale=float(guidance_scale),
        null_tokens=embed_prompt("", model.tokens),
    )


def denoise(model: ToyDenoiser, x_t: TensorLike, t: int, cond: ConditioningBundle,
            control: Optional[AttentionControl] = None) -> Tuple[torch.Tensor, Dict[int, torch.Tensor]]:
    """
    Predict the noise in one (3, H, W) latent

    With guidance_scale > 1 the null and conditional branches run as one batch
    of two and eps = eps_null + scale * (eps_cond - eps_null); captured and
    injected features then carry that batch of two.

    Returns:
        (eps, captured) - eps shaped like x_t, captured maps layer -> features
    """
    x = x_t.data if isinstance(x_t, LatentFrame) else x_t
    cfg = model.config
    expected = (cfg.image_channels, cfg.image_size, cfg.image_size)
    if tuple(x.shape) != expected:
        raise ShapeError(f"latent shape {tuple(x.shape)} != model input {expected}")
    if tuple(cond.depth.shape) != expected[1:]:
        raise ShapeError(f"depth shape {tuple(cond.depth.shape)} != image resolution {expected[1:]}")
    control = control or AttentionControl.vanilla()

    dtype = x.dtype
    b = cond.branches
    if cond.uses_cfg:
        context, mask = stack_context([cond.null_tokens.to(dtype), cond.prompt_tokens.to(dtype)])
    else:
        context, mask = stack_context([cond.prompt_tokens.to(dtype)])
    batch = x.unsqueeze(0).expand(b, -1, -1, -1)
    depth = cond.depth.to(dtype)[None, None].expand(b, -1, -1, -1)
    steps = torch.full((b,), int(t), dtype=torch.long, device=x.device)

    out, captured = model(batch, steps, context, mask, depth, control)
    if cond.uses_cfg:
        eps = out[0] + cond.guidance_scale * (out[1] - out[0])
    else:
        eps = out[0]
    return eps, captured


def weights_digest(model: ToyDenoiser) -> str:
    """Content hash of the config and every parameter/buffer"""
    digest = hashlib.sha256(repr(sorted(model.config.to_dict().items())).encode())
    for name, tensor in sorted(model.state_dict().items()):
        digest.update(name.encode())
        digest.update(tensor.detach().to(torch.float32).cpu().contiguous().numpy().tobytes())
    return digest.hexdigest()


def save_denoiser(model: ToyDenoiser, path: Union[str, Path]) -> Path:
    """Write the model as a binary array archive (see clip_io.write_arrays)"""
    header = {
        "kind": "denoiser",
        "config": model.config.to_dict(),
        "vocabulary": model.vocabulary.words,
        "versions": {"format": 1, "torch": torch.__version__},
    }
    arrays = {name: t.detach().cpu() for name, t in model.state_dict().items()}
    path = write_arrays(path, arrays, header)
    logger.info(f"💾 Saved denoiser weights to {path}")
    return path


def load_denoiser(path: Union[str, Path]) -> ToyDenoiser:
    arrays, header = read_arrays(path)
    if header.get("kind") != "denoiser":
        raise ArchiveFormatError(f"{path} is not a denoiser archive (kind={header.get('kind')!r})")
    model = ToyDenoiser(DenoiserConfig(**header["config"]), Vocabulary(header["vocabulary"]))
    state = model.state_dict()
    missing = sorted(set(state) - set(arrays))
    if missing:
        raise ArchiveFormatError(f"{path} lacks parameters {missing[:3]}...")
    model.load_state_dict({name: arrays[name].to(state[name].dtype) for name in state})
    model.eval()
    logger.info(f"📦 Loaded denoiser weights from {path}")
    return model
