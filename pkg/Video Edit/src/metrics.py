#!/usr/bin/env python3
"""
Temporal coherency and faithfulness metrics
Flow warping, Pixel-MSE, consecutive-frame embedding similarity, prompt fidelity
and a block-matching flow estimator for clips without ground-truth flow
"""

import logging
from dataclasses import asdict, dataclass
from typing import TYPE_CHECKING, Dict, List, Optional, Protocol, Sequence, Tuple, Union

import torch
from torch.nn import functional as F

from .errors import ParameterError, ShapeError, UnsupportedConfigurationError
from .vocabulary import COLORS, SHAPES, Vocabulary, prompt_attributes

if TYPE_CHECKING:
    from .attribute_classifier import AttributeClassifier
    from .clip_io import VideoClip

logger = logging.getLogger(__name__)

# Pixel-MSE is reported on the 0-255 scale
PIXEL_SCALE = 255.0

Frames = Union[torch.Tensor, Sequence[torch.Tensor]]


@dataclass(eq=False)
class FlowField:
    """
    Displacements for the pair (frame i, frame i+1), stored at the pixels of
    frame i+1: the content at q came from q - flow[:, q] in frame i.
    Channel 0 is x (columns), channel 1 is y (rows).
    """
    flow: torch.Tensor
    mask: Optional[torch.Tensor] = None

    def __post_init__(self):
        if self.flow.ndim != 3 or self.flow.shape[0] != 2:
            raise ShapeError(f"flow must be (2, H, W), got {tuple(self.flow.shape)}")
        if self.mask is not None:
            if tuple(self.mask.shape) != tuple(self.flow.shape[1:]):
                raise ShapeError(f"flow mask {tuple(self.mask.shape)} != flow size {tuple(self.flow.shape[1:])}")
            if not bool(((self.mask == 0) | (self.mask == 1)).all()):
                raise ParameterError("flow mask values must be 0 or 1")

    @property
    def size(self) -> Tuple[int, int]:
        return int(self.flow.shape[1]), int(self.flow.shape[2])

    @classmethod
    def zeros(cls, height: int, width: int) -> "FlowField":
        return cls(torch.zeros(2, height, width))

    @classmethod
    def constant(cls, dx: float, dy: float, height: int, width: int) -> "FlowField":
        flow = torch.empty(2, height, width)
        flow[0], flow[1] = dx, dy
        return cls(flow)


def _pixel_grid(height: int, width: int, dtype=torch.float32) -> Tuple[torch.Tensor, torch.Tensor]:
    ys, xs = torch.meshgrid(torch.arange(height, dtype=dtype), torch.arange(width, dtype=dtype), indexing="ij")
    return xs, ys


def sample_bilinear(image: torch.Tensor, src_x: torch.Tensor, src_y: torch.Tensor
                    ) -> Tuple[torch.Tensor, torch.Tensor]:
    """
    Bilinear lookup of a (C, H, W) image at fractional pixel positions

    Returns the samples and a boolean mask of positions inside [0, W-1] x [0, H-1].
    Out-of-range positions read the nearest border pixel. All-integer positions
    return the stored values exactly.
    """
    _, h, w = image.shape
    inside = (src_x >= 0) & (src_x <= w - 1) & (src_y >= 0) & (src_y <= h - 1)
    integral = torch.equal(src_x, src_x.round()) and torch.equal(src_y, src_y.round())
    # align_corners=True maps -1 and 1 onto the first and last pixel centres
    grid = torch.stack([2.0 * src_x / max(w - 1, 1) - 1.0, 2.0 * src_y / max(h - 1, 1) - 1.0], dim=-1)
    samples = F.grid_sample(image[None], grid[None].to(image.dtype), mode="nearest" if integral else "bilinear",
                            padding_mode="border", align_corners=True)[0]
    return samples, inside


def warp(frame: torch.Tensor, flow: FlowField) -> Tuple[torch.Tensor, torch.Tensor]:
    """
    Backward-warp frame i onto frame i+1's pixel grid

    Returns:
        (warped image, validity mask) - the mask drops out-of-bounds samples
        and anything the flow's own mask marks invalid
    """
    if frame.ndim != 3 or tuple(frame.shape[1:]) != flow.size:
        raise ShapeError(f"frame {tuple(frame.shape)} does not match flow size {flow.size}")
    xs, ys = _pixel_grid(*flow.size, dtype=flow.flow.dtype)
    warped, inside = sample_bilinear(frame, xs - flow.flow[0], ys - flow.flow[1])
    valid = inside if flow.mask is None else inside & flow.mask.bool()
    return warped, valid.to(frame.dtype)


def _as_frames(clip: Frames) -> List[torch.Tensor]:
    frames = getattr(clip, "frames", clip)
    return list(frames) if not isinstance(frames, list) else frames


def pixel_mse(clip: Frames, flows: Sequence[FlowField]) -> float:
    """
    Mean over consecutive pairs of the masked squared error between the warped
    frame i and frame i+1, on the 0-255 scale (frames are given in [0, 1])
    """
    frames = _as_frames(clip)
    if len(flows) != len(frames) - 1:
        raise ParameterError(f"{len(frames)} frames need {len(frames) - 1} flow fields, got {len(flows)}")
    if not flows:
        return 0.0

    pair_errors = []
    for i, flow in enumerate(flows):
        warped, valid = warp(frames[i], flow)
        err = ((warped - frames[i + 1]) * PIXEL_SCALE).pow(2).mean(dim=0)
        count = float(valid.sum())
        if count == 0:
            logger.warning(f"⚠️  Frame pair {i + 1}->{i + 2} has no valid pixels; skipped in Pixel-MSE")
            continue
        pair_errors.append(float((err * valid).sum()) / count)
    if not pair_errors:
        raise ParameterError("no frame pair has valid pixels for Pixel-MSE")
    return sum(pair_errors) / len(pair_errors)


class EmbeddingBackend(Protocol):
    name: str

    def embed_image(self, image: torch.Tensor) -> torch.Tensor:
        ...

    def embed_text(self, text: str) -> torch.Tensor:
        ...


class ToyImageEmbedder:
    """8x8 grayscale downsample, mean-removed and L2-normalised"""

    name = "toy"

    def __init__(self, grid: int = 8):
        self.grid = grid

    def embed_image(self, image: torch.Tensor) -> torch.Tensor:
        gray = image.mean(dim=0, keepdim=True)[None]
        vec = F.adaptive_avg_pool2d(gray, self.grid).flatten().to(torch.float64)
        vec = vec - vec.mean()
        norm = vec.norm()
        if norm < 1e-12:
            logger.warning("⚠️  Constant image has no embedding direction; using the zero vector")
            return torch.zeros_like(vec)
        return vec / norm

    def embed_text(self, text: str) -> torch.Tensor:
        raise UnsupportedConfigurationError("the toy embedder has no text tower")


def frame_similarity(clip: Frames, backend: Optional[EmbeddingBackend] = None) -> float:
    """Mean cosine similarity of consecutive frames' embeddings"""
    frames = _as_frames(clip)
    if len(frames) < 2:
        raise ParameterError("frame similarity needs at least two frames")
    backend = backend or ToyImageEmbedder()
    embeddings = [backend.embed_image(f) for f in frames]
    sims = [float(torch.dot(a, b)) for a, b in zip(embeddings[:-1], embeddings[1:])]
    return sum(sims) / len(sims)


def _prompt_targets(edit_prompt: str) -> Dict[str, str]:
    unknown = Vocabulary().unknown_words(edit_prompt)
    if unknown:
        raise ParameterError(f"prompt '{edit_prompt}' uses words outside the vocabulary: {', '.join(unknown)}")
    targets = prompt_attributes(edit_prompt)
    if not targets:
        raise ParameterError(f"prompt '{edit_prompt}' names no colour ({', '.join(COLORS)}) "
                             f"or shape ({', '.join(SHAPES)}) from the vocabulary")
    return targets


def prompt_fidelity(clip: Frames, edit_prompt: str, classifier: "AttributeClassifier") -> float:
    """Mean per-frame accuracy of the classifier on the attributes the prompt names"""
    targets = _prompt_targets(edit_prompt)
    predictions = classifier.predict(torch.stack(_as_frames(clip)))
    scores = []
    for i in range(len(predictions["color"])):
        hits = [predictions[attr][i] == value for attr, value in targets.items()]
        scores.append(sum(hits) / len(hits))
    return sum(scores) / len(scores)


def attribute_score(clip: Frames, attribute: str, classifier: "AttributeClassifier") -> float:
    """Fraction of frames the classifier labels with one colour or shape"""
    if attribute in COLORS:
        head = "color"
    elif attribute in SHAPES:
        head = "shape"
    else:
        raise ParameterError(f"'{attribute}' is not a colour or shape of the vocabulary")
    labels = classifier.predict(torch.stack(_as_frames(clip)))[head]
    return sum(1 for label in labels if label == attribute) / len(labels)


def _shift(image: torch.Tensor, dx: int, dy: int) -> torch.Tensor:
    """image sampled at q - (dx, dy); out-of-bounds entries are inf"""
    c, h, w = image.shape
    out = torch.full_like(image, float("inf"))
    ys = slice(max(dy, 0), h + min(dy, 0))
    xs = slice(max(dx, 0), w + min(dx, 0))
    src_ys = slice(max(-dy, 0), h + min(-dy, 0))
    src_xs = slice(max(-dx, 0), w + min(-dx, 0))
    out[:, ys, xs] = image[:, src_ys, src_xs]
    return out


def block_matching_flow(f1: torch.Tensor, f2: torch.Tensor, block: int = 8, radius: int = 4) -> FlowField:
    """
    Integer flow from f1 to f2 by exhaustive block matching

    Each block of f2 takes the displacement within +-radius whose source block
    in f1 has the lowest SSD; ties go to the smallest displacement. Edge blocks
    are truncated.
    """
    if radius <= 0:
        raise ParameterError(f"radius must be positive, got {radius}")
    if block <= 0:
        raise ParameterError(f"block must be positive, got {block}")
    if f1.shape != f2.shape or f1.ndim != 3:
        raise ShapeError(f"frames must share a (C, H, W) shape, got {tuple(f1.shape)} and {tuple(f2.shape)}")
    _, h, w = f1.shape

    candidates = [(dx, dy) for dy in range(-radius, radius + 1) for dx in range(-radius, radius + 1)]
    candidates.sort(key=lambda d: (d[0] ** 2 + d[1] ** 2, abs(d[1]), abs(d[0])))

    costs = []
    for dx, dy in candidates:
        sq = (f2 - _shift(f1, dx, dy)).pow(2).sum(dim=0)
        costs.append(F.avg_pool2d(sq[None, None], block, stride=block, ceil_mode=True)[0, 0])
    best = torch.stack(costs).argmin(dim=0)

    table = torch.tensor(candidates, dtype=torch.float32)
    block_flow = table[best].permute(2, 0, 1)
    flow = block_flow.repeat_interleave(block, dim=1).repeat_interleave(block, dim=2)[:, :h, :w]
    return FlowField(flow.contiguous())


def consistency_mask(forward: FlowField, backward: FlowField) -> torch.Tensor:
    """
    Forward-backward check for the pair (i, i+1)

    forward is stored on frame i+1, backward (i+1 -> i) on frame i. A pixel is
    kept when following the forward flow and then the backward flow returns
    close to where it started.
    """
    if forward.size != backward.size:
        raise ShapeError(f"flow sizes differ: {forward.size} vs {backward.size}")
    back_at_source, inside = warp(backward.flow, FlowField(forward.flow))
    squared_diff = (forward.flow + back_at_source).pow(2).sum(dim=0)
    threshold = 0.01 * (forward.flow.pow(2).sum(dim=0) + back_at_source.pow(2).sum(dim=0)) + 0.5
    return ((squared_diff < threshold) & inside.bool()).to(forward.flow.dtype)


def estimate_flow(f1: torch.Tensor, f2: torch.Tensor, block: int = 8, radius: int = 4) -> FlowField:
    """Block-matching flow with its forward-backward consistency mask attached"""
    forward = block_matching_flow(f1, f2, block, radius)
    backward = block_matching_flow(f2, f1, block, radius)
    return FlowField(forward.flow, consistency_mask(forward, backward))


def estimate_clip_flows(clip: Frames, block: int = 8, radius: int = 4) -> List[FlowField]:
    frames = _as_frames(clip)
    return [estimate_flow(a, b, block, radius) for a, b in zip(frames[:-1], frames[1:])]


REPORT_SCHEMA = {
    "type": "object",
    "required": ["clip_id", "variant", "pixel_mse", "frame_similarity", "prompt_fidelity",
                 "n_frames", "resolution"],
    "properties": {
        "clip_id": {"type": "string"},
        "variant": {"type": "string"},
        "pixel_mse": {"type": "number", "minimum": 0},
        "frame_similarity": {"type": ["number", "null"], "minimum": -1, "maximum": 1},
        "prompt_fidelity": {"type": ["number", "null"], "minimum": 0, "maximum": 1},
        "n_frames": {"type": "integer", "minimum": 1},
        "resolution": {"type": "array", "items": {"type": "integer"}, "minItems": 2, "maxItems": 2},
    },
    "additionalProperties": False,
}


@dataclass
class MetricsReport:
    clip_id: str
    variant: str
    pixel_mse: float
    frame_similarity: Optional[float]
    prompt_fidelity: Optional[float]
    n_frames: int
    resolution: Tuple[int, int]

    def to_dict(self) -> Dict:
        data = asdict(self)
        data["resolution"] = list(self.resolution)
        return data


def evaluate_clip(edited: "VideoClip", edit_prompt: str, flows: Sequence[FlowField],
                  classifier: Optional["AttributeClassifier"] = None,
                  backend: Optional[EmbeddingBackend] = None,
                  variant: str = "", clip_id: Optional[str] = None) -> MetricsReport:
    """
    One metrics row for an edited clip

    flows come from the input clip by default (ground truth or estimated);
    prompt_fidelity is left empty without a classifier.
    """
    frames = _as_frames(edited)
    n = len(frames)
    report = MetricsReport(
        clip_id=clip_id or getattr(edited, "clip_id", "") or "clip",
        variant=variant,
        pixel_mse=pixel_mse(frames, flows),
        frame_similarity=frame_similarity(frames, backend) if n >= 2 else None,
        prompt_fidelity=prompt_fidelity(frames, edit_prompt, classifier) if classifier is not None else None,
        n_frames=n,
        resolution=(int(frames[0].shape[-2]), int(frames[0].shape[-1])),
    )
    fidelity = "n/a" if report.prompt_fidelity is None else f"{report.prompt_fidelity:.3f}"
    logger.info(f"📊 {report.clip_id} [{variant or 'edit'}]: Pixel-MSE {report.pixel_mse:.2f}, "
                f"fidelity {fidelity}")
    return report
