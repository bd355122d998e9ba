#!/usr/bin/env python3
"""
Synthetic video clips
Flat-coloured shapes moving over low-frequency textured backgrounds, with exact
depth, optical flow and captions; also the toy training corpus
"""

import itertools
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
from torch.nn import functional as F

from .clip_io import VideoClip, read_clip, write_clip
from .errors import SpecError
from .metrics import FlowField
from .training import TrainingExample
from .vocabulary import BACKGROUNDS, COLOR_RGB, COLORS, SHAPES

logger = logging.getLogger(__name__)

# Pixels within this distance of any shape edge are excluded from flow masks
BOUNDARY_BAND = 2.5
BACKGROUND_DEPTH = 1.0


@dataclass(frozen=True)
class Trajectory:
    """
    linear: start + frame * velocity
    circular: center + radius * (cos, sin)(phase + frame * angular_velocity)
    """
    kind: str = "linear"
    start: Tuple[float, float] = (32.0, 32.0)
    velocity: Tuple[float, float] = (0.0, 0.0)
    center: Tuple[float, float] = (32.0, 32.0)
    radius: float = 0.0
    angular_velocity: float = 0.0
    phase: float = 0.0

    def position(self, frame: int) -> Tuple[float, float]:
        if self.kind == "linear":
            return (self.start[0] + frame * self.velocity[0], self.start[1] + frame * self.velocity[1])
        if self.kind == "circular":
            angle = self.phase + frame * self.angular_velocity
            return (self.center[0] + self.radius * math.cos(angle), self.center[1] + self.radius * math.sin(angle))
        raise SpecError(f"unknown trajectory kind '{self.kind}'")


@dataclass(frozen=True)
class ShapeSpec:
    kind: str
    color: str
    size: float                # circumradius in pixels
    trajectory: Trajectory = field(default_factory=Trajectory)
    angle: float = 0.0         # orientation at frame 0, radians
    spin: float = 0.0          # orientation change per frame

    def orientation(self, frame: int) -> float:
        return self.angle + frame * self.spin

    @property
    def extent(self) -> float:
        """Radius of the disc that always contains the shape"""
        return self.size * math.sqrt(2.0) if self.kind == "square" else self.size


@dataclass(frozen=True)
class SceneSpec:
    shapes: Tuple[ShapeSpec, ...]
    background: str = "gray"
    texture: int = 0
    resolution: int = 64
    n_frames: int = 8
    seed: int = 0
    fps: float = 8.0

    @property
    def caption(self) -> str:
        first = self.shapes[0]
        return f"{first.color} {first.kind} on {self.background}"

    def validate(self) -> None:
        if not self.shapes:
            raise SpecError("a scene needs at least one shape")
        if self.resolution < 8 or self.n_frames < 1:
            raise SpecError(f"invalid resolution {self.resolution} or frame count {self.n_frames}")
        if self.background not in BACKGROUNDS:
            raise SpecError(f"unknown background '{self.background}'")
        for shape in self.shapes:
            if shape.kind not in SHAPES:
                raise SpecError(f"unknown shape kind '{shape.kind}'")
            if shape.color not in COLORS:
                raise SpecError(f"unknown shape colour '{shape.color}'")
            if shape.size <= 0:
                raise SpecError(f"shape size must be positive, got {shape.size}")
            for frame in range(self.n_frames):
                x, y = shape.trajectory.position(frame)
                r = shape.extent
                if x - r < 1 or y - r < 1 or x + r > self.resolution - 2 or y + r > self.resolution - 2:
                    raise SpecError(f"{shape.color} {shape.kind} leaves the frame at frame {frame + 1} "
                                    f"(center {x:.1f}, {y:.1f}, extent {r:.1f})")


def _rotate(dx: torch.Tensor, dy: torch.Tensor, angle: float) -> Tuple[torch.Tensor, torch.Tensor]:
    c, s = math.cos(angle), math.sin(angle)
    return c * dx - s * dy, s * dx + c * dy


def shape_sdf(shape: ShapeSpec, frame: int, xs: torch.Tensor, ys: torch.Tensor) -> torch.Tensor:
    """Signed distance (negative inside) of the shape at a frame, evaluated at (xs, ys)"""
    cx, cy = shape.trajectory.position(frame)
    lx, ly = _rotate(xs - cx, ys - cy, -shape.orientation(frame))
    r = shape.size
    if shape.kind == "circle":
        return torch.sqrt(lx ** 2 + ly ** 2) - r
    if shape.kind == "square":
        return torch.maximum(lx.abs(), ly.abs()) - r
    # equilateral triangle with circumradius r, pointing up
    inradius = r / 2.0
    edges = []
    for k in range(3):
        theta = math.pi / 2 + k * 2 * math.pi / 3
        edges.append(-(math.cos(theta) * lx + math.sin(theta) * ly) - inradius)
    return torch.stack(edges).max(dim=0).values


def _grid(resolution: int) -> Tuple[torch.Tensor, torch.Tensor]:
    ys, xs = torch.meshgrid(torch.arange(resolution, dtype=torch.float32),
                            torch.arange(resolution, dtype=torch.float32), indexing="ij")
    return xs, ys


def render_background(spec: SceneSpec) -> torch.Tensor:
    """Base colour modulated by smooth noise; static across frames"""
    rng = np.random.default_rng([spec.seed, spec.texture, 7])
    cells = 3 + spec.texture % 4
    coarse = torch.from_numpy(rng.uniform(-1.0, 1.0, size=(1, 3, cells, cells)).astype(np.float32))
    noise = F.interpolate(coarse, size=(spec.resolution, spec.resolution), mode="bicubic", align_corners=True)[0]
    base = torch.tensor(COLOR_RGB[spec.background], dtype=torch.float32)[:, None, None]
    return (base * (1.0 + 0.25 * noise) + 0.05 * noise).clamp(0.0, 1.0)


def _shape_depth(index: int, count: int) -> float:
    # later shapes are drawn on top and sit nearer
    return max(0.15, 0.6 - 0.12 * index) if count > 1 else 0.4


def render_frame(spec: SceneSpec, frame: int, background: Optional[torch.Tensor] = None
                 ) -> Tuple[torch.Tensor, torch.Tensor]:
    """(image (3, H, W), depth (H, W)) for one frame"""
    xs, ys = _grid(spec.resolution)
    image = (background if background is not None else render_background(spec)).clone()
    depth = BACKGROUND_DEPTH - 0.1 * ys / max(spec.resolution - 1, 1)
    for k, shape in enumerate(spec.shapes):
        coverage = (0.5 - shape_sdf(shape, frame, xs, ys)).clamp(0.0, 1.0)
        color = torch.tensor(COLOR_RGB[shape.color], dtype=torch.float32)[:, None, None]
        image = image * (1 - coverage) + color * coverage
        depth = depth * (1 - coverage) + _shape_depth(k, len(spec.shapes)) * coverage
    return image, depth


def scene_flow(spec: SceneSpec, frame: int) -> FlowField:
    """
    Exact flow for the pair (frame, frame + 1), stored on frame + 1

    Each pixel follows the topmost shape covering it (or the static
    background). The mask drops out-of-frame sources, pixels near any shape
    edge in either frame, and disocclusions where the source shows another layer.
    """
    xs, ys = _grid(spec.resolution)
    size = spec.resolution
    sdf_next = torch.stack([shape_sdf(s, frame + 1, xs, ys) for s in spec.shapes])
    inside_next = sdf_next < 0

    layer = torch.full(xs.shape, -1, dtype=torch.long)
    for k in range(len(spec.shapes)):
        layer[inside_next[k]] = k

    src_x, src_y = xs.clone(), ys.clone()
    for k, shape in enumerate(spec.shapes):
        sel = layer == k
        px, py = shape.trajectory.position(frame)
        nx, ny = shape.trajectory.position(frame + 1)
        rx, ry = _rotate(xs[sel] - nx, ys[sel] - ny, shape.orientation(frame) - shape.orientation(frame + 1))
        src_x[sel] = px + rx
        src_y[sel] = py + ry

    flow = torch.stack([xs - src_x, ys - src_y])

    sdf_src = torch.stack([shape_sdf(s, frame, src_x, src_y) for s in spec.shapes])
    layer_src = torch.full(xs.shape, -1, dtype=torch.long)
    for k in range(len(spec.shapes)):
        layer_src[sdf_src[k] < 0] = k

    valid = (src_x >= 0) & (src_x <= size - 1) & (src_y >= 0) & (src_y <= size - 1)
    valid &= (sdf_next.abs() > BOUNDARY_BAND).all(dim=0)
    valid &= (sdf_src.abs() > BOUNDARY_BAND).all(dim=0)
    valid &= layer_src == layer
    return FlowField(flow, valid.to(torch.float32))


def generate_clip(spec: SceneSpec) -> VideoClip:
    """Render a scene; deterministic given the spec (including its seed)"""
    spec.validate()
    background = render_background(spec)
    frames, depths = zip(*(render_frame(spec, f, background) for f in range(spec.n_frames)))
    flows = [scene_flow(spec, f) for f in range(spec.n_frames - 1)]
    return VideoClip(
        frames=torch.stack(frames),
        depths=torch.stack(depths),
        source_prompt=spec.caption,
        flows=flows,
        fps=spec.fps,
        seed=spec.seed,
        clip_id=f"synth-{spec.seed:05d}",
    )


def random_scene(rng: np.random.Generator, color: str, kind: str, resolution: int = 64,
                 n_frames: int = 4, motion: str = "linear", seed: int = 0) -> SceneSpec:
    """One-shape scene with a random size, placement, background and trajectory that stay in frame"""
    scale = resolution / 64.0
    size = float(rng.uniform(7.0, 12.0)) * scale
    extent = size * math.sqrt(2.0) if kind == "square" else size
    lo, hi = extent + 1.0, resolution - 2.0 - extent
    background = BACKGROUNDS[int(rng.integers(len(BACKGROUNDS)))]
    texture = int(rng.integers(1000))
    angle = float(rng.uniform(0, 2 * math.pi)) if kind != "circle" else 0.0

    if motion == "circular":
        radius = float(rng.uniform(4.0, 8.0)) * scale
        margin = radius + extent + 1.0
        center = (float(rng.uniform(margin, resolution - 2.0 - radius - extent)),
                  float(rng.uniform(margin, resolution - 2.0 - radius - extent)))
        trajectory = Trajectory("circular", center=center, radius=radius,
                                angular_velocity=float(rng.choice([-1, 1]) * rng.uniform(0.3, 0.6)),
                                phase=float(rng.uniform(0, 2 * math.pi)))
        spin = float(rng.uniform(0.1, 0.3)) if kind != "circle" else 0.0
    else:
        span = max(n_frames - 1, 1)
        max_speed = min(2.0 * scale, (hi - lo) / span)
        velocity = (float(rng.uniform(-max_speed, max_speed)), float(rng.uniform(-max_speed, max_speed)))
        start = []
        for v in velocity:
            a = lo - min(0.0, v * span)
            b = hi - max(0.0, v * span)
            start.append(float(rng.uniform(a, b)) if b > a else (lo + hi) / 2)
        trajectory = Trajectory("linear", start=(start[0], start[1]), velocity=velocity)
        spin = 0.0

    return SceneSpec(
        shapes=(ShapeSpec(kind, color, size, trajectory, angle, spin),),
        background=background,
        texture=texture,
        resolution=resolution,
        n_frames=n_frames,
        seed=seed,
    )


def _balanced_pairs(n: int, rng: np.random.Generator) -> List[Tuple[str, str]]:
    grid = list(itertools.product(COLORS, SHAPES))
    pairs: List[Tuple[str, str]] = []
    while len(pairs) < n:
        order = rng.permutation(len(grid))
        pairs.extend(grid[i] for i in order)
    return pairs[:n]


def generate_corpus_clips(n_clips: int, seed: int = 0, resolution: int = 64, n_frames: int = 4) -> List[VideoClip]:
    if n_clips <= 0:
        raise SpecError(f"n_clips must be positive, got {n_clips}")
    rng = np.random.default_rng(seed)
    clips = []
    for i, (color, kind) in enumerate(_balanced_pairs(n_clips, rng)):
        motion = "circular" if rng.random() < 0.3 else "linear"
        spec = random_scene(rng, color, kind, resolution, n_frames, motion, seed=seed * 100003 + i)
        clips.append(generate_clip(spec))
    return clips


def clips_to_examples(clips: Sequence[VideoClip]) -> List[TrainingExample]:
    """Every frame of every clip as an (image in [-1, 1], caption, depth) triple"""
    return [
        TrainingExample(image=clip.frames[i] * 2.0 - 1.0, caption=clip.source_prompt, depth=clip.depths[i])
        for clip in clips for i in range(clip.n_frames)
    ]


def generate_corpus(n_clips: int, seed: int = 0, resolution: int = 64, n_frames: int = 4) -> List[TrainingExample]:
    """
    Training triples from n_clips one-shape clips; (colour, shape) pairs cycle
    through the full grid so each pair's count is uniform up to one
    """
    examples = clips_to_examples(generate_corpus_clips(n_clips, seed, resolution, n_frames))
    logger.info(f"🎨 Generated corpus: {n_clips} clips, {len(examples)} frames")
    return examples


def moving_shapes_fixture(seed: int = 0, resolution: int = 64, n_frames: int = 8,
                          color: str = "red", kind: str = "circle") -> VideoClip:
    """Standard linear-motion fixture (one shape, textured background)"""
    rng = np.random.default_rng([seed, 11])
    return generate_clip(random_scene(rng, color, kind, resolution, n_frames, "linear", seed=seed))


def rotational_fixture(seed: int = 0, resolution: int = 64, n_frames: int = 8,
                       color: str = "green", kind: str = "square") -> VideoClip:
    """Circular motion with spinning orientation"""
    rng = np.random.default_rng([seed, 13])
    return generate_clip(random_scene(rng, color, kind, resolution, n_frames, "circular", seed=seed))


def write_corpus(directory: Union[str, Path], n_clips: int, seed: int = 0, resolution: int = 64,
                 n_frames: int = 4) -> Path:
    directory = Path(directory)
    for clip in generate_corpus_clips(n_clips, seed, resolution, n_frames):
        write_clip(clip, directory / clip.clip_id)
    logger.info(f"💾 Wrote {n_clips} corpus clips to {directory}")
    return directory


def read_corpus(directory: Union[str, Path]) -> List[TrainingExample]:
    directory = Path(directory)
    clip_dirs = sorted(p for p in directory.iterdir() if (p / "meta.json").is_file()) if directory.is_dir() else []
    if not clip_dirs:
        raise SpecError(f"no clip directories under {directory}")
    return clips_to_examples([read_clip(p) for p in clip_dirs])
