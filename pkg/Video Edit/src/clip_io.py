#!/usr/bin/env python3
"""
Clip and array file I/O
Clip directories (frames/, depth/, flow/, meta.json), the binary float array
container, and the on-disk store of inverted latents
"""

import hashlib
import json
import logging
import struct
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import jsonschema
import numpy as np
import torch
from PIL import Image

from .errors import ArchiveFormatError, ConfigError, ParameterError, ShapeError
from .metrics import FlowField

logger = logging.getLogger(__name__)

MAGIC = b"VEARRAY1"
FORMAT_VERSION = 1

ARCHIVE_HEADER_SCHEMA = {
    "type": "object",
    "required": ["arrays"],
    "properties": {
        "arrays": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["name", "shape", "offset", "nbytes"],
                "properties": {
                    "name": {"type": "string"},
                    "shape": {"type": "array", "items": {"type": "integer", "minimum": 0}},
                    "offset": {"type": "integer", "minimum": 0},
                    "nbytes": {"type": "integer", "minimum": 0},
                },
            },
        },
    },
}

META_SCHEMA = {
    "type": "object",
    "required": ["resolution", "n_frames", "source_prompt", "fps"],
    "properties": {
        "clip_id": {"type": "string"},
        "resolution": {"type": "array", "items": {"type": "integer", "minimum": 1}, "minItems": 2, "maxItems": 2},
        "n_frames": {"type": "integer", "minimum": 1},
        "source_prompt": {"type": "string"},
        "fps": {"type": "number", "exclusiveMinimum": 0},
        "seed": {"type": ["integer", "null"]},
        "format_version": {"type": "integer"},
    },
}

LATENT_SIDECAR_SCHEMA = {
    "type": "object",
    "required": ["clip_hash", "weights_hash", "schedule", "guidance_scale", "n_frames", "shape"],
    "properties": {
        "clip_hash": {"type": "string"},
        "weights_hash": {"type": "string"},
        "schedule": {"type": "object"},
        "guidance_scale": {"type": "number", "minimum": 1.0},
        "n_frames": {"type": "integer", "minimum": 1},
        "shape": {"type": "array", "items": {"type": "integer"}},
        "source_prompt": {"type": "string"},
    },
}


def write_arrays(path: Union[str, Path], arrays: Dict[str, torch.Tensor],
                 header: Optional[Dict] = None) -> Path:
    """
    Write named arrays as VEARRAY1: magic, <Q JSON header length, JSON header,
    then little-endian float32 row-major payloads (offsets relative to the data section)
    """
    header = dict(header or {})
    if "arrays" in header:
        raise ParameterError("'arrays' is reserved in the archive header")
    entries, chunks, offset = [], [], 0
    for name, value in arrays.items():
        data = np.ascontiguousarray(np.asarray(value.detach().cpu() if isinstance(value, torch.Tensor) else value,
                                               dtype="<f4"))
        raw = data.tobytes(order="C")
        entries.append({"name": name, "shape": list(data.shape), "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    header_bytes = json.dumps({"arrays": entries, **header}, sort_keys=True).encode("utf-8")

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<Q", len(header_bytes)))
        f.write(header_bytes)
        for raw in chunks:
            f.write(raw)
    return path


def read_arrays(path: Union[str, Path]) -> Tuple[Dict[str, torch.Tensor], Dict]:
    """Inverse of write_arrays; returns (name -> float32 tensor, header without 'arrays')"""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"array file not found: {path}")
    blob = path.read_bytes()
    if blob[:len(MAGIC)] != MAGIC:
        raise ArchiveFormatError(f"{path}: bad magic {blob[:len(MAGIC)]!r}")
    if len(blob) < len(MAGIC) + 8:
        raise ArchiveFormatError(f"{path}: truncated header")
    (header_len,) = struct.unpack("<Q", blob[len(MAGIC):len(MAGIC) + 8])
    data_start = len(MAGIC) + 8 + header_len
    if data_start > len(blob):
        raise ArchiveFormatError(f"{path}: header length {header_len} runs past the end of the file")
    try:
        header = json.loads(blob[len(MAGIC) + 8:data_start].decode("utf-8"))
        jsonschema.validate(header, ARCHIVE_HEADER_SCHEMA)
    except (ValueError, jsonschema.ValidationError) as e:
        raise ArchiveFormatError(f"{path}: invalid header: {e}")

    arrays: Dict[str, torch.Tensor] = {}
    for entry in header.pop("arrays"):
        count = int(np.prod(entry["shape"], dtype=np.int64))
        if entry["nbytes"] != 4 * count:
            raise ArchiveFormatError(f"{path}: '{entry['name']}' has {entry['nbytes']} bytes for shape {entry['shape']}")
        start = data_start + entry["offset"]
        if start + entry["nbytes"] > len(blob):
            raise ArchiveFormatError(f"{path}: '{entry['name']}' runs past the end of the file")
        data = np.frombuffer(blob, dtype="<f4", count=count, offset=start).reshape(entry["shape"])
        arrays[entry["name"]] = torch.from_numpy(data.astype(np.float32, copy=True))
    return arrays, header


@dataclass(eq=False)
class VideoClip:
    """
    Frames (n, 3, H, W) and depths (n, H, W), both in [0, 1], with optional
    flows (n - 1 FlowFields) between consecutive frames
    """
    frames: torch.Tensor
    depths: torch.Tensor
    source_prompt: str = ""
    flows: Optional[List[FlowField]] = None
    fps: float = 8.0
    seed: Optional[int] = None
    clip_id: str = "clip"

    def __post_init__(self):
        if self.frames.ndim != 4 or self.frames.shape[1] != 3 or self.frames.shape[0] < 1:
            raise ShapeError(f"frames must be (n >= 1, 3, H, W), got {tuple(self.frames.shape)}")
        if tuple(self.depths.shape) != (self.frames.shape[0], *self.frames.shape[2:]):
            raise ShapeError(f"depths {tuple(self.depths.shape)} do not match frames {tuple(self.frames.shape)}")
        if self.flows is not None:
            if len(self.flows) != self.n_frames - 1:
                raise ShapeError(f"{self.n_frames} frames need {self.n_frames - 1} flows, got {len(self.flows)}")
            for flow in self.flows:
                if flow.size != self.resolution:
                    raise ShapeError(f"flow size {flow.size} != clip resolution {self.resolution}")

    @property
    def n_frames(self) -> int:
        return int(self.frames.shape[0])

    @property
    def resolution(self) -> Tuple[int, int]:
        return int(self.frames.shape[2]), int(self.frames.shape[3])

    def with_frames(self, frames: torch.Tensor, clip_id: Optional[str] = None) -> "VideoClip":
        """Same depths and metadata around new frames (flows belong to the input and are dropped)"""
        return replace(self, frames=frames, flows=None, clip_id=clip_id or self.clip_id)

    def meta(self) -> Dict:
        return {
            "clip_id": self.clip_id,
            "resolution": list(self.resolution),
            "n_frames": self.n_frames,
            "source_prompt": self.source_prompt,
            "fps": float(self.fps),
            "seed": self.seed,
            "format_version": FORMAT_VERSION,
        }


def clip_digest(clip: VideoClip) -> str:
    digest = hashlib.sha256(clip.source_prompt.encode("utf-8"))
    digest.update(clip.frames.detach().to(torch.float32).cpu().contiguous().numpy().tobytes())
    digest.update(clip.depths.detach().to(torch.float32).cpu().contiguous().numpy().tobytes())
    return digest.hexdigest()


def _to_uint8(image: torch.Tensor) -> np.ndarray:
    arr = image.detach().cpu().clamp(0, 1).permute(1, 2, 0).numpy()
    return np.rint(arr * 255.0).astype(np.uint8)


def write_clip(clip: VideoClip, directory: Union[str, Path]) -> Path:
    """Write frames as lossless PNG, depth and flow as binary arrays, plus meta.json"""
    directory = Path(directory)
    for sub in ("frames", "depth"):
        (directory / sub).mkdir(parents=True, exist_ok=True)
    for i in range(clip.n_frames):
        Image.fromarray(_to_uint8(clip.frames[i])).save(directory / "frames" / f"frame_{i + 1:04d}.png",
                                                       format="PNG")
        write_arrays(directory / "depth" / f"depth_{i + 1:04d}.bin", {"depth": clip.depths[i]})
    if clip.flows:
        (directory / "flow").mkdir(exist_ok=True)
        for i, flow in enumerate(clip.flows):
            arrays = {"flow": flow.flow}
            if flow.mask is not None:
                arrays["mask"] = flow.mask
            write_arrays(directory / "flow" / f"flow_{i + 1:04d}.bin", arrays)
    with open(directory / "meta.json", "w", encoding="utf-8") as f:
        json.dump(clip.meta(), f, indent=2, sort_keys=True)
    logger.info(f"💾 Wrote {clip.n_frames}-frame clip to {directory}")
    return directory


def _read_depth(path: Path) -> torch.Tensor:
    if path.suffix == ".bin":
        return read_arrays(path)[0]["depth"]
    with Image.open(path) as img:
        arr = np.asarray(img)
    if arr.ndim != 2:
        raise ConfigError(f"depth image {path} must be single-channel")
    scale = 65535.0 if arr.dtype == np.uint16 or arr.max() > 255 else 255.0
    return torch.from_numpy(arr.astype(np.float32) / scale)


def read_clip(directory: Union[str, Path], require_depth: bool = True) -> VideoClip:
    """
    Load a clip directory

    Raises:
        ConfigError: missing meta.json / frames, count or resolution mismatch,
            or missing depth maps while require_depth is set
    """
    directory = Path(directory)
    meta_path = directory / "meta.json"
    if not meta_path.is_file():
        raise ConfigError(f"{directory} is not a clip directory (no meta.json)")
    with open(meta_path, "r", encoding="utf-8") as f:
        meta = json.load(f)
    try:
        jsonschema.validate(meta, META_SCHEMA)
    except jsonschema.ValidationError as e:
        raise ConfigError(f"{meta_path}: {e.message}")
    n = meta["n_frames"]
    height, width = meta["resolution"]

    frame_files = sorted((directory / "frames").glob("frame_*.png"))
    if len(frame_files) != n:
        raise ConfigError(f"{directory}: meta.json says {n} frames, found {len(frame_files)}")
    frames = []
    for path in frame_files:
        with Image.open(path) as img:
            arr = np.asarray(img.convert("RGB"), dtype=np.float32) / 255.0
        if arr.shape[:2] != (height, width):
            raise ConfigError(f"{path} is {arr.shape[1]}x{arr.shape[0]}, meta.json says {width}x{height}")
        frames.append(torch.from_numpy(arr).permute(2, 0, 1))

    depth_files = sorted((directory / "depth").glob("depth_*.bin")) or \
        sorted((directory / "depth").glob("depth_*.png"))
    if not depth_files:
        if require_depth:
            raise ConfigError(f"{directory}: the denoiser is depth-conditioned but depth/ is missing or empty")
        depths = torch.ones(n, height, width)
    elif len(depth_files) != n:
        raise ConfigError(f"{directory}: {len(depth_files)} depth maps for {n} frames")
    else:
        depths = torch.stack([_read_depth(p) for p in depth_files])
        if tuple(depths.shape[1:]) != (height, width):
            raise ConfigError(f"{directory}: depth resolution {tuple(depths.shape[1:])} != {(height, width)}")
        if float(depths.min()) < 0 or float(depths.max()) > 1:
            raise ConfigError(f"{directory}: depth values must lie in [0, 1]")

    flows = None
    flow_files = sorted((directory / "flow").glob("flow_*.bin"))
    if flow_files:
        if len(flow_files) != n - 1:
            raise ConfigError(f"{directory}: {len(flow_files)} flow files for {n} frames")
        flows = []
        for path in flow_files:
            arrays, _ = read_arrays(path)
            flows.append(FlowField(arrays["flow"], arrays.get("mask")))

    return VideoClip(
        frames=torch.stack(frames),
        depths=depths,
        source_prompt=meta["source_prompt"],
        flows=flows,
        fps=float(meta["fps"]),
        seed=meta.get("seed"),
        clip_id=meta.get("clip_id") or directory.name,
    )


def write_latents(directory: Union[str, Path], latents: List[torch.Tensor], sidecar: Dict) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    sidecar = {**sidecar, "n_frames": len(latents), "shape": list(latents[0].shape)}
    jsonschema.validate(sidecar, LATENT_SIDECAR_SCHEMA)
    write_arrays(directory / "latents.bin",
                 {f"frame_{i + 1:04d}": x for i, x in enumerate(latents)}, {"kind": "latents"})
    with open(directory / "sidecar.json", "w", encoding="utf-8") as f:
        json.dump(sidecar, f, indent=2, sort_keys=True)
    return directory


def read_latents(directory: Union[str, Path]) -> Tuple[List[torch.Tensor], Dict]:
    directory = Path(directory)
    sidecar_path = directory / "sidecar.json"
    if not sidecar_path.is_file():
        raise ConfigError(f"{directory} holds no inverted latents (no sidecar.json)")
    with open(sidecar_path, "r", encoding="utf-8") as f:
        sidecar = json.load(f)
    try:
        jsonschema.validate(sidecar, LATENT_SIDECAR_SCHEMA)
    except jsonschema.ValidationError as e:
        raise ConfigError(f"{sidecar_path}: {e.message}")
    arrays, _ = read_arrays(directory / "latents.bin")
    latents = [arrays[f"frame_{i + 1:04d}"] for i in range(sidecar["n_frames"])]
    return latents, sidecar


class LatentStore:
    """Inverted latents keyed by clip, source prompt, weights, schedule and inversion CFG scale"""

    def __init__(self, root: Union[str, Path]):
        self.root = Path(root)

    @staticmethod
    def key(clip_hash: str, weights_hash: str, schedule_hash: str, source_prompt: str,
            guidance_scale: float) -> str:
        text = f"{clip_hash}:{weights_hash}:{schedule_hash}:{source_prompt}:{float(guidance_scale)!r}"
        return hashlib.sha256(text.encode("utf-8")).hexdigest()[:24]

    def path_for(self, key: str) -> Path:
        return self.root / key

    def load(self, key: str) -> Optional[List[torch.Tensor]]:
        path = self.path_for(key)
        if not (path / "sidecar.json").is_file():
            return None
        latents, _ = read_latents(path)
        logger.info(f"📦 Reusing inverted latents {key}")
        return latents

    def save(self, key: str, latents: List[torch.Tensor], sidecar: Dict) -> Path:
        return write_latents(self.path_for(key), latents, sidecar)
