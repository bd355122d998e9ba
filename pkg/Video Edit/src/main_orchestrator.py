#!/usr/bin/env python3
"""
Main Orchestrator for Video Edit
Command-line surface tying corpus generation, training, inversion, editing,
ablation and evaluation together
"""

import argparse
import logging
import sys
import time
from pathlib import Path
from typing import List, Optional, Sequence

import torch

from .attribute_classifier import load_classifier, save_classifier, train_attribute_classifier
from .clip_io import LatentStore, read_clip, read_latents, write_clip, write_latents, clip_digest
from .config_manager import DEFAULT_CONFIG_FILE, RunConfig, apply_overrides, load_config, save_config
from .denoiser import load_denoiser, save_denoiser, weights_digest
from .errors import ConfigError, VideoEditError
from .logging_setup import setup_logging
from .metrics import estimate_clip_flows, evaluate_clip
from .pipeline import VARIANT_PRESETS, edit_clip, invert_clip, latent_sidecar, make_variants, run_ablation
from .report_exporter import MetricsExporter
from .schedule import LatentFrame
from .synth import moving_shapes_fixture, read_corpus, rotational_fixture, write_corpus
from .training import train_toy

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_FAILED = 1
EXIT_CRASHED = 2


def _common_flags() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=None, help=f"INI config file (default: {DEFAULT_CONFIG_FILE} if present)")
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("--delta", type=float, default=None, help="guided update step size")
    common.add_argument("--active-steps", type=int, default=None, help="denoising steps with guidance on")
    common.add_argument("--policy", default=None,
                        choices=["none", "anchor_only", "prev_only", "anchor_plus_prev", "anchor_plus_random_prev"])
    common.add_argument("--inject-layers", default=None, help='"decoder", "all", a preset or a comma list')
    common.add_argument("--grad-method", default=None, choices=["autodiff", "frozen_eps", "finite_diff"])
    common.add_argument("--cfg-scale", type=float, default=None, help="classifier-free guidance scale for editing")
    common.add_argument("--weights", default=None, help="denoiser weights archive")
    common.add_argument("--log-level", default=None)
    common.add_argument("--events-file", default=None, help="JSON-lines file for structured events")
    return common


def build_parser() -> argparse.ArgumentParser:
    common = _common_flags()
    parser = argparse.ArgumentParser(prog="video-edit", description="Training-free toy video editing")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="write fixture clips or a training corpus")
    p.add_argument("--kind", choices=["moving", "rotational", "corpus"], default="moving")
    p.add_argument("--n-clips", type=int, default=64)
    p.add_argument("--resolution", type=int, default=None)
    p.add_argument("--n-frames", type=int, default=None)
    p.add_argument("--color", default=None)
    p.add_argument("--shape", default=None)
    p.add_argument("--out", required=True)

    p = sub.add_parser("train", parents=[common], help="train the toy denoiser on a corpus")
    p.add_argument("corpus_dir")
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--out", required=True, help="weights file to write")

    p = sub.add_parser("train-classifier", parents=[common], help="train the attribute classifier")
    p.add_argument("corpus_dir")
    p.add_argument("--steps", type=int, default=1500)
    p.add_argument("--out", required=True)

    p = sub.add_parser("invert", parents=[common], help="DDIM-invert every frame of a clip")
    p.add_argument("clip_dir")
    p.add_argument("--out", required=True, help="latents directory")

    p = sub.add_parser("edit", parents=[common], help="edit a clip with a new prompt")
    p.add_argument("clip_dir")
    p.add_argument("--latents", default=None, help="latents directory from `invert`")
    p.add_argument("--prompt", required=True)
    p.add_argument("--out", required=True, help="edited clip directory")

    p = sub.add_parser("ablate", parents=[common], help="edit once per variant and score each")
    p.add_argument("clip_dir")
    p.add_argument("--prompt", required=True)
    p.add_argument("--variants", default=",".join(VARIANT_PRESETS))
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--out", required=True, help="report directory")

    p = sub.add_parser("eval", parents=[common], help="score an edited clip")
    p.add_argument("edited_dir")
    p.add_argument("reference_dir")
    p.add_argument("--prompt", required=True)
    p.add_argument("--flow-source", choices=["input", "edited"], default="input")
    p.add_argument("--out", required=True, help="report directory")
    return parser


def resolve_config(args: argparse.Namespace) -> RunConfig:
    path = args.config
    if path is None and Path(DEFAULT_CONFIG_FILE).exists():
        path = DEFAULT_CONFIG_FILE
    config = apply_overrides(
        load_config(path),
        seed=args.seed, delta=args.delta, active_steps=args.active_steps, policy=args.policy,
        inject_layers=args.inject_layers, grad_method=args.grad_method, cfg_scale=args.cfg_scale,
        weights=args.weights,
    )
    return config.validate()


def _model(config: RunConfig):
    if not config.paths.weights:
        raise ConfigError("no denoiser weights given (--weights or [run] weights)")
    return load_denoiser(config.paths.weights)


def _classifier(config: RunConfig):
    if config.paths.classifier and Path(config.paths.classifier).exists():
        return load_classifier(config.paths.classifier)
    logger.warning("⚠️  No attribute classifier configured, prompt fidelity will be empty")
    return None


def cli_synth(args: argparse.Namespace, config: RunConfig) -> Path:
    resolution = args.resolution or config.denoiser.image_size
    if args.kind == "corpus":
        return write_corpus(args.out, args.n_clips, config.seed, resolution, args.n_frames or 4)
    fixture = moving_shapes_fixture if args.kind == "moving" else rotational_fixture
    kwargs = {k: v for k, v in (("color", args.color), ("kind", args.shape)) if v}
    clip = fixture(config.seed, resolution, args.n_frames or 8, **kwargs)
    return write_clip(clip, args.out)


def cli_train_toy(args: argparse.Namespace, config: RunConfig) -> Path:
    dataset = read_corpus(args.corpus_dir)
    result = train_toy(dataset, steps=args.steps, config=config.denoiser, sched=config.schedule.build(),
                       training=config.training, show_progress=True)
    logger.info(f"📉 Loss {result.initial_loss:.4f} -> {result.final_loss:.4f}")
    return save_denoiser(result.model, args.out)


def cli_train_classifier(args: argparse.Namespace, config: RunConfig) -> Path:
    dataset = read_corpus(args.corpus_dir)
    images = torch.stack([(e.image + 1.0) / 2.0 for e in dataset])
    classifier = train_attribute_classifier(images, [e.caption for e in dataset], steps=args.steps,
                                            seed=config.seed, show_progress=True)
    return save_classifier(classifier, args.out)


def cli_invert(args: argparse.Namespace, config: RunConfig) -> Path:
    model = _model(config)
    sched = config.schedule.build()
    clip = read_clip(args.clip_dir)
    latents = invert_clip(clip, model, sched, config.cfg.invert)
    return write_latents(args.out, [x.data.float() for x in latents],
                         latent_sidecar(clip, model, sched, config.cfg.invert))


def _load_inverted(directory: str, sched, model, clip, invert_scale: float) -> List[LatentFrame]:
    latents, sidecar = read_latents(directory)
    if sidecar["guidance_scale"] != float(invert_scale):
        raise ConfigError(f"{directory} was inverted at CFG scale {sidecar['guidance_scale']}, "
                          f"config asks for {invert_scale}")
    if sidecar["schedule"] != sched.fingerprint():
        raise ConfigError(f"{directory} was inverted under a different schedule")
    if sidecar["weights_hash"] != weights_digest(model):
        raise ConfigError(f"{directory} was inverted with different denoiser weights")
    if sidecar["clip_hash"] != clip_digest(clip):
        logger.warning(f"⚠️  {directory} was inverted from a different version of the clip")
    t_start = int(sched.timesteps[0])
    return [LatentFrame(x, t_start, i + 1) for i, x in enumerate(latents)]


def cli_edit(args: argparse.Namespace, config: RunConfig) -> Path:
    model = _model(config)
    sched = config.schedule.build()
    clip = read_clip(args.clip_dir)
    latents = _load_inverted(args.latents, sched, model, clip, config.cfg.invert) if args.latents else None
    store = None if latents is not None else LatentStore(Path(config.paths.output_dir) / "latents")
    edited = edit_clip(clip, args.prompt, config.injection.policy(), config.guidance, model, sched,
                       cfg_scale=config.cfg.edit, seed=config.seed, latents=latents,
                       invert_scale=config.cfg.invert, store=store)
    out = write_clip(edited, args.out)
    save_config(config, Path(out) / "run_config.ini")
    return out


def cli_ablate(args: argparse.Namespace, config: RunConfig) -> Path:
    model = _model(config)
    sched = config.schedule.build()
    clip = read_clip(args.clip_dir)
    names = [n.strip() for n in args.variants.split(",") if n.strip()]
    variants = make_variants(names, config.guidance, config.injection.anchor_index)
    latents = invert_clip(clip, model, sched, config.cfg.invert)
    reports = run_ablation(clip, args.prompt, variants, model, sched, cfg_scale=config.cfg.edit,
                           seed=config.seed, classifier=_classifier(config), max_workers=args.workers,
                           latents=latents)
    paths = MetricsExporter(args.out).export_all(reports, f"ablation_{clip.clip_id}", args.prompt)
    return paths["json"]


def cli_eval(args: argparse.Namespace, config: RunConfig) -> Path:
    edited = read_clip(args.edited_dir, require_depth=False)
    reference = read_clip(args.reference_dir, require_depth=False)
    if edited.n_frames != reference.n_frames or edited.resolution != reference.resolution:
        raise ConfigError(f"edited clip ({edited.n_frames} x {edited.resolution}) does not match "
                          f"reference ({reference.n_frames} x {reference.resolution})")
    if args.flow_source == "input":
        flows = reference.flows if reference.flows is not None else estimate_clip_flows(reference.frames)
    else:
        flows = estimate_clip_flows(edited.frames)
    report = evaluate_clip(edited, args.prompt, flows, _classifier(config),
                           variant=f"eval_{args.flow_source}_flow", clip_id=edited.clip_id)
    paths = MetricsExporter(args.out).export_all([report], f"eval_{edited.clip_id}", args.prompt)
    return paths["json"]


COMMANDS = {
    "synth": cli_synth,
    "train": cli_train_toy,
    "train-classifier": cli_train_classifier,
    "invert": cli_invert,
    "edit": cli_edit,
    "ablate": cli_ablate,
    "eval": cli_eval,
}


def run(argv: Optional[Sequence[str]] = None) -> Path:
    """Parse, configure logging, run one command; raises on failure"""
    args = build_parser().parse_args(argv)
    config = resolve_config(args)
    setup_logging(args.log_level or config.paths.log_level, config.paths.log_file or None,
                  args.events_file or config.paths.events_file or None)
    logger.info(f"🚀 video-edit {args.command} (seed {config.seed})")
    started = time.perf_counter()
    result = COMMANDS[args.command](args, config)
    logger.info(f"✅ {args.command} finished in {time.perf_counter() - started:.1f}s: {result}")
    return result


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Entry point; exit status 0 on success, 1 on a reported error, 2 on a crash"""
    try:
        run(argv)
        return EXIT_OK
    except VideoEditError as e:
        logger.error(f"❌ {type(e).__name__}: {e}")
        return EXIT_FAILED
    except Exception as e:
        logger.exception(f"❌ Critical error: {e}")
        return EXIT_CRASHED


if __name__ == "__main__":
    sys.exit(main())
