#!/usr/bin/env python3
"""
Fully Automated Benchmark Script
Runs the ablation on the standard synthetic fixtures with pre-configured settings
"""

import logging
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent))

from src.attribute_classifier import load_classifier
from src.config_manager import DEFAULT_CONFIG_FILE, load_config
from src.denoiser import load_denoiser
from src.errors import VideoEditError
from src.logging_setup import setup_logging
from src.pipeline import make_variants, run_ablation
from src.report_exporter import MetricsExporter
from src.synth import moving_shapes_fixture, rotational_fixture

logger = logging.getLogger("auto_processor")

# Benchmark - CUSTOMIZE THESE VALUES
BENCHMARK_CLIPS = [
    ("moving", moving_shapes_fixture, "blue circle on gray"),
    ("rotational", rotational_fixture, "red square on gray"),
]
BENCHMARK_VARIANTS = ["ours", "ours_wo_update", "per_frame", "anchor_only", "prev_only", "random_prev"]
BENCHMARK_SEEDS = [0, 1]


def automated_processing(config_file: str = DEFAULT_CONFIG_FILE) -> bool:
    """Run every benchmark clip and seed; True when all succeed"""
    config = load_config(config_file).validate()
    setup_logging(config.paths.log_level, config.paths.log_file or None, config.paths.events_file or None)

    if not config.paths.weights or not Path(config.paths.weights).exists():
        logger.error("❌ Denoiser weights not found!")
        logger.error("Train them first: python run_modular.py train <corpus> --out <weights>")
        return False

    model = load_denoiser(config.paths.weights)
    classifier_path = Path(config.paths.classifier) if config.paths.classifier else None
    classifier = load_classifier(classifier_path) if classifier_path and classifier_path.exists() else None
    if classifier is None:
        logger.warning("⚠️  No attribute classifier found, prompt fidelity will be empty")
    sched = config.schedule.build()
    variants = make_variants(BENCHMARK_VARIANTS, config.guidance, config.injection.anchor_index)
    exporter = MetricsExporter(Path(config.paths.output_dir) / "benchmark")

    runs = [(name, fixture, prompt, seed) for name, fixture, prompt in BENCHMARK_CLIPS for seed in BENCHMARK_SEEDS]
    logger.info(f"🚀 AUTOMATED BENCHMARK: {len(runs)} runs x {len(variants)} variants")

    success_count = 0
    for i, (name, fixture, prompt, seed) in enumerate(runs, 1):
        logger.info(f"🎬 RUN {i}/{len(runs)}: {name} seed {seed} -> '{prompt}'")
        try:
            clip = fixture(seed, model.config.image_size)
            reports = run_ablation(clip, prompt, variants, model, sched, cfg_scale=config.cfg.edit,
                                   seed=seed, classifier=classifier)
            exporter.export_all(reports, f"{name}_seed{seed}", prompt)
            success_count += 1
        except VideoEditError as e:
            logger.error(f"❌ {name} seed {seed} failed: {e}")
            continue

    logger.info(f"🎯 BENCHMARK COMPLETE: {success_count}/{len(runs)} runs succeeded")
    if success_count == len(runs):
        return True
    logger.warning("⚠️  Some runs failed - check logs above")
    return False


def scheduled_processing():
    """Version for scheduled/cron job execution"""
    try:
        success = automated_processing()
        sys.exit(0 if success else 1)
    except VideoEditError as e:
        logger.error(f"❌ {e}")
        sys.exit(1)
    except Exception as e:
        logger.exception(f"❌ Critical error in automated processing: {e}")
        sys.exit(2)


if __name__ == "__main__":
    if len(sys.argv) > 1 and sys.argv[1] == "--scheduled":
        # For cron jobs or scheduled execution
        scheduled_processing()
    else:
        automated_processing()
