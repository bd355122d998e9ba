#!/usr/bin/env python3
"""
Unit tests for the INI configuration layer
"""

import os
import sys

import pytest

# Add the project root to the path (two levels up from tests/unit/)
sys.path.append(os.path.join(os.path.dirname(__file__), '..', '..'))

from src.attention_injection import DECODER_LAYERS, InjectionMode
from src.config_manager import (
    RunConfig, apply_overrides, from_ini_string, load_config, save_config, to_ini_string,
)
from src.errors import ConfigError
from src.guidance import GradMethod


def test_defaults_are_valid():
    config = RunConfig().validate()
    assert config.guidance.delta == 100.0 and config.guidance.active_steps == 25
    assert config.cfg.edit == 7.5 and config.cfg.invert == 1.0
    assert config.injection.policy().layers == DECODER_LAYERS
    assert config.schedule.build().num_inference_steps == 50


def test_ini_round_trip_is_a_fixed_point():
    config = apply_overrides(RunConfig(), seed=3, delta=50.0, policy="anchor_only", inject_layers="12-16")
    text = to_ini_string(config)
    parsed = from_ini_string(text)
    assert parsed == config
    assert to_ini_string(parsed) == text


def test_file_round_trip(tmp_path):
    config = apply_overrides(RunConfig(), grad_method="frozen_eps", weights="w.bin")
    path = save_config(config, tmp_path / "run.ini")
    assert load_config(path) == config


def test_partial_file_keeps_defaults():
    config = from_ini_string("[guidance]\ndelta = 10\n[run]\nseed = 4\n")
    assert config.guidance.delta == 10.0
    assert config.guidance.active_steps == 25
    assert config.seed == 4
    assert config.denoiser.image_size == 64


def test_missing_file_gives_defaults(tmp_path):
    assert load_config(tmp_path / "absent.ini") == RunConfig()
    assert load_config(None) == RunConfig()


def test_unknown_entries_are_rejected():
    with pytest.raises(ConfigError):
        from_ini_string("[guidance]\nstrength = 2\n")
    with pytest.raises(ConfigError):
        from_ini_string("[uploads]\ntarget = x\n")
    with pytest.raises(ConfigError):
        from_ini_string("[guidance]\ndelta = lots\n")
    with pytest.raises(ConfigError):
        from_ini_string("not an ini file")


def test_invalid_values_fail_validation():
    with pytest.raises(ConfigError):
        from_ini_string("[guidance]\ndelta = -1\n")
    with pytest.raises(ConfigError):
        from_ini_string("[schedule]\neta = 0.5\n").validate()
    with pytest.raises(ConfigError):
        from_ini_string("[guidance]\nactive_steps = 60\n").validate()
    with pytest.raises(ConfigError):
        from_ini_string("[cfg]\nedit = 0\n").validate()
    with pytest.raises(ConfigError):
        from_ini_string("[injection]\nlayers = 0-3\n").validate()


@pytest.mark.parametrize("section", ["[cfg]\nedit = 0.5\n", "[cfg]\ninvert = 0.9\n"])
def test_cfg_scales_below_one_fail_validation(section):
    with pytest.raises(ConfigError, match=">= 1.0"):
        from_ini_string(section).validate()
    assert from_ini_string("[cfg]\nedit = 1.0\ninvert = 1.0\n").validate().cfg.edit == 1.0


def test_overrides():
    config = apply_overrides(RunConfig(), seed=9, delta=0, active_steps=10, policy="none",
                             grad_method="finite_diff", cfg_scale=3.0, output_dir="out")
    assert config.seed == 9
    assert config.guidance.delta == 0.0 and config.guidance.active_steps == 10
    assert config.guidance.grad_method == GradMethod.FINITE_DIFF
    assert config.injection.mode == InjectionMode.NONE
    assert config.cfg.edit == 3.0 and config.paths.output_dir == "out"
    assert apply_overrides(RunConfig()) == RunConfig()
    with pytest.raises(ConfigError):
        apply_overrides(RunConfig(), policy="everything")
    with pytest.raises(ConfigError):
        apply_overrides(RunConfig(), delta=-5)


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-q"]))
