"""
Test suite for run configuration loading and validation

Tests defaults, JSON files, dotted overrides, validation and runtime settings.
"""

import json
import os
from pathlib import Path
from unittest.mock import patch

import pytest

from looped_vlm.config import (RunConfig, RuntimeSettings, apply_overrides, load_run_config,
                               resolve_output_dir, validate_config)
from looped_vlm.errors import ConfigError

from test_config import TestConfig


@pytest.mark.unit
class TestRunConfig:
    """Test cases for RunConfig loading"""

    def test_defaults(self):
        """Test the default model and derived values"""
        cfg = load_run_config()
        assert cfg.model.hidden == 128
        assert cfg.vision.n_visual_tokens == 16
        assert cfg.inference_r_max == cfg.model.r_max == 32
        assert cfg.prefill_steps == 32
        assert cfg.model.state_std == pytest.approx(1 / 128 ** 0.5)
        assert validate_config(cfg)["valid"]

    def test_dict_round_trip(self):
        """Test that to_dict/from_dict preserves the config"""
        cfg = TestConfig.tiny_config()
        assert RunConfig.from_dict(cfg.to_dict()) == cfg
        assert cfg.vision.tier_layers == (1, 2, 3, 4)

    def test_file_with_overrides(self, temp_dir):
        """Test a JSON file merged with dotted overrides"""
        path = temp_dir / "run.json"
        path.write_text(json.dumps({"seed": 5, "model": {"r_max": 16}}))
        cfg = load_run_config(path, {"model.r_bar": 4})
        assert (cfg.seed, cfg.model.r_max, cfg.model.r_bar) == (5, 16, 4)

    def test_lenient_json(self, temp_dir):
        """Test that trailing commas are accepted through dirtyjson"""
        path = temp_dir / "run.json"
        path.write_text('{"seed": 3, "model": {"r_max": 16,},}')
        with patch.dict(os.environ, {"USE_DIRTYJSON": "true"}):
            cfg = load_run_config(path, settings=RuntimeSettings(load_env_file=False))
        assert cfg.model.r_max == 16

    def test_strict_json_rejects_trailing_comma(self, temp_dir):
        """Test the plain json parser when dirtyjson is disabled"""
        path = temp_dir / "run.json"
        path.write_text('{"seed": 3,}')
        with patch.dict(os.environ, {"USE_DIRTYJSON": "false"}):
            with pytest.raises(ConfigError):
                load_run_config(path, settings=RuntimeSettings(load_env_file=False))

    def test_unknown_key(self):
        """Test that unknown keys are reported with their path"""
        with pytest.raises(ConfigError) as exc:
            load_run_config(None, {"model.depth": 3})
        assert "model.depth" in str(exc.value)

    def test_type_errors(self):
        """Test wrong value types"""
        with pytest.raises(ConfigError):
            load_run_config(None, {"model.r_max": "many"})
        with pytest.raises(ConfigError):
            load_run_config(None, {"model.use_hierarchy": 1})

    @pytest.mark.parametrize("overrides,fragment", [
        ({"vision.patch_size": 5}, "divisible"),
        ({"vision.tier_layers": [2, 4, 6]}, "exactly 4"),
        ({"vision.tier_layers": [4, 2, 6, 8]}, "increasing"),
        ({"model.k_grad": 40}, "k_grad"),
        ({"model.injection_mode": "random"}, "injection_mode"),
        ({"data.eval_seed_start": 100}, "overlap"),
        ({"data.mix": {"global_count": 0.9, "local_attribute": 0.3}}, "sum to 1"),
        ({"train.fixed_depth": 64}, "fixed_depth"),
        ({"inference.r_max": 64}, "inference.r_max"),
        ({"trace.steady_step": 40}, "steady_step"),
    ])
    def test_validation_issues(self, overrides, fragment):
        """Test that invalid values are collected as issues"""
        with pytest.raises(ConfigError) as exc:
            load_run_config(None, overrides)
        assert any(fragment in issue for issue in exc.value.issues)

    def test_apply_overrides_returns_copy(self):
        """Test that overrides produce a new validated config"""
        cfg = TestConfig.tiny_config()
        updated = apply_overrides(cfg, {"model.use_hierarchy": False})
        assert updated.model.use_hierarchy is False
        assert cfg.model.use_hierarchy is True
        with pytest.raises(ConfigError):
            apply_overrides(cfg, {"model.r_max": 0})


@pytest.mark.unit
class TestRuntimeSettings:
    """Test cases for RuntimeSettings"""

    def test_environment_values(self):
        """Test reading settings from the environment"""
        env = {"LOOPED_VLM_OUTPUT_ROOT": "/tmp/out", "LOOPED_VLM_LOG_LEVEL": "debug",
               "LOOPED_VLM_EVAL_WORKERS": "3", "LOOPED_VLM_PROGRESS": "false"}
        with patch.dict(os.environ, env):
            settings = RuntimeSettings(load_env_file=False)
        assert settings.OUTPUT_ROOT == "/tmp/out"
        assert settings.LOG_LEVEL == "DEBUG"
        assert settings.EVAL_WORKERS == 3
        assert settings.PROGRESS is False

    def test_validate_settings(self):
        """Test invalid log level and worker count"""
        with patch.dict(os.environ, {"LOOPED_VLM_LOG_LEVEL": "LOUD", "LOOPED_VLM_EVAL_WORKERS": "0"}):
            result = RuntimeSettings.validate_settings(load_env_file=False)
        assert not result["valid"]
        assert len(result["issues"]) == 2

    def test_resolve_output_dir(self):
        """Test joining relative output dirs onto the output root"""
        cfg = TestConfig.tiny_config()
        with patch.dict(os.environ, {"LOOPED_VLM_OUTPUT_ROOT": "/data/runs"}):
            settings = RuntimeSettings(load_env_file=False)
        assert resolve_output_dir(cfg, settings) == Path("/data/runs/runs/default")
        absolute = TestConfig.tiny_config(output_dir="/abs/run")
        assert resolve_output_dir(absolute, settings) == Path("/abs/run")
