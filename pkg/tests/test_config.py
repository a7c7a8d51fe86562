"""Tests for flat configuration resolution."""

import pytest
import toml
from rich.console import Console

from w2vj.utils.config import ConfigManager, RunConfig, coerce_value
from w2vj.utils.errors import ConfigError


def _write(tmp_path, text: str):
    path = tmp_path / "run.toml"
    path.write_text(text, encoding="utf-8")
    return path


class TestPrecedence:
    def test_defaults(self):
        manager = ConfigManager(environ={})
        assert manager.config == RunConfig()
        assert set(manager.sources.values()) == {"default"}

    def test_file_env_and_cli_layers(self, tmp_path):
        path = _write(tmp_path, 'seed = 3\nfrontend = "wav"\nencoder = "conformer"\n')
        manager = ConfigManager(
            path,
            overrides={"encoder": "transformer", "workers": None},
            environ={"W2VJ_SEED": "9", "W2VJ_FRONTEND": "fbank"},
        )
        assert manager.config.seed == 9
        assert manager.config.frontend == "fbank"
        assert manager.config.encoder == "transformer"
        assert manager.config.workers == 1
        assert manager.sources["seed"] == "env"
        assert manager.sources["encoder"] == "cli"
        assert manager.sources["workers"] == "default"

    def test_config_env_names_the_file(self, tmp_path):
        path = _write(tmp_path, "keep_top = 2\n")
        manager = ConfigManager(environ={"W2VJ_CONFIG": str(path)})
        assert manager.config.keep_top == 2
        assert manager.sources["keep_top"] == "file"

    def test_dump_reloads_to_the_same_config(self, tmp_path):
        manager = ConfigManager(overrides={"seed": 5, "peak_lr": 1e-3}, environ={})
        path = manager.dump(tmp_path / "out" / "config.toml")
        assert toml.load(path)["seed"] == 5
        assert ConfigManager(path, environ={}).config == manager.config

    def test_show_config_lists_sources(self):
        console = Console(record=True, width=120)
        ConfigManager(overrides={"seed": 4}, environ={}).show_config(console)
        text = console.export_text()
        assert "seed" in text
        assert "cli" in text


class TestValidation:
    def test_unknown_file_key(self, tmp_path):
        with pytest.raises(ConfigError):
            ConfigManager(_write(tmp_path, "learning_rate = 0.1\n"), environ={})

    def test_tables_are_rejected(self, tmp_path):
        with pytest.raises(ConfigError):
            ConfigManager(_write(tmp_path, "[model]\nseed = 1\n"), environ={})

    def test_invalid_toml(self, tmp_path):
        with pytest.raises(ConfigError):
            ConfigManager(_write(tmp_path, "seed = \n"), environ={})

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError):
            ConfigManager(tmp_path / "absent.toml", environ={})

    def test_unknown_env_key(self):
        with pytest.raises(ConfigError):
            ConfigManager(environ={"W2VJ_COLOUR": "blue"})

    @pytest.mark.parametrize(
        "key,value",
        [
            ("frontend", "mfcc"),
            ("seed", "three"),
            ("seed", 1.5),
            ("seed", True),
            ("seed", -1),
            ("workers", 0),
            ("peak_lr", -0.1),
        ],
    )
    def test_bad_values(self, key, value):
        with pytest.raises(ConfigError):
            coerce_value(key, value)

    def test_strings_are_coerced(self):
        assert coerce_value("seed", "7") == 7
        assert coerce_value("peak_lr", "5e-4") == pytest.approx(5e-4)
        assert coerce_value("seed", 4.0) == 4


class TestPresets:
    def test_zero_means_preset(self):
        run = RunConfig()
        assert run.pretrain_config().max_steps == 200
        assert run.finetune_config().max_steps == 400

    def test_overrides_reach_the_component_configs(self):
        run = RunConfig(
            pretrain_steps=30,
            finetune_steps=12,
            peak_lr=1e-3,
            eval_every=4,
            keep_top=2,
            seed=8,
        )
        pt = run.pretrain_config()
        assert (pt.max_steps, pt.warmup_steps, pt.peak_lr, pt.seed) == (30, 3, 1e-3, 8)
        ft = run.finetune_config()
        assert (ft.max_steps, ft.eval_every, ft.keep_top, ft.seed) == (12, 4, 2, 8)

    def test_base_finetune_follows_resource(self):
        low = RunConfig(model_size="base", resource="low").finetune_config()
        high = RunConfig(
            model_size="base", resource="high", mask_position="pre"
        ).finetune_config()
        assert (low.eval_every, high.eval_every) == (1600, 6400)
        assert high.mask_position == "pre"
        assert low.freezes_frontend and not high.freezes_frontend

    def test_model_config(self):
        config = RunConfig(frontend="wav", encoder="conformer").model_config()
        assert config.frontend.kind == "wav"
        assert config.encoder.kind == "conformer"
