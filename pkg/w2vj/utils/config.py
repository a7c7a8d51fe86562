"""
Configuration management for w2vj.

A run is described by one flat table of keys. Values are resolved from, in
increasing precedence: built-in defaults, a TOML config file, ``W2VJ_<KEY>``
environment variables and command-line flags.
"""

import os
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path
from typing import Any, Dict, Mapping, Optional, Tuple, Union

import toml
from rich.console import Console
from rich.table import Table

from .errors import ConfigError

ENV_PREFIX = "W2VJ_"
CONFIG_ENV = "W2VJ_CONFIG"

CHOICES: Dict[str, Tuple[str, ...]] = {
    "model_size": ("toy", "base", "gradcheck"),
    "frontend": ("wav", "fbank"),
    "encoder": ("transformer", "conformer"),
    "mask_position": ("pre", "post"),
    "resource": ("low", "high"),
}
NON_NEGATIVE = (
    "seed",
    "pretrain_steps",
    "finetune_steps",
    "batch_seconds",
    "peak_lr",
    "eval_every",
    "checkpoint_every",
)
POSITIVE = ("workers", "keep_top")


@dataclass(frozen=True)
class RunConfig:
    """Flat run configuration. Zero for a step/rate key means "preset value"."""

    seed: int = 0
    model_size: str = "toy"
    frontend: str = "fbank"
    encoder: str = "transformer"
    mask_position: str = "post"
    resource: str = "low"
    workers: int = 1
    pretrain_steps: int = 0
    finetune_steps: int = 0
    batch_seconds: float = 0.0
    peak_lr: float = 0.0
    eval_every: int = 0
    checkpoint_every: int = 0
    keep_top: int = 5
    manifest: str = ""
    dev_manifest: str = ""
    vocab: str = ""
    cmvn: str = ""
    pretrained: str = ""
    out: str = "runs"

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    # Resolved component configurations; imports are local so the config layer
    # stays importable without the numerical core.

    def model_config(self) -> Any:
        from ..core.model import ModelConfig

        return ModelConfig.preset(
            self.model_size, frontend=self.frontend, encoder=self.encoder
        )

    def pretrain_config(self) -> Any:
        from ..core.pretrain import PretrainConfig

        if self.model_size == "base":
            config = PretrainConfig(seed=self.seed)
        else:
            config = PretrainConfig.toy(seed=self.seed)
        overrides = _nonzero(
            max_steps=self.pretrain_steps,
            peak_lr=self.peak_lr,
            batch_seconds=self.batch_seconds,
            checkpoint_every=self.checkpoint_every,
        )
        if "max_steps" in overrides and self.model_size != "base":
            overrides.setdefault("warmup_steps", max(overrides["max_steps"] // 10, 1))
        return replace(config, **overrides)

    def finetune_config(self) -> Any:
        from ..core.finetune import FinetuneConfig

        if self.model_size == "base":
            config = FinetuneConfig.preset(self.resource, self.mask_position)
        else:
            config = FinetuneConfig.toy(self.mask_position)
        overrides = _nonzero(
            max_steps=self.finetune_steps,
            peak_lr=self.peak_lr,
            batch_seconds=self.batch_seconds,
            eval_every=self.eval_every,
        )
        return replace(config, seed=self.seed, keep_top=self.keep_top, **overrides)


def _nonzero(**values: Any) -> Dict[str, Any]:
    return {key: value for key, value in values.items() if value}


_FIELDS = {f.name: f for f in fields(RunConfig)}


def coerce_value(key: str, value: Any) -> Any:
    """Convert ``value`` to the declared type of ``key`` and check its range."""
    if key not in _FIELDS:
        raise ConfigError(f"unknown configuration key {key!r}")
    kind = type(getattr(RunConfig(), key))
    try:
        if kind is int:
            fractional = isinstance(value, float) and not value.is_integer()
            if isinstance(value, bool) or fractional:
                raise ValueError(value)
            converted: Any = int(value)
        elif kind is float:
            if isinstance(value, bool):
                raise ValueError(value)
            converted = float(value)
        else:
            converted = str(value)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{key}: expected {kind.__name__}, got {value!r}") from e
    if key in CHOICES and converted not in CHOICES[key]:
        raise ConfigError(f"{key}: must be one of {CHOICES[key]}, got {converted!r}")
    if key in NON_NEGATIVE and converted < 0:
        raise ConfigError(f"{key}: must be non-negative, got {converted}")
    if key in POSITIVE and converted <= 0:
        raise ConfigError(f"{key}: must be positive, got {converted}")
    return converted


class ConfigManager:
    """Resolves a RunConfig and remembers where each value came from."""

    def __init__(
        self,
        config_file: Optional[Union[str, Path]] = None,
        overrides: Optional[Mapping[str, Any]] = None,
        environ: Optional[Mapping[str, str]] = None,
    ) -> None:
        environ = os.environ if environ is None else environ
        if config_file is None and environ.get(CONFIG_ENV):
            config_file = environ[CONFIG_ENV]
        self.config_file = Path(config_file) if config_file is not None else None
        self.sources: Dict[str, str] = {name: "default" for name in _FIELDS}
        values = RunConfig().to_dict()

        if self.config_file is not None:
            for key, value in self._load_file(self.config_file).items():
                values[key] = coerce_value(key, value)
                self.sources[key] = "file"
        for key, value in self.get_env_overrides(environ).items():
            values[key] = value
            self.sources[key] = "env"
        for key, value in (overrides or {}).items():
            if value is None:
                continue
            values[key] = coerce_value(key, value)
            self.sources[key] = "cli"
        self.config = RunConfig(**values)

    @staticmethod
    def _load_file(path: Path) -> Dict[str, Any]:
        try:
            data = toml.load(path)
        except FileNotFoundError as e:
            raise ConfigError(f"config file not found: {path}") from e
        except toml.TomlDecodeError as e:
            raise ConfigError(f"{path}: invalid TOML ({e})") from e
        for key, value in data.items():
            if isinstance(value, dict):
                raise ConfigError(
                    f"{path}: section [{key}] not allowed in a flat config"
                )
            if key not in _FIELDS:
                raise ConfigError(f"{path}: unknown configuration key {key!r}")
        return data

    @staticmethod
    def get_env_overrides(environ: Mapping[str, str]) -> Dict[str, Any]:
        """Values from ``W2VJ_<KEY>`` variables (``W2VJ_CONFIG`` names the file)."""
        overrides: Dict[str, Any] = {}
        for name, raw in environ.items():
            if not name.startswith(ENV_PREFIX) or name == CONFIG_ENV:
                continue
            key = name[len(ENV_PREFIX) :].lower()
            if key not in _FIELDS:
                raise ConfigError(
                    f"environment variable {name} does not name a configuration key"
                )
            overrides[key] = coerce_value(key, raw)
        return overrides

    def get(self, key: str) -> Any:
        if key not in _FIELDS:
            raise ConfigError(f"unknown configuration key {key!r}")
        return getattr(self.config, key)

    def dump(self, path: Union[str, Path]) -> Path:
        """Write the resolved configuration as a flat TOML table."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8") as f:
            toml.dump(self.config.to_dict(), f)
        return path

    def show_config(self, console: Console) -> None:
        """Display the resolved configuration."""
        table = Table(title="[bold]📋 Run Configuration[/bold]")
        table.add_column("Key", style="cyan")
        table.add_column("Value", style="white")
        table.add_column("Source", style="dim")
        for key, value in self.config.to_dict().items():
            shown = repr(value) if isinstance(value, str) else str(value)
            table.add_row(key, shown, self.sources[key])
        console.print(table)
        if self.config_file is not None:
            console.print(f"[dim]Config file: {self.config_file}[/dim]")
