"""
Model composition: frontend + context encoder + quantizer + heads, all
sharing one ParameterSet.
"""

from dataclasses import asdict, dataclass, replace
from typing import Any, Dict, Mapping, Optional

import numpy as np

from ..utils.errors import ConfigError
from .encoder import EncoderConfig, init_encoder
from .frontend import (
    ConvLayerSpec,
    FrontendConfig,
    LatentSequence,
    encode,
    frontend_output_length,
    init_frontend,
)
from .init import linear_params
from .optim import ParameterSet
from .quantizer import QuantizerConfig, init_quantizer

MODEL_SIZES = ("toy", "base", "gradcheck")
PRETRAIN_PREFIXES = ("quantizer.", "pretrain.")


@dataclass(frozen=True)
class ModelConfig:
    frontend: FrontendConfig
    encoder: EncoderConfig
    quantizer: QuantizerConfig
    final_dim: int = 256

    def __post_init__(self) -> None:
        dim = self.encoder.dim
        if self.frontend.output_dim != dim:
            raise ConfigError(
                f"frontend output {self.frontend.output_dim} != encoder dim {dim}"
            )
        if self.quantizer.input_dim != dim:
            raise ConfigError(
                f"quantizer input {self.quantizer.input_dim} != encoder dim {dim}"
            )
        if self.quantizer.output_dim != self.final_dim:
            raise ConfigError(
                f"quantizer output {self.quantizer.output_dim} "
                f"!= final dim {self.final_dim}"
            )

    @classmethod
    def preset(
        cls,
        size: str = "toy",
        frontend: str = "fbank",
        encoder: str = "transformer",
        dropout: Optional[float] = None,
    ) -> "ModelConfig":
        """Named sizes (dim/blocks/heads/ffn).

        ``base`` is 768/12/12/3072, ``toy`` 64/2/4/128 and ``gradcheck`` 32/2/4/64.
        """
        if size == "base":
            dim, blocks, heads, ffn, kernel = 768, 12, 12, 3072, 31
            wav_channels, fbank_channels = 512, 32
            groups, entries, entry_dim, final_dim = 2, 320, 128, 256
            pos_kernel, pos_groups, drop = 128, 16, 0.1
        elif size == "toy":
            dim, blocks, heads, ffn, kernel = 64, 2, 4, 128, 7
            wav_channels, fbank_channels = 32, 8
            groups, entries, entry_dim, final_dim = 2, 16, 16, 32
            pos_kernel, pos_groups, drop = 16, 4, 0.0
        elif size == "gradcheck":
            dim, blocks, heads, ffn, kernel = 32, 2, 4, 64, 3
            wav_channels, fbank_channels = 4, 2
            groups, entries, entry_dim, final_dim = 2, 4, 4, 8
            pos_kernel, pos_groups, drop = 4, 4, 0.0
        else:
            raise ConfigError(f"model size must be one of {MODEL_SIZES}, got {size!r}")
        if frontend == "wav":
            front = FrontendConfig.wav(output_dim=dim, channels=wav_channels)
        elif frontend == "fbank":
            front = FrontendConfig.fbank(output_dim=dim, channels=fbank_channels)
        else:
            raise ConfigError(f"frontend must be 'wav' or 'fbank', got {frontend!r}")
        enc = EncoderConfig(
            kind=encoder,
            blocks=blocks,
            dim=dim,
            heads=heads,
            ffn_dim=ffn,
            conv_kernel=kernel,
            dropout=drop if dropout is None else dropout,
            pos_conv_kernel=pos_kernel,
            pos_conv_groups=pos_groups,
        )
        quant = QuantizerConfig(
            input_dim=dim,
            groups=groups,
            entries=entries,
            entry_dim=entry_dim,
            output_dim=final_dim,
        )
        return cls(front, enc, quant, final_dim)

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "ModelConfig":
        front = dict(data["frontend"])
        front["layers"] = tuple(ConvLayerSpec(**spec) for spec in front["layers"])
        return cls(
            frontend=FrontendConfig(**front),
            encoder=EncoderConfig(**data["encoder"]),
            quantizer=QuantizerConfig(**data["quantizer"]),
            final_dim=int(data["final_dim"]),
        )

    def without_dropout(self) -> "ModelConfig":
        return replace(self, encoder=replace(self.encoder, dropout=0.0))


def init_pretraining_params(
    config: ModelConfig, seed: int, dtype: np.dtype = np.float32
) -> ParameterSet:
    """Frontend, encoder, quantizer and the ``pretrain.final_proj`` head."""
    rng = np.random.default_rng(seed)
    arrays: Dict[str, np.ndarray] = {}
    arrays.update(init_frontend(config.frontend, rng, dtype))
    arrays.update(init_encoder(config.encoder, rng, dtype))
    arrays.update(init_quantizer(config.quantizer, rng, dtype))
    arrays.update(
        linear_params(
            rng, "pretrain.final_proj", config.encoder.dim, config.final_dim, dtype
        )
    )
    return ParameterSet(arrays)


def init_ctc_head(
    config: ModelConfig, vocab_size: int, seed: int, dtype: np.dtype = np.float32
) -> Dict[str, np.ndarray]:
    rng = np.random.default_rng([seed, vocab_size])
    return linear_params(rng, "ctc_head", config.encoder.dim, vocab_size, dtype)


class SpeechModel:
    """A model configuration bound to its parameters."""

    def __init__(
        self,
        config: ModelConfig,
        params: ParameterSet,
        vocab_size: Optional[int] = None,
    ) -> None:
        self.config = config
        self.params = params
        self.vocab_size = vocab_size

    @classmethod
    def for_pretraining(
        cls, config: ModelConfig, seed: int, dtype: np.dtype = np.float32
    ) -> "SpeechModel":
        return cls(config, init_pretraining_params(config, seed, dtype))

    @classmethod
    def for_finetuning(
        cls,
        config: ModelConfig,
        vocab_size: int,
        seed: int,
        pretrained: Optional[Mapping[str, np.ndarray]] = None,
        dtype: np.dtype = np.float32,
    ) -> "SpeechModel":
        """Frontend + encoder (from ``pretrained`` when given) and a fresh CTC head.

        Quantizer and pretraining head weights are discarded.
        """
        fresh = init_pretraining_params(config, seed, dtype).to_arrays()
        arrays = {
            name: array
            for name, array in fresh.items()
            if not name.startswith(PRETRAIN_PREFIXES)
        }
        if pretrained is not None:
            for name, array in pretrained.items():
                if name.startswith(PRETRAIN_PREFIXES) or name.startswith("ctc_head."):
                    continue
                if name not in arrays:
                    raise ConfigError(
                        f"pretrained parameter {name!r} does not fit the model"
                    )
                expected = arrays[name].shape
                if array.shape != expected:
                    raise ConfigError(
                        f"pretrained {name!r} has dims {array.shape}, "
                        f"expected {expected}"
                    )
                arrays[name] = np.asarray(array, dtype=arrays[name].dtype)
        arrays.update(init_ctc_head(config, vocab_size, seed, dtype))
        return cls(config, ParameterSet(arrays), vocab_size)

    def encode_latents(
        self, inputs: np.ndarray, length: Optional[int] = None
    ) -> LatentSequence:
        return encode(inputs, self.params, self.config.frontend, length)

    def output_length(self, input_length: int) -> int:
        return frontend_output_length(input_length, self.config.frontend)

    def metadata(self, **extra: Any) -> Dict[str, Any]:
        meta: Dict[str, Any] = {"model": self.config.to_dict()}
        if self.vocab_size is not None:
            meta["vocab_size"] = self.vocab_size
        meta.update(extra)
        return meta

    @classmethod
    def from_checkpoint_arrays(
        cls, arrays: Mapping[str, np.ndarray], meta: Mapping[str, Any]
    ) -> "SpeechModel":
        if "model" not in meta:
            raise ConfigError("checkpoint metadata has no model configuration")
        config = ModelConfig.from_dict(meta["model"])
        return cls(config, ParameterSet(dict(arrays)), meta.get("vocab_size"))
