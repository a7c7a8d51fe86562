"""
Convolutional frontends mapping model input to the latent sequence Z.

Two variants share one parameter naming scheme
(``frontend.layer{i}.*``, ``frontend.proj.*``):

* ``wav``: the seven-layer 1-D CNN over raw samples (total stride 320).
* ``fbank``: two stride-2 2-D convolutions over (time, mel) with padding 1,
  so the time axis shrinks by exactly ceil(T / 4).

Both return only the valid frames, so zero padding appended to the input
never changes the output.
"""

from dataclasses import dataclass
from typing import Dict, Optional, Tuple

import numpy as np

from ..utils.errors import ConfigError, FeatureError
from .autograd import (
    Tensor,
    conv1d,
    conv2d,
    gelu,
    layer_norm,
    linear,
    reshape,
    transpose,
    where,
)
from .init import fan_in_uniform, linear_params, norm_params
from .optim import ParameterSet

WAV_KERNELS = (10, 3, 3, 3, 3, 2, 2)
WAV_STRIDES = (5, 2, 2, 2, 2, 2, 2)
FRONTENDS = ("wav", "fbank")


@dataclass(frozen=True)
class ConvLayerSpec:
    channels: int
    kernel: int
    stride: int
    padding: int = 0


@dataclass(frozen=True)
class FrontendConfig:
    kind: str
    layers: Tuple[ConvLayerSpec, ...]
    output_dim: int = 768
    num_mel_bins: int = 80

    def __post_init__(self) -> None:
        if self.kind not in FRONTENDS:
            raise ConfigError(
                f"frontend kind must be one of {FRONTENDS}, got {self.kind!r}"
            )
        if self.kind == "wav":
            shape = tuple((s.kernel, s.stride) for s in self.layers)
            if shape != tuple(zip(WAV_KERNELS, WAV_STRIDES)):
                raise ConfigError(
                    "wav frontend needs 7 layers with kernels (10,3,3,3,3,2,2), "
                    "strides (5,2,2,2,2,2,2)"
                )
        else:
            shapes = {(s.kernel, s.stride, s.padding) for s in self.layers}
            if len(self.layers) != 2 or shapes != {(3, 2, 1)}:
                raise ConfigError(
                    "fbank frontend needs 2 layers of kernel 3, stride 2, padding 1"
                )

    @classmethod
    def wav(cls, output_dim: int = 768, channels: int = 512) -> "FrontendConfig":
        layers = tuple(
            ConvLayerSpec(channels, k, s) for k, s in zip(WAV_KERNELS, WAV_STRIDES)
        )
        return cls("wav", layers, output_dim)

    @classmethod
    def fbank(
        cls, output_dim: int = 768, channels: int = 32, num_mel_bins: int = 80
    ) -> "FrontendConfig":
        layers = (ConvLayerSpec(channels, 3, 2, 1), ConvLayerSpec(channels, 3, 2, 1))
        return cls("fbank", layers, output_dim, num_mel_bins)

    @property
    def receptive_field(self) -> int:
        """Smallest input length producing one output frame."""
        if self.kind == "fbank":
            return 1
        field = 1
        for spec in reversed(self.layers):
            field = (field - 1) * spec.stride + spec.kernel
        return field

    def freq_bins(self) -> Tuple[int, ...]:
        """Frequency extent after each fbank layer (80 -> 40 -> 20)."""
        bins = [self.num_mel_bins]
        for spec in self.layers:
            bins.append(_conv_length(bins[-1], spec))
        return tuple(bins[1:])

    @property
    def flattened_dim(self) -> int:
        if self.kind == "wav":
            return self.layers[-1].channels
        return self.layers[-1].channels * self.freq_bins()[-1]


@dataclass
class LatentSequence:
    """Frontend output: (T', D) states and the number of valid frames."""

    states: Tensor
    true_length: int

    def __len__(self) -> int:
        return self.true_length


def _conv_length(length: int, spec: ConvLayerSpec) -> int:
    return max((length + 2 * spec.padding - spec.kernel) // spec.stride + 1, 0)


def frontend_output_length(input_length: int, config: FrontendConfig) -> int:
    """Number of latent frames produced from ``input_length`` samples/frames."""
    if input_length <= 0:
        raise FeatureError(f"input length must be positive, got {input_length}")
    length = input_length
    for spec in config.layers:
        length = _conv_length(length, spec)
    return length


def init_frontend(
    config: FrontendConfig, rng: np.random.Generator, dtype: np.dtype = np.float32
) -> Dict[str, np.ndarray]:
    arrays: Dict[str, np.ndarray] = {}
    in_channels = 1
    bins = config.freq_bins() if config.kind == "fbank" else ()
    for i, spec in enumerate(config.layers):
        prefix = f"frontend.layer{i}"
        if config.kind == "wav":
            shape: Tuple[int, ...] = (spec.channels, in_channels, spec.kernel)
            norm_dim = spec.channels
        else:
            shape = (spec.channels, in_channels, spec.kernel, spec.kernel)
            norm_dim = spec.channels * bins[i]
        fan_in = int(np.prod(shape[1:]))
        arrays[f"{prefix}.weight"] = fan_in_uniform(rng, shape, fan_in, dtype)
        arrays[f"{prefix}.bias"] = fan_in_uniform(rng, (spec.channels,), fan_in, dtype)
        arrays.update(norm_params(f"{prefix}.norm", norm_dim, dtype))
        in_channels = spec.channels
    arrays.update(
        linear_params(
            rng, "frontend.proj", config.flattened_dim, config.output_dim, dtype
        )
    )
    return arrays


def _norm_gelu(x: Tensor, params: ParameterSet, prefix: str) -> Tensor:
    return gelu(
        layer_norm(x, params[f"{prefix}.norm.weight"], params[f"{prefix}.norm.bias"])
    )


def encode_wav(
    samples: np.ndarray,
    params: ParameterSet,
    config: FrontendConfig,
    length: Optional[int] = None,
) -> LatentSequence:
    """Raw waveform -> latent sequence via the 7-layer 1-D CNN."""
    samples = np.asarray(samples)
    length = samples.shape[0] if length is None else int(length)
    if length < config.receptive_field:
        raise FeatureError(
            f"waveform of {length} samples is shorter than "
            f"the receptive field {config.receptive_field}"
        )
    valid = frontend_output_length(length, config)
    dtype = params["frontend.proj.weight"].dtype
    x = Tensor(samples[:length].reshape(-1, 1).astype(dtype))
    for i, spec in enumerate(config.layers):
        prefix = f"frontend.layer{i}"
        weight, bias = params[f"{prefix}.weight"], params[f"{prefix}.bias"]
        x = _norm_gelu(conv1d(x, weight, bias, stride=spec.stride), params, prefix)
    z = linear(x, params["frontend.proj.weight"], params["frontend.proj.bias"])
    return LatentSequence(z[:valid], valid)


def encode_fbank(
    frames: np.ndarray,
    params: ParameterSet,
    config: FrontendConfig,
    length: Optional[int] = None,
) -> LatentSequence:
    """FBANK (T, 80) -> latent sequence (ceil(T/4), D) via two 2-D convolutions."""
    frames = np.asarray(frames)
    length = frames.shape[0] if length is None else int(length)
    if length < 4:
        raise FeatureError(f"fbank input needs at least 4 frames, got {length}")
    if frames.ndim != 2 or frames.shape[1] != config.num_mel_bins:
        raise FeatureError(
            f"expected (T, {config.num_mel_bins}) features, got {frames.shape}"
        )
    dtype = params["frontend.proj.weight"].dtype
    data = np.array(frames, dtype=dtype)
    data[length:] = 0.0
    x = reshape(Tensor(data), (1,) + data.shape)
    valid = length
    for i, spec in enumerate(config.layers):
        prefix = f"frontend.layer{i}"
        weight, bias = params[f"{prefix}.weight"], params[f"{prefix}.bias"]
        x = conv2d(x, weight, bias, stride=spec.stride, padding=spec.padding)
        channels, steps, bins = x.shape
        valid = _conv_length(valid, spec)
        h = reshape(transpose(x, (1, 0, 2)), (steps, channels * bins))
        h = _norm_gelu(h, params, prefix)
        h = where((np.arange(steps) < valid)[:, None], h, 0.0)
        x = transpose(reshape(h, (steps, channels, bins)), (1, 0, 2))
    channels, steps, bins = x.shape
    flat = reshape(transpose(x, (1, 0, 2)), (steps, channels * bins))
    z = linear(flat, params["frontend.proj.weight"], params["frontend.proj.bias"])
    return LatentSequence(z[:valid], valid)


def encode(
    inputs: np.ndarray,
    params: ParameterSet,
    config: FrontendConfig,
    length: Optional[int] = None,
) -> LatentSequence:
    """Dispatch on the frontend kind."""
    if config.kind == "wav":
        return encode_wav(inputs, params, config, length)
    return encode_fbank(inputs, params, config, length)
