"""
Gumbel-softmax product quantization of latent frames.

Each frame is projected to G x V logits; per group one of V codebook entries
is selected (hard, straight-through) or mixed (soft). The selected entries are
concatenated and projected to the target dimension.
"""

from dataclasses import dataclass
from typing import Dict, Optional, Sequence

import numpy as np

from ..utils.errors import ConfigError, NumericsError
from .autograd import (
    Tensor,
    exp,
    linear,
    log,
    matmul,
    mean,
    reshape,
    softmax,
    straight_through,
    transpose,
    tsum,
    where,
)
from .init import linear_params
from .optim import ParameterSet

MODES = ("hard", "soft")


@dataclass(frozen=True)
class QuantizerConfig:
    input_dim: int = 768
    groups: int = 2
    entries: int = 320
    entry_dim: int = 128
    output_dim: int = 256
    start_temperature: float = 2.0
    temperature_decay: float = 0.999995
    min_temperature: float = 0.5

    def __post_init__(self) -> None:
        sizes = (self.groups, self.entries, self.entry_dim, self.output_dim)
        if min(sizes) <= 0 or self.input_dim <= 0:
            raise ConfigError("quantizer sizes must be positive")

    @property
    def num_codes(self) -> int:
        return self.groups * self.entries


@dataclass
class QuantizedSequence:
    targets: Tensor
    codes: np.ndarray
    probabilities: Tensor

    def __len__(self) -> int:
        return int(self.codes.shape[0])


def init_quantizer(
    config: QuantizerConfig, rng: np.random.Generator, dtype: np.dtype = np.float32
) -> Dict[str, np.ndarray]:
    arrays = linear_params(
        rng, "quantizer.logit_proj", config.input_dim, config.num_codes, dtype
    )
    book = rng.uniform(0.0, 1.0, (config.num_codes, config.entry_dim))
    arrays["quantizer.codebook.weight"] = book.astype(dtype)
    concat_dim = config.groups * config.entry_dim
    arrays.update(
        linear_params(rng, "quantizer.out_proj", concat_dim, config.output_dim, dtype)
    )
    return arrays


def anneal_temperature(step: int, config: Optional[QuantizerConfig] = None) -> float:
    """tau = max(2.0 * 0.999995^step, 0.5) with the default config."""
    if step < 0:
        raise ConfigError(f"negative step: {step}")
    config = config or QuantizerConfig()
    decayed = config.start_temperature * config.temperature_decay**step
    return max(decayed, config.min_temperature)


def gumbel_noise(
    frames: int, config: QuantizerConfig, rng: np.random.Generator
) -> np.ndarray:
    """Gumbel(0, 1) noise of shape (frames, G, V)."""
    return rng.gumbel(size=(frames, config.groups, config.entries))


def frame_gumbel_noise(
    frames: int, config: QuantizerConfig, key: Sequence[int]
) -> np.ndarray:
    """Gumbel(0, 1) noise of shape (frames, G, V); row t depends only on (key, t)."""
    shape = (config.groups, config.entries)
    rows = [np.random.default_rng([*key, t]).gumbel(size=shape) for t in range(frames)]
    return np.stack(rows) if rows else np.zeros((0,) + shape)


def code_logits(z: Tensor, params: ParameterSet, config: QuantizerConfig) -> Tensor:
    weight = params["quantizer.logit_proj.weight"]
    logits = linear(z, weight, params["quantizer.logit_proj.bias"])
    return reshape(logits, (z.shape[0], config.groups, config.entries))


def quantize(
    z: Tensor,
    params: ParameterSet,
    config: QuantizerConfig,
    temperature: float,
    mode: str = "hard",
    noise: Optional[np.ndarray] = None,
) -> QuantizedSequence:
    """Quantize latent frames ``z`` (T, D).

    ``noise`` is added to the logits before the tempered softmax; without it
    selection is the plain argmax. In hard mode the forward value is one-hot
    per group and the gradient is that of the soft distribution. Argmax ties
    go to the lower code index.
    """
    if temperature <= 0:
        raise ConfigError(f"temperature must be positive, got {temperature}")
    if mode not in MODES:
        raise ConfigError(f"mode must be one of {MODES}, got {mode!r}")
    steps = z.shape[0]
    logits = code_logits(z, params, config)
    perturbed = logits
    if noise is not None:
        perturbed = logits + Tensor(np.asarray(noise, dtype=logits.dtype))
    soft = softmax(perturbed * (1.0 / temperature), axis=-1)
    codes = np.argmax(soft.data, axis=-1)
    if mode == "hard":
        one_hot = np.zeros(soft.shape, dtype=soft.dtype)
        np.put_along_axis(one_hot, codes[..., None], 1.0, axis=-1)
        weights = straight_through(one_hot, soft)
    else:
        weights = soft

    book_shape = (config.groups, config.entries, config.entry_dim)
    book = reshape(params["quantizer.codebook.weight"], book_shape)
    picked = matmul(transpose(weights, (1, 0, 2)), book)
    flat = reshape(
        transpose(picked, (1, 0, 2)), (steps, config.groups * config.entry_dim)
    )
    weight = params["quantizer.out_proj.weight"]
    targets = linear(flat, weight, params["quantizer.out_proj.bias"])
    probabilities = softmax(logits, axis=-1)
    return QuantizedSequence(targets=targets, codes=codes, probabilities=probabilities)


def _group_entropy(probs: Tensor) -> Tensor:
    safe = where(probs.data > 0, probs, 1.0)
    return -tsum(probs * log(safe), axis=-1)


def diversity_loss(probabilities: Tensor, atol: float = 1e-6) -> Tensor:
    """(G*V - sum_g exp(H(mean_t p_tg))) / (G*V) over (T, G, V) distributions."""
    if probabilities.ndim != 3:
        raise NumericsError(
            f"expected (T, G, V) distributions, got {probabilities.dims}"
        )
    totals = probabilities.data.sum(axis=-1)
    if not np.allclose(totals, 1.0, atol=atol):
        raise NumericsError("code distributions must sum to 1 per group")
    _, groups, entries = probabilities.shape
    averaged = mean(probabilities, axis=0)
    perplexity = tsum(exp(_group_entropy(averaged)))
    return (float(groups * entries) - perplexity) * (1.0 / (groups * entries))


def code_perplexity(probabilities: Tensor) -> float:
    """Sum over groups of exp(entropy) of the frame-averaged distribution."""
    averaged = probabilities.data.mean(axis=0)
    logs = np.log(np.where(averaged > 0, averaged, 1.0))
    return float(np.exp(-(averaged * logs).sum(axis=-1)).sum())
