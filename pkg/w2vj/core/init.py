"""Parameter initializers shared by the model components."""

import math
from typing import Dict, Sequence

import numpy as np


def fan_in_uniform(
    rng: np.random.Generator, shape: Sequence[int], fan_in: int, dtype: np.dtype
) -> np.ndarray:
    """U(-1/sqrt(fan_in), 1/sqrt(fan_in)), the torch default for linear/conv."""
    bound = 1.0 / math.sqrt(max(fan_in, 1))
    return rng.uniform(-bound, bound, size=tuple(shape)).astype(dtype)


def linear_params(
    rng: np.random.Generator,
    prefix: str,
    in_dim: int,
    out_dim: int,
    dtype: np.dtype,
    bias: bool = True,
) -> Dict[str, np.ndarray]:
    arrays = {f"{prefix}.weight": fan_in_uniform(rng, (out_dim, in_dim), in_dim, dtype)}
    if bias:
        arrays[f"{prefix}.bias"] = fan_in_uniform(rng, (out_dim,), in_dim, dtype)
    return arrays


def norm_params(prefix: str, dim: int, dtype: np.dtype) -> Dict[str, np.ndarray]:
    return {
        f"{prefix}.weight": np.ones(dim, dtype=dtype),
        f"{prefix}.bias": np.zeros(dim, dtype=dtype),
    }
