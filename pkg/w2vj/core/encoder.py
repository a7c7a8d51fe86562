"""
Context encoder: stacked Transformer or Conformer blocks over the latent
sequence.

Both block kinds are pre-norm. The Transformer stack adds a grouped
convolutional positional embedding before the first block; the Conformer
stack encodes position only through Transformer-XL style relative attention.
"""

import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from ..utils.errors import ConfigError, MaskError, ShapeError
from .autograd import (
    Tensor,
    conv1d,
    dropout,
    gelu,
    glu,
    layer_norm,
    linear,
    matmul,
    reshape,
    silu,
    softmax,
    transpose,
    where,
)
from .init import fan_in_uniform, linear_params, norm_params
from .optim import ParameterSet

ENCODERS = ("transformer", "conformer")


@dataclass(frozen=True)
class EncoderConfig:
    kind: str = "transformer"
    blocks: int = 12
    dim: int = 768
    heads: int = 12
    ffn_dim: int = 3072
    conv_kernel: int = 31
    dropout: float = 0.1
    pos_conv_kernel: int = 128
    pos_conv_groups: int = 16
    final_norm: bool = True

    def __post_init__(self) -> None:
        if self.kind not in ENCODERS:
            raise ConfigError(
                f"encoder kind must be one of {ENCODERS}, got {self.kind!r}"
            )
        if self.dim % self.heads:
            raise ConfigError(f"dim {self.dim} is not divisible by heads {self.heads}")
        if self.conv_kernel % 2 == 0:
            raise ConfigError(f"conv_kernel must be odd, got {self.conv_kernel}")
        if self.uses_pos_conv and self.dim % self.pos_conv_groups:
            raise ConfigError(
                f"dim {self.dim} is not divisible by "
                f"pos_conv_groups {self.pos_conv_groups}"
            )
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must be in [0, 1), got {self.dropout}")

    @property
    def head_dim(self) -> int:
        return self.dim // self.heads

    @property
    def uses_pos_conv(self) -> bool:
        return self.kind == "transformer" and self.pos_conv_kernel > 0


@dataclass
class HiddenSequence:
    """Block output with the padding mask it was computed under (True = pad)."""

    states: Tensor
    padding_mask: np.ndarray


@dataclass
class ContextSequence:
    states: Tensor
    length: int
    hidden: List[HiddenSequence] = field(default_factory=list)


# ----------------------------------------------------------------------
# Parameters
# ----------------------------------------------------------------------


def _ffn_params(
    rng: np.random.Generator, prefix: str, config: EncoderConfig, dtype: np.dtype
) -> Dict[str, np.ndarray]:
    dim, ffn_dim = config.dim, config.ffn_dim
    arrays = norm_params(f"{prefix}.norm", dim, dtype)
    arrays.update(linear_params(rng, f"{prefix}.fc1", dim, ffn_dim, dtype))
    arrays.update(linear_params(rng, f"{prefix}.fc2", ffn_dim, dim, dtype))
    return arrays


def _attn_params(
    rng: np.random.Generator, prefix: str, config: EncoderConfig, dtype: np.dtype
) -> Dict[str, np.ndarray]:
    dim = config.dim
    arrays = norm_params(f"{prefix}.norm", dim, dtype)
    for proj in ("q_proj", "k_proj", "v_proj", "out_proj"):
        arrays.update(linear_params(rng, f"{prefix}.{proj}", dim, dim, dtype))
    if config.kind == "conformer":
        pos_proj = linear_params(rng, f"{prefix}.pos_proj", dim, dim, dtype, bias=False)
        arrays.update(pos_proj)
        bound = 1.0 / math.sqrt(config.head_dim)
        for name in ("bias_u", "bias_v"):
            bias = rng.uniform(-bound, bound, (config.heads, config.head_dim))
            arrays[f"{prefix}.{name}"] = bias.astype(dtype)
    return arrays


def _conv_module_params(
    rng: np.random.Generator, prefix: str, config: EncoderConfig, dtype: np.dtype
) -> Dict[str, np.ndarray]:
    d, k = config.dim, config.conv_kernel
    arrays = norm_params(f"{prefix}.norm", d, dtype)
    arrays.update(linear_params(rng, f"{prefix}.pointwise1", d, 2 * d, dtype))
    arrays[f"{prefix}.depthwise.weight"] = fan_in_uniform(rng, (d, 1, k), k, dtype)
    arrays[f"{prefix}.depthwise.bias"] = fan_in_uniform(rng, (d,), k, dtype)
    arrays.update(norm_params(f"{prefix}.depthwise_norm", d, dtype))
    arrays.update(linear_params(rng, f"{prefix}.pointwise2", d, d, dtype))
    return arrays


def init_encoder(
    config: EncoderConfig, rng: np.random.Generator, dtype: np.dtype = np.float32
) -> Dict[str, np.ndarray]:
    arrays: Dict[str, np.ndarray] = {
        "encoder.mask_emb": rng.uniform(-0.1, 0.1, config.dim).astype(dtype),
    }
    if config.uses_pos_conv:
        per_group = config.dim // config.pos_conv_groups
        shape = (config.dim, per_group, config.pos_conv_kernel)
        fan_in = per_group * config.pos_conv_kernel
        arrays["encoder.pos_conv.weight"] = fan_in_uniform(rng, shape, fan_in, dtype)
        arrays["encoder.pos_conv.bias"] = np.zeros(config.dim, dtype=dtype)
    for index in range(config.blocks):
        prefix = f"encoder.block{index}"
        arrays.update(_attn_params(rng, f"{prefix}.attn", config, dtype))
        if config.kind == "transformer":
            arrays.update(_ffn_params(rng, f"{prefix}.ffn", config, dtype))
        else:
            arrays.update(_ffn_params(rng, f"{prefix}.ffn.pre", config, dtype))
            arrays.update(_conv_module_params(rng, f"{prefix}.conv", config, dtype))
            arrays.update(_ffn_params(rng, f"{prefix}.ffn.post", config, dtype))
            if config.final_norm:
                arrays.update(norm_params(f"{prefix}.norm", config.dim, dtype))
    if config.final_norm:
        arrays.update(norm_params("encoder.norm", config.dim, dtype))
    return arrays


# ----------------------------------------------------------------------
# Attention
# ----------------------------------------------------------------------


def _split_heads(x: Tensor, heads: int) -> Tensor:
    steps, dim = x.shape
    return transpose(reshape(x, (steps, heads, dim // heads)), (1, 0, 2))


def _merge_heads(x: Tensor) -> Tensor:
    heads, steps, head_dim = x.shape
    return reshape(transpose(x, (1, 0, 2)), (steps, heads * head_dim))


def _key_mask(steps: int, valid: Optional[np.ndarray]) -> Optional[np.ndarray]:
    return None if valid is None else np.asarray(valid, dtype=bool).reshape(1, 1, steps)


def sinusoidal_embedding(offsets: np.ndarray, dim: int) -> np.ndarray:
    """[sin(o * f_i), cos(o * f_i)] with f_i = 10000^(-2i/dim)."""
    freqs = np.exp(-math.log(10000.0) * np.arange(0, dim, 2, dtype=np.float64) / dim)
    angles = np.asarray(offsets, dtype=np.float64)[:, None] * freqs[None, :]
    return np.concatenate([np.sin(angles), np.cos(angles)], axis=1)[:, :dim]


def scaled_dot_product_attention(
    q: Tensor, k: Tensor, v: Tensor, key_valid: Optional[np.ndarray] = None
) -> Tuple[Tensor, Tensor]:
    """Per-head attention on (H, T, d_h) inputs; returns (output, weights)."""
    scores = matmul(q, transpose(k, (0, 2, 1))) * (1.0 / math.sqrt(q.shape[-1]))
    weights = softmax(scores, axis=-1, mask=_key_mask(q.shape[1], key_valid))
    return matmul(weights, v), weights


def relative_position_attention(
    q: Tensor,
    k: Tensor,
    v: Tensor,
    pos_proj: Tensor,
    bias_u: Tensor,
    bias_v: Tensor,
    positions: Optional[np.ndarray] = None,
    key_valid: Optional[np.ndarray] = None,
) -> Tuple[Tensor, Tensor]:
    """Transformer-XL scoring on (H, T, d_h) inputs.

    score[h, i, j] = (q_i + u_h) . k_j + (q_i + v_h) . W_r r(p_i - p_j),
    scaled by 1/sqrt(d_h). Only pairwise position differences enter, so
    shifting every position by a constant leaves the result unchanged.
    """
    heads, steps, head_dim = q.shape
    if k.shape != q.shape or v.shape != q.shape:
        raise ShapeError(f"attention inputs differ: {q.dims}, {k.dims}, {v.dims}")
    positions = np.arange(steps) if positions is None else np.asarray(positions)
    differences = positions[:, None] - positions[None, :]
    offsets, index = np.unique(differences, return_inverse=True)
    index = index.reshape(steps, steps)
    table = Tensor(sinusoidal_embedding(offsets, heads * head_dim).astype(q.dtype))
    r = _split_heads(linear(table, pos_proj), heads)

    per_head = (heads, 1, head_dim)
    content = matmul(q + reshape(bias_u, per_head), transpose(k, (0, 2, 1)))
    position_all = matmul(q + reshape(bias_v, per_head), transpose(r, (0, 2, 1)))
    position = position_all[(slice(None), np.arange(steps)[:, None], index)]
    scores = (content + position) * (1.0 / math.sqrt(head_dim))
    weights = softmax(scores, axis=-1, mask=_key_mask(steps, key_valid))
    return matmul(weights, v), weights


# ----------------------------------------------------------------------
# Blocks
# ----------------------------------------------------------------------


def _norm(x: Tensor, params: ParameterSet, prefix: str) -> Tensor:
    return layer_norm(x, params[f"{prefix}.weight"], params[f"{prefix}.bias"])


def _proj(x: Tensor, params: ParameterSet, prefix: str) -> Tensor:
    bias = params[f"{prefix}.bias"] if f"{prefix}.bias" in params else None
    return linear(x, params[f"{prefix}.weight"], bias)


def _feed_forward(
    h: Tensor,
    params: ParameterSet,
    prefix: str,
    config: EncoderConfig,
    rng: Optional[np.random.Generator],
) -> Tensor:
    activation = gelu if config.kind == "transformer" else silu
    x = activation(_proj(_norm(h, params, f"{prefix}.norm"), params, f"{prefix}.fc1"))
    x = dropout(x, config.dropout, rng)
    return dropout(_proj(x, params, f"{prefix}.fc2"), config.dropout, rng)


def _self_attention(
    h: Tensor,
    params: ParameterSet,
    prefix: str,
    config: EncoderConfig,
    key_valid: Optional[np.ndarray],
    positions: Optional[np.ndarray],
    rng: Optional[np.random.Generator],
) -> Tensor:
    x = _norm(h, params, f"{prefix}.norm")
    q, k, v = (
        _split_heads(_proj(x, params, f"{prefix}.{p}"), config.heads)
        for p in ("q_proj", "k_proj", "v_proj")
    )
    if config.kind == "conformer":
        out, _ = relative_position_attention(
            q,
            k,
            v,
            params[f"{prefix}.pos_proj.weight"],
            params[f"{prefix}.bias_u"],
            params[f"{prefix}.bias_v"],
            positions=positions,
            key_valid=key_valid,
        )
    else:
        out, _ = scaled_dot_product_attention(q, k, v, key_valid)
    merged = _proj(_merge_heads(out), params, f"{prefix}.out_proj")
    return dropout(merged, config.dropout, rng)


def _check_dims(h: Tensor, config: EncoderConfig) -> None:
    if h.ndim != 2 or h.shape[1] != config.dim:
        raise ShapeError(f"encoder block expects (T, {config.dim}) input, got {h.dims}")


def transformer_block(
    h: Tensor,
    params: ParameterSet,
    index: int,
    config: EncoderConfig,
    key_valid: Optional[np.ndarray] = None,
    rng: Optional[np.random.Generator] = None,
) -> Tensor:
    """h + SelfAttn(LN(h)), then + FFN(LN(.))."""
    _check_dims(h, config)
    prefix = f"encoder.block{index}"
    h = h + _self_attention(h, params, f"{prefix}.attn", config, key_valid, None, rng)
    return h + _feed_forward(h, params, f"{prefix}.ffn", config, rng)


def _conv_module(
    h: Tensor,
    params: ParameterSet,
    prefix: str,
    config: EncoderConfig,
    key_valid: Optional[np.ndarray],
    rng: Optional[np.random.Generator],
) -> Tensor:
    x = _proj(_norm(h, params, f"{prefix}.norm"), params, f"{prefix}.pointwise1")
    x = glu(x, axis=-1)
    if key_valid is not None:
        x = where(np.asarray(key_valid, dtype=bool)[:, None], x, 0.0)
    half = config.conv_kernel // 2
    x = conv1d(
        x,
        params[f"{prefix}.depthwise.weight"],
        params[f"{prefix}.depthwise.bias"],
        padding=half,
        groups=config.dim,
    )
    x = silu(_norm(x, params, f"{prefix}.depthwise_norm"))
    return dropout(_proj(x, params, f"{prefix}.pointwise2"), config.dropout, rng)


def conformer_block(
    h: Tensor,
    params: ParameterSet,
    index: int,
    config: EncoderConfig,
    key_valid: Optional[np.ndarray] = None,
    positions: Optional[np.ndarray] = None,
    rng: Optional[np.random.Generator] = None,
) -> Tensor:
    """Macaron block: ½FFN, relative self-attention, conv module, ½FFN, LN."""
    _check_dims(h, config)
    prefix = f"encoder.block{index}"
    h = h + 0.5 * _feed_forward(h, params, f"{prefix}.ffn.pre", config, rng)
    attn = _self_attention(
        h, params, f"{prefix}.attn", config, key_valid, positions, rng
    )
    h = h + attn
    h = h + _conv_module(h, params, f"{prefix}.conv", config, key_valid, rng)
    h = h + 0.5 * _feed_forward(h, params, f"{prefix}.ffn.post", config, rng)
    if config.final_norm:
        h = _norm(h, params, f"{prefix}.norm")
    return h


def positional_conv(
    h: Tensor,
    params: ParameterSet,
    config: EncoderConfig,
    key_valid: Optional[np.ndarray] = None,
) -> Tensor:
    """h + GELU(grouped conv(h)), trimming the extra frame of an even kernel."""
    x = h
    if key_valid is not None:
        x = where(np.asarray(key_valid, dtype=bool)[:, None], h, 0.0)
    kernel = config.pos_conv_kernel
    out = conv1d(
        x,
        params["encoder.pos_conv.weight"],
        params["encoder.pos_conv.bias"],
        padding=kernel // 2,
        groups=config.pos_conv_groups,
    )
    if kernel % 2 == 0:
        out = out[: h.shape[0]]
    return h + gelu(out)


# ----------------------------------------------------------------------
# Full stack
# ----------------------------------------------------------------------


def _mask_vector(
    masked_positions: Optional[np.ndarray], steps: int
) -> Optional[np.ndarray]:
    if masked_positions is None:
        return None
    positions = np.asarray(masked_positions)
    if positions.dtype == bool:
        if positions.shape != (steps,):
            raise MaskError(
                f"mask of shape {positions.shape} does not cover {steps} frames"
            )
        return positions
    if positions.size and (positions.min() < 0 or positions.max() >= steps):
        raise MaskError(f"masked positions out of range for {steps} frames")
    vector = np.zeros(steps, dtype=bool)
    vector[positions.astype(np.int64)] = True
    return vector


def substitute_mask(z: Tensor, mask: np.ndarray, params: ParameterSet) -> Tensor:
    """Replace the frames selected by ``mask`` with the learned mask embedding."""
    embedding = reshape(params["encoder.mask_emb"], (1, z.shape[1]))
    return where(np.asarray(mask, dtype=bool)[:, None], embedding, z)


def encode(
    z: Tensor,
    params: ParameterSet,
    config: EncoderConfig,
    masked_positions: Optional[np.ndarray] = None,
    length: Optional[int] = None,
    positions: Optional[np.ndarray] = None,
    rng: Optional[np.random.Generator] = None,
    return_hidden: bool = False,
) -> ContextSequence:
    """Run the block stack over ``z`` (T, D).

    ``masked_positions`` (bool vector or indices) are replaced by the mask
    embedding before the first block. Frames at or beyond ``length`` are
    treated as padding: they receive no attention weight and are zeroed
    before every convolution.
    """
    _check_dims(z, config)
    steps = z.shape[0]
    length = steps if length is None else int(length)
    key_valid = None if length >= steps else np.arange(steps) < length
    padding_mask = np.arange(steps) >= length

    mask = _mask_vector(masked_positions, steps)
    h = z if mask is None else substitute_mask(z, mask, params)
    if config.uses_pos_conv:
        h = positional_conv(h, params, config, key_valid)
    h = dropout(h, config.dropout, rng)

    hidden: List[HiddenSequence] = []
    for index in range(config.blocks):
        if config.kind == "transformer":
            h = transformer_block(h, params, index, config, key_valid, rng)
        else:
            h = conformer_block(h, params, index, config, key_valid, positions, rng)
        if return_hidden:
            hidden.append(HiddenSequence(h, padding_mask))
    if config.final_norm:
        h = _norm(h, params, "encoder.norm")
    return ContextSequence(states=h, length=length, hidden=hidden)
