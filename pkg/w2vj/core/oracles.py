"""
Built-in verification suite: finite-difference gradient checks over the
model's building blocks and the brute-force CTC equivalence grid.

Every fragment is FP64 and freezes its randomness (masks, negatives, Gumbel
noise) at construction, so repeated evaluations are bit-identical.
"""

from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from ..utils.errors import ConfigError
from ..utils.logging import get_logger
from .autograd import Tensor, linear, tanh, tsum
from .ctc import ctc_loss, ctc_loss_bruteforce, required_frames
from .encoder import conformer_block, encode, init_encoder, transformer_block
from .frontend import FrontendConfig, init_frontend
from .frontend import encode as encode_frontend
from .gradcheck import Fragment, GradCheckReport, gradient_check
from .init import linear_params
from .model import ModelConfig, init_ctc_head, init_pretraining_params
from .optim import ParameterSet
from .pretrain import contrastive_loss, sample_mask, sample_negatives
from .quantizer import (
    QuantizerConfig,
    diversity_loss,
    gumbel_noise,
    init_quantizer,
    quantize,
)

logger = get_logger(__name__)

DTYPE = np.float64
DEFAULT_TOLERANCE = 1e-4
NEGATIVE_CONTROL = "corrupted"


@dataclass
class FragmentCase:
    name: str
    fragment: Fragment
    params: ParameterSet
    tolerance: float = DEFAULT_TOLERANCE
    max_entries: Optional[int] = 24
    expect_pass: bool = True


def _readout(x: Tensor, rng: np.random.Generator) -> Tensor:
    """Scalar tanh readout with fixed random weights."""
    weights = Tensor(rng.standard_normal(x.shape))
    return tsum(tanh(x) * weights)


def _config(frontend: str = "fbank", encoder: str = "transformer") -> ModelConfig:
    return ModelConfig.preset(
        "gradcheck", frontend=frontend, encoder=encoder, dropout=0.0
    )


# ----------------------------------------------------------------------
# Fragments
# ----------------------------------------------------------------------


def linear_case(seed: int) -> FragmentCase:
    rng = np.random.default_rng(seed)
    params = ParameterSet(linear_params(rng, "linear", 4, 3, DTYPE))
    x = Tensor(rng.standard_normal((5, 4)))

    def fragment() -> Tensor:
        y = linear(x, params["linear.weight"], params["linear.bias"])
        return tsum(y * y)

    return FragmentCase("linear", fragment, params, tolerance=1e-6, max_entries=None)


def mlp_case(seed: int) -> FragmentCase:
    rng = np.random.default_rng(seed)
    arrays: Dict[str, np.ndarray] = {}
    for i, (n_in, n_out) in enumerate([(6, 8), (8, 8), (8, 3)]):
        arrays.update(linear_params(rng, f"mlp.layer{i}", n_in, n_out, DTYPE))
    params = ParameterSet(arrays)
    x = Tensor(rng.standard_normal((4, 6)))

    def fragment() -> Tensor:
        h = x
        for i in range(3):
            h = linear(h, params[f"mlp.layer{i}.weight"], params[f"mlp.layer{i}.bias"])
            if i < 2:
                h = tanh(h)
        return _readout(h, np.random.default_rng([seed, 7]))

    return FragmentCase("mlp", fragment, params, max_entries=None)


def frontend_case(kind: str, seed: int) -> FragmentCase:
    rng = np.random.default_rng(seed)
    config: FrontendConfig = _config(frontend=kind).frontend
    params = ParameterSet(init_frontend(config, rng, DTYPE))
    if kind == "wav":
        inputs = rng.standard_normal(config.receptive_field + 320) * 0.1
    else:
        inputs = rng.standard_normal((8, config.num_mel_bins))

    def fragment() -> Tensor:
        states = encode_frontend(inputs, params, config).states
        return _readout(states, np.random.default_rng([seed, 7]))

    return FragmentCase(f"{kind}_frontend", fragment, params)


def block_case(kind: str, seed: int) -> FragmentCase:
    rng = np.random.default_rng(seed)
    config = _config(encoder=kind).encoder
    params = ParameterSet(init_encoder(config, rng, DTYPE))
    h = Tensor(rng.standard_normal((6, config.dim)))

    def fragment() -> Tensor:
        if kind == "transformer":
            out = transformer_block(h, params, 0, config)
        else:
            out = conformer_block(h, params, 0, config)
        return _readout(out, np.random.default_rng([seed, 7]))

    return FragmentCase(f"{kind}_block", fragment, params)


def encoder_case(kind: str, seed: int) -> FragmentCase:
    """The whole block stack with a masked span and a padded tail."""
    rng = np.random.default_rng(seed)
    config = _config(encoder=kind).encoder
    params = ParameterSet(init_encoder(config, rng, DTYPE))
    z = Tensor(rng.standard_normal((7, config.dim)))
    masked = np.array([1, 2])

    def fragment() -> Tensor:
        context = encode(z, params, config, masked_positions=masked, length=6)
        return _readout(context.states[:6], np.random.default_rng([seed, 7]))

    return FragmentCase(f"{kind}_encoder", fragment, params, max_entries=12)


def quantizer_case(seed: int) -> FragmentCase:
    """Soft Gumbel quantization; the hard forward is piecewise constant."""
    rng = np.random.default_rng(seed)
    config = _config().quantizer
    params = ParameterSet(init_quantizer(config, rng, DTYPE))
    z = Tensor(rng.standard_normal((5, config.input_dim)))
    noise = gumbel_noise(5, config, np.random.default_rng([seed, 3]))

    def fragment() -> Tensor:
        quantized = quantize(
            z, params, config, temperature=1.5, mode="soft", noise=noise
        )
        return _readout(quantized.targets, np.random.default_rng([seed, 7]))

    return FragmentCase("quantizer", fragment, params)


def diversity_case(seed: int) -> FragmentCase:
    rng = np.random.default_rng(seed)
    config = QuantizerConfig(
        input_dim=6, groups=2, entries=4, entry_dim=3, output_dim=4
    )
    params = ParameterSet(init_quantizer(config, rng, DTYPE))
    z = Tensor(rng.standard_normal((5, config.input_dim)))

    def fragment() -> Tensor:
        quantized = quantize(z, params, config, temperature=1.0, mode="soft")
        return diversity_loss(quantized.probabilities)

    return FragmentCase("diversity", fragment, params)


def contrastive_case(seed: int) -> FragmentCase:
    rng = np.random.default_rng(seed)
    params = ParameterSet(
        {
            "context": rng.standard_normal((10, 6)),
            "targets": rng.standard_normal((10, 6)),
        }
    )
    mask = np.zeros(10, dtype=bool)
    mask[[1, 2, 3, 6, 7]] = True
    negative_rng = np.random.default_rng([seed, 5])
    negatives = sample_negatives(np.nonzero(mask)[0], 4, negative_rng)

    def fragment() -> Tensor:
        result = contrastive_loss(
            params["context"],
            params["targets"],
            mask,
            kappa=0.1,
            negatives=negatives,
        )
        return result.loss

    return FragmentCase("contrastive", fragment, params, max_entries=None)


def ctc_case(seed: int) -> FragmentCase:
    rng = np.random.default_rng(seed)
    params = ParameterSet({"logits": rng.standard_normal((7, 5))})
    target = [1, 3, 3, 2]

    def fragment() -> Tensor:
        return ctc_loss(params["logits"], target)

    return FragmentCase("ctc", fragment, params, max_entries=None)


def toy_model_case(seed: int) -> FragmentCase:
    """FBANK frontend, encoder and CTC head end to end."""
    config = _config()
    arrays = init_pretraining_params(config, seed, DTYPE).to_arrays()
    kept = ("frontend.", "encoder.")
    arrays = {k: v for k, v in arrays.items() if k.startswith(kept)}
    arrays.update(init_ctc_head(config, 4, seed, DTYPE))
    params = ParameterSet(arrays)
    frame_rng = np.random.default_rng([seed, 2])
    frames = frame_rng.standard_normal((24, config.frontend.num_mel_bins))
    target = [1, 2, 3]

    def fragment() -> Tensor:
        z = encode_frontend(frames, params, config.frontend).states
        context = encode(z, params, config.encoder)
        weight, bias = params["ctc_head.weight"], params["ctc_head.bias"]
        logits = linear(context.states, weight, bias)
        return ctc_loss(logits, target)

    return FragmentCase("toy_model", fragment, params, max_entries=8)


def pretrain_objective_case(seed: int) -> FragmentCase:
    """Contrastive + diversity through the whole pretraining graph, soft quantizer."""
    config = _config()
    params = init_pretraining_params(config, seed, DTYPE)
    frame_rng = np.random.default_rng([seed, 2])
    frames = frame_rng.standard_normal((40, config.frontend.num_mel_bins))
    steps = 10
    plan = sample_mask(steps, p_start=0.3, span=2, seed=[seed, 4])
    if plan.masked_count < 2:
        plan.mask[:2] = True
    negative_rng = np.random.default_rng([seed, 5])
    negatives = sample_negatives(np.nonzero(plan.mask)[0], 3, negative_rng)
    noise = gumbel_noise(steps, config.quantizer, np.random.default_rng([seed, 6]))

    def fragment() -> Tensor:
        z = encode_frontend(frames, params, config.frontend).states
        quantized = quantize(
            z, params, config.quantizer, temperature=2.0, mode="soft", noise=noise
        )
        context = encode(z, params, config.encoder, masked_positions=plan.mask)
        projected = linear(
            context.states,
            params["pretrain.final_proj.weight"],
            params["pretrain.final_proj.bias"],
        )
        loss = contrastive_loss(
            projected, quantized.targets, plan.mask, negatives=negatives
        ).loss
        return loss + 0.1 * diversity_loss(quantized.probabilities[plan.mask])

    return FragmentCase("pretrain_objective", fragment, params, max_entries=6)


def _corrupted_square(a: Tensor) -> Tensor:
    # backward drops the factor 2
    return Tensor.from_op(
        a.data * a.data, (a,), lambda g: (g * a.data,), "corrupted_square"
    )


def corrupted_case(seed: int) -> FragmentCase:
    rng = np.random.default_rng(seed)
    params = ParameterSet({"w": rng.standard_normal(4) + 2.0})

    def fragment() -> Tensor:
        return tsum(_corrupted_square(params["w"]))

    return FragmentCase(
        NEGATIVE_CONTROL, fragment, params, max_entries=None, expect_pass=False
    )


FRAGMENTS: Dict[str, Callable[[int], FragmentCase]] = {
    "linear": linear_case,
    "mlp": mlp_case,
    "fbank_frontend": lambda seed: frontend_case("fbank", seed),
    "wav_frontend": lambda seed: frontend_case("wav", seed),
    "transformer_block": lambda seed: block_case("transformer", seed),
    "conformer_block": lambda seed: block_case("conformer", seed),
    "transformer_encoder": lambda seed: encoder_case("transformer", seed),
    "conformer_encoder": lambda seed: encoder_case("conformer", seed),
    "quantizer": quantizer_case,
    "diversity": diversity_case,
    "contrastive": contrastive_case,
    "ctc": ctc_case,
    "toy_model": toy_model_case,
    "pretrain_objective": pretrain_objective_case,
    NEGATIVE_CONTROL: corrupted_case,
}


def build_fragment(name: str, seed: int = 0) -> FragmentCase:
    if name not in FRAGMENTS:
        raise ConfigError(f"unknown fragment {name!r}; choose from {sorted(FRAGMENTS)}")
    return FRAGMENTS[name](seed)


@dataclass
class SuiteResult:
    case: str
    seed: int
    report: GradCheckReport
    expect_pass: bool

    @property
    def ok(self) -> bool:
        return self.report.passed == self.expect_pass


def run_gradcheck_suite(
    names: Optional[Sequence[str]] = None,
    seeds: Sequence[int] = (0,),
    tolerance: Optional[float] = None,
) -> List[SuiteResult]:
    """Check every named fragment at every seed.

    The negative control is expected to fail.
    """
    results: List[SuiteResult] = []
    for name in names or list(FRAGMENTS):
        for seed in seeds:
            case = build_fragment(name, seed)
            report = gradient_check(
                case.fragment,
                case.params,
                tolerance=case.tolerance if tolerance is None else tolerance,
                max_entries=case.max_entries,
                seed=seed,
                name=case.name,
            )
            logger.debug(
                "%s seed %d: max rel error %.3g", name, seed, report.max_rel_error
            )
            results.append(
                SuiteResult(
                    case=name, seed=seed, report=report, expect_pass=case.expect_pass
                )
            )
    return results


# ----------------------------------------------------------------------
# CTC oracle grid
# ----------------------------------------------------------------------


@dataclass
class CtcOracleResult:
    trials: int
    compared: int
    max_abs_error: float

    def passed(self, tolerance: float = 1e-10) -> bool:
        return self.max_abs_error <= tolerance


def ctc_oracle_grid(
    trials: int = 200,
    seed: int = 0,
    frames: Sequence[int] = (1, 2, 3, 4, 5, 6),
    vocab_sizes: Sequence[int] = (2, 3, 4),
    target_lengths: Sequence[int] = (0, 1, 2, 3),
) -> CtcOracleResult:
    """Compare ``ctc_loss`` to path enumeration over the (T', V, |y|) grid.

    Trials cycle through the grid cells with fresh random logits and targets.
    Cells whose target cannot fit in T' frames are checked to be infinite
    under enumeration instead.
    """
    rng = np.random.default_rng(seed)
    grid: List[Tuple[int, int, int]] = [
        (t, v, n) for t in frames for v in vocab_sizes for n in target_lengths
    ]
    worst = 0.0
    compared = 0
    for trial in range(trials):
        t, v, n = grid[trial % len(grid)]
        logits = rng.standard_normal((t, v)) * 2.0
        target = rng.integers(1, v, size=n).tolist()
        expected = ctc_loss_bruteforce(logits, target)
        if required_frames(target) > t:
            if np.isfinite(expected):
                worst = float("inf")
            continue
        actual = ctc_loss(Tensor(logits), target).item()
        worst = max(worst, abs(actual - expected))
        compared += 1
    return CtcOracleResult(trials=trials, compared=compared, max_abs_error=worst)
