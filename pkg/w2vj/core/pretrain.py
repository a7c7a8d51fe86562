"""
Self-supervised pretraining: span masking of the encoder input, contrastive
prediction of quantized targets against in-utterance distractors, and the
resumable training loop.

All randomness for an utterance at a step comes from
``utterance_rng(seed, step, utterance_id, stream)``, so results do not depend
on batch composition or order, and a resumed run replays exactly. Gumbel
noise is additionally keyed on the frame index.
"""

import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Union

import numpy as np

from ..utils.checkpoints import (
    load_checkpoint,
    load_optimizer_state,
    save_checkpoint,
    save_optimizer_state,
)
from ..utils.errors import ConfigError, ManifestError, MaskError, NonFiniteError
from ..utils.logging import get_logger
from ..utils.metrics import MetricLog
from .autograd import Tensor, concat, linear, log_softmax, sqrt, tsum, where
from .data import (
    Batch,
    ManifestEntry,
    budget_from_seconds,
    collate,
    load_corpus_features,
    load_manifest,
    make_batches,
    utterance_rng,
    utterance_seed,
)
from .encoder import encode
from .features import CmvnStats
from .model import ModelConfig, SpeechModel
from .optim import (
    AdamState,
    LinearWarmupDecaySchedule,
    Schedule,
    adam_step,
    clip_grad_norm,
)
from .quantizer import (
    anneal_temperature,
    code_perplexity,
    diversity_loss,
    frame_gumbel_noise,
    quantize,
)

logger = get_logger(__name__)

MASK_STREAM, NEGATIVE_STREAM, GUMBEL_STREAM, DROPOUT_STREAM = range(4)
SeedLike = Union[int, Sequence[int], np.random.Generator]


@dataclass(frozen=True)
class PretrainConfig:
    max_steps: int = 400_000
    peak_lr: float = 5e-4
    warmup_steps: int = 32_000
    batch_seconds: float = 87.5
    mask_prob: float = 0.065
    mask_span: int = 10
    num_negatives: int = 100
    kappa: float = 0.1
    diversity_weight: float = 0.1
    clip_norm: float = 0.0
    checkpoint_every: int = 1000
    seed: int = 0

    def __post_init__(self) -> None:
        if self.max_steps <= 0:
            raise ConfigError("max_steps must be positive")
        if not 0.0 <= self.mask_prob <= 1.0:
            raise ConfigError(f"mask_prob must be in [0, 1], got {self.mask_prob}")
        if self.mask_span <= 0 or self.num_negatives <= 0:
            raise ConfigError("mask_span and num_negatives must be positive")
        if self.kappa <= 0:
            raise ConfigError("kappa must be positive")
        if self.checkpoint_every <= 0:
            raise ConfigError("checkpoint_every must be positive")

    @classmethod
    def toy(cls, max_steps: int = 200, seed: int = 0) -> "PretrainConfig":
        return cls(
            max_steps=max_steps,
            peak_lr=2e-3,
            warmup_steps=max(1, max_steps // 10),
            batch_seconds=6.0,
            num_negatives=20,
            checkpoint_every=50,
            seed=seed,
        )

    def schedule(self) -> LinearWarmupDecaySchedule:
        warmup = min(self.warmup_steps, self.max_steps)
        return LinearWarmupDecaySchedule(self.peak_lr, self.max_steps, warmup)


# ----------------------------------------------------------------------
# Masking
# ----------------------------------------------------------------------


@dataclass
class MaskPlan:
    """Span starts and the resulting boolean mask over T' frames."""

    mask: np.ndarray
    starts: np.ndarray
    span: int

    @property
    def masked_count(self) -> int:
        return int(self.mask.sum())

    @property
    def indices(self) -> np.ndarray:
        return np.nonzero(self.mask)[0]


def sample_spans(
    length: int, start_prob: float, span: int, rng: SeedLike, min_spans: int = 0
) -> MaskPlan:
    """Each index starts a span with probability ``start_prob``; spans are cut at
    ``length`` and unioned.

    With ``min_spans`` > 0 and no sampled start, one span is forced at a position
    drawn from [0, max(length - span, 0)], so a span at least as long as the
    sequence covers all of it.
    """
    if length < 1:
        raise MaskError(f"cannot mask a sequence of length {length}")
    if not 0.0 <= start_prob <= 1.0:
        raise MaskError(f"start probability must be in [0, 1], got {start_prob}")
    if span < 1:
        raise MaskError(f"span must be positive, got {span}")
    rng = np.random.default_rng(rng)
    starts = np.nonzero(rng.random(length) < start_prob)[0]
    if starts.size < min_spans:
        highest = max(length - span, 0)
        forced = rng.integers(0, highest + 1, size=min_spans - starts.size)
        starts = np.unique(np.concatenate([starts, forced]))
    mask = np.zeros(length, dtype=bool)
    for start in starts:
        mask[start : start + span] = True
    return MaskPlan(mask=mask, starts=starts, span=span)


def sample_mask(
    length: int, p_start: float = 0.065, span: int = 10, seed: SeedLike = 0
) -> MaskPlan:
    """Pretraining mask: per-index start probability ``p_start``, at least one span."""
    return sample_spans(length, p_start, span, seed, min_spans=1)


# ----------------------------------------------------------------------
# Contrastive loss
# ----------------------------------------------------------------------


@dataclass
class ContrastiveLoss:
    loss: Tensor
    total: Tensor
    masked_count: int
    negatives: np.ndarray


def _norm(x: Tensor) -> Tensor:
    squares = tsum(x * x, axis=-1)
    return sqrt(where(squares.data > 1e-16, squares, 1e-16))


def sample_negatives(
    masked: np.ndarray, num_negatives: int, rng: SeedLike
) -> np.ndarray:
    """(M, K) frame indices drawn with replacement from the other masked frames."""
    count = masked.size
    rng = np.random.default_rng(rng)
    draws = rng.integers(0, count - 1, size=(count, num_negatives))
    draws = draws + (draws >= np.arange(count)[:, None])
    return masked[draws]


def contrastive_loss(
    context: Tensor,
    targets: Tensor,
    mask: np.ndarray,
    num_negatives: int = 100,
    kappa: float = 0.1,
    seed: SeedLike = 0,
    negatives: Optional[np.ndarray] = None,
) -> ContrastiveLoss:
    """Mean over masked t of -log softmax_t(cos(c_t, q) / kappa) at the true q_t.

    Candidates for frame t are q_t followed by K distractors taken from the
    other masked frames of the same utterance. ``negatives`` (M, K) overrides
    the sampled distractor indices.
    """
    masked = np.nonzero(np.asarray(mask, dtype=bool))[0]
    if masked.size < 2:
        raise MaskError(
            f"contrastive loss needs at least 2 masked frames, got {masked.size}"
        )
    if negatives is None:
        negatives = sample_negatives(masked, num_negatives, seed)
    candidates = np.concatenate([masked[:, None], negatives], axis=1)

    c = context[masked]
    q = targets[candidates]
    dots = tsum(q * c.reshape(masked.size, 1, c.shape[-1]), axis=-1)
    norms = _norm(q) * _norm(c).reshape(masked.size, 1)
    logits = dots / norms * (1.0 / kappa)
    per_frame = -log_softmax(logits, axis=-1)[:, 0]
    total = tsum(per_frame)
    return ContrastiveLoss(
        loss=total * (1.0 / masked.size),
        total=total,
        masked_count=int(masked.size),
        negatives=negatives,
    )


# ----------------------------------------------------------------------
# One step
# ----------------------------------------------------------------------


@dataclass
class UtteranceOutput:
    contrastive: ContrastiveLoss
    probabilities: Tensor
    plan: MaskPlan


@dataclass
class StepMetrics:
    step: int
    loss: float
    contrastive: float
    diversity: float
    perplexity: float
    lr: float
    wall_ms: float
    skipped: List[str] = field(default_factory=list)

    def to_record(self) -> Dict[str, float]:
        return {
            "step": self.step,
            "loss": self.loss,
            "contrastive": self.contrastive,
            "diversity": self.diversity,
            "perplexity": self.perplexity,
            "lr": self.lr,
            "wall_ms": self.wall_ms,
        }


def pretrain_forward(
    model: SpeechModel,
    features: np.ndarray,
    utterance_id: str,
    step: int,
    config: PretrainConfig,
    train: bool = True,
) -> UtteranceOutput:
    """Frontend, mask, quantize the unmasked latents, encode, score."""
    params, mcfg = model.params, model.config
    z = model.encode_latents(features).states
    frames = z.shape[0]
    mask_rng = utterance_rng(config.seed, step, utterance_id, MASK_STREAM)
    plan = sample_mask(frames, config.mask_prob, config.mask_span, mask_rng)

    gumbel_key = utterance_seed(config.seed, step, utterance_id) + [GUMBEL_STREAM]
    noise = frame_gumbel_noise(frames, mcfg.quantizer, gumbel_key)
    tau = anneal_temperature(step, mcfg.quantizer)
    quantized = quantize(z, params, mcfg.quantizer, tau, "hard", noise)

    dropout_rng: Optional[np.random.Generator] = None
    if train:
        dropout_rng = utterance_rng(config.seed, step, utterance_id, DROPOUT_STREAM)
    context = encode(
        z, params, mcfg.encoder, masked_positions=plan.mask, rng=dropout_rng
    )
    projected = linear(
        context.states,
        params["pretrain.final_proj.weight"],
        params["pretrain.final_proj.bias"],
    )
    result = contrastive_loss(
        projected,
        quantized.targets,
        plan.mask,
        config.num_negatives,
        config.kappa,
        utterance_rng(config.seed, step, utterance_id, NEGATIVE_STREAM),
    )
    return UtteranceOutput(result, quantized.probabilities[plan.mask], plan)


def pretrain_step(
    model: SpeechModel,
    batch: Batch,
    opt_state: AdamState,
    step: int,
    config: PretrainConfig,
    schedule: Optional[Schedule] = None,
) -> StepMetrics:
    """One Adam update on contrastive + alpha * diversity over ``batch``.

    Utterances with fewer than 2 masked frames are skipped with a warning.
    The returned metrics are labelled with the post-update step count.
    """
    started = time.perf_counter()
    outputs: List[UtteranceOutput] = []
    skipped: List[str] = []
    for b in sorted(range(len(batch)), key=lambda i: batch.ids[i]):
        utt_id = batch.ids[b]
        try:
            output = pretrain_forward(model, batch.utterance(b), utt_id, step, config)
            outputs.append(output)
        except MaskError as e:
            logger.warning("step %d: skipping %s (%s)", step, utt_id, e)
            skipped.append(utt_id)
    if not outputs:
        raise MaskError(f"step {step}: no utterance in the batch can be scored")

    masked = sum(o.contrastive.masked_count for o in outputs)
    total = outputs[0].contrastive.total
    for output in outputs[1:]:
        total = total + output.contrastive.total
    contrastive = total * (1.0 / masked)
    probabilities = concat([o.probabilities for o in outputs], axis=0)
    diversity = diversity_loss(probabilities)
    loss = contrastive + config.diversity_weight * diversity

    lr = float((schedule or config.schedule())(step))
    model.params.zero_grad()
    loss.backward()
    if config.clip_norm > 0:
        clip_grad_norm(model.params, config.clip_norm)
    adam_step(model.params, opt_state, lr)
    return StepMetrics(
        step=step + 1,
        loss=loss.item(),
        contrastive=contrastive.item(),
        diversity=diversity.item(),
        perplexity=code_perplexity(probabilities),
        lr=lr,
        wall_ms=round((time.perf_counter() - started) * 1000.0, 3),
        skipped=skipped,
    )


# ----------------------------------------------------------------------
# Training run
# ----------------------------------------------------------------------


@dataclass
class PretrainResult:
    checkpoint: Path
    metrics_path: Path
    steps: int
    history: List[StepMetrics]


def budget_unit(model_config: ModelConfig) -> str:
    return "samples" if model_config.frontend.kind == "wav" else "frames"


def _entries(
    manifest: Union[str, Path, Sequence[ManifestEntry]],
) -> List[ManifestEntry]:
    if isinstance(manifest, (str, Path)):
        entries = load_manifest(manifest)
    else:
        entries = list(manifest)
    if not entries:
        raise ManifestError("manifest is empty")
    return entries


def _dump_diagnostics(
    out_dir: Path,
    step: int,
    batch: Batch,
    lr: float,
    model: SpeechModel,
    error: Exception,
) -> Path:
    norms = {}
    for name, tensor in model.params.items():
        value = float(np.linalg.norm(tensor.data.astype(np.float64)))
        norms[name] = value if math.isfinite(value) else str(value)
    path = out_dir / f"diagnostic_step{step}.json"
    payload = {
        "step": step,
        "error": str(error),
        "utterances": batch.ids,
        "lr": lr,
        "param_norms": norms,
    }
    path.write_text(json.dumps(payload, indent=2) + "\n", encoding="utf-8")
    return path


def run_pretraining(
    manifest: Union[str, Path, Sequence[ManifestEntry]],
    model_config: ModelConfig,
    config: PretrainConfig,
    out_dir: Union[str, Path],
    cmvn: Optional[CmvnStats] = None,
    workers: int = 1,
    resume: bool = True,
    stop_at: Optional[int] = None,
    on_step: Optional[Callable[[StepMetrics], None]] = None,
) -> PretrainResult:
    """Pretrain for ``config.max_steps`` updates, checkpointing to ``out_dir``.

    ``last.ckpt``/``last.opt`` are rewritten every ``checkpoint_every`` steps;
    an existing pair is resumed from when ``resume`` is set, truncating
    ``metrics.jsonl`` to the resumed step. ``stop_at`` ends the run early
    (after checkpointing) to simulate an interruption.
    """
    entries = _entries(manifest)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    unit = budget_unit(model_config)
    budget = budget_from_seconds(config.batch_seconds, unit)
    batches_per_epoch = len(make_batches(entries, budget, unit, config.seed, 0).batches)
    if batches_per_epoch == 0:
        raise ManifestError(
            f"every utterance exceeds the {config.batch_seconds}s batch budget"
        )

    features = load_corpus_features(entries, model_config.frontend.kind, cmvn, workers)
    model = SpeechModel.for_pretraining(model_config, config.seed)
    state = AdamState()
    log = MetricLog(out / "metrics.jsonl")
    last_ckpt, last_opt = out / "last.ckpt", out / "last.opt"
    start = 0
    if resume and last_ckpt.exists() and last_opt.exists():
        checkpoint = load_checkpoint(last_ckpt)
        model.params.load_arrays(checkpoint.arrays)
        state = load_optimizer_state(last_opt)
        start = checkpoint.step
        log.truncate_after(start)
        logger.info("resuming pretraining from step %d", start)
    else:
        log.reset()

    end = config.max_steps if stop_at is None else min(stop_at, config.max_steps)
    schedule = config.schedule()
    plans: Dict[int, List[List[int]]] = {}
    history: List[StepMetrics] = []
    for step in range(start, end):
        epoch, index = divmod(step, batches_per_epoch)
        if epoch not in plans:
            plans.clear()
            epoch_plan = make_batches(entries, budget, unit, config.seed, epoch)
            plans[epoch] = epoch_plan.batches
        ids = [entries[i].utterance_id for i in plans[epoch][index]]
        batch = collate([features[uid] for uid in ids], ids)
        try:
            metrics = pretrain_step(model, batch, state, step, config, schedule)
        except NonFiniteError as e:
            dump = _dump_diagnostics(out, step, batch, schedule(step), model, e)
            logger.error(
                "non-finite values at step %d; diagnostics written to %s", step, dump
            )
            raise
        log.append(metrics.to_record())
        history.append(metrics)
        if on_step is not None:
            on_step(metrics)
        if metrics.step % config.checkpoint_every == 0 or metrics.step == end:
            meta = model.metadata(kind="pretrain", seed=config.seed)
            save_checkpoint(last_ckpt, model.params, step=metrics.step, meta=meta)
            save_optimizer_state(last_opt, state)

    final = last_ckpt
    if end == config.max_steps:
        meta = model.metadata(kind="pretrain", seed=config.seed)
        final = save_checkpoint(out / "final.ckpt", model.params, step=end, meta=meta)
    return PretrainResult(
        checkpoint=final, metrics_path=log.path, steps=end, history=history
    )
