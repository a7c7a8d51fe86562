"""
CTC fine-tuning with pre-CNN (temporal/spectral) or post-CNN
(temporal/channel) masking.

Mask "probability" p with span length L means each index starts a span with
probability p / L, so p approximates the masked fraction before overlap.
Post-CNN masking freezes the frontend; pre-CNN masking trains everything.
"""

import json
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from ..utils.checkpoints import (
    CheckpointStore,
    average_checkpoints,
    load_checkpoint,
    retain_top_k,
    save_checkpoint,
)
from ..utils.errors import ConfigError, InadmissibleTargetError, ManifestError
from ..utils.logging import get_logger
from ..utils.metrics import MetricLog, finite_or_none
from .autograd import Tensor, detach, linear, reshape, where
from .ctc import ctc_loss, greedy_decode
from .data import (
    Batch,
    ManifestEntry,
    Vocabulary,
    budget_from_seconds,
    collate,
    load_corpus_features,
    make_batches,
    utterance_rng,
)
from .encoder import encode
from .features import CmvnStats
from .model import ModelConfig, SpeechModel
from .optim import AdamState, Schedule, TriStageSchedule, adam_step, clip_grad_norm
from .pretrain import MaskPlan, _entries, budget_unit, sample_spans
from .scoring import score_corpus

logger = get_logger(__name__)

MASK_POSITIONS = ("pre", "post")
RESOURCES = {"low": 1600, "high": 6400}
PROBABILITY_FIELDS = (
    "post_time_prob",
    "post_channel_prob",
    "pre_time_prob",
    "pre_freq_prob",
)
SPAN_FIELDS = ("post_time_span", "post_channel_span", "pre_time_span", "pre_freq_span")
TIME_STREAM, AXIS_STREAM, DROPOUT_STREAM = range(3)
FROZEN_PREFIX = "frontend."


@dataclass(frozen=True)
class FinetuneConfig:
    mask_position: str = "post"
    post_time_span: int = 10
    post_time_prob: float = 0.5
    post_channel_span: int = 64
    post_channel_prob: float = 0.1
    pre_time_span: int = 20
    pre_time_prob: float = 0.65
    pre_freq_span: int = 30
    pre_freq_prob: float = 0.1
    max_steps: int = 80_000
    peak_lr: float = 3e-5
    eval_every: int = 1600
    keep_top: int = 5
    batch_seconds: float = 200.0
    clip_norm: float = 0.0
    seed: int = 0

    def __post_init__(self) -> None:
        if self.mask_position not in MASK_POSITIONS:
            raise ConfigError(
                f"mask_position must be one of {MASK_POSITIONS}, "
                f"got {self.mask_position!r}"
            )
        for name in PROBABILITY_FIELDS:
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ConfigError(f"{name} must be in [0, 1], got {value}")
        for name in SPAN_FIELDS:
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.max_steps <= 0 or self.eval_every <= 0 or self.keep_top <= 0:
            raise ConfigError("max_steps, eval_every and keep_top must be positive")

    @classmethod
    def preset(
        cls, resource: str = "low", mask_position: str = "post", **overrides: object
    ) -> "FinetuneConfig":
        """``low`` evaluates every 1600 steps, ``high`` every 6400."""
        if resource not in RESOURCES:
            raise ConfigError(
                f"resource must be one of {tuple(RESOURCES)}, got {resource!r}"
            )
        base = cls(mask_position=mask_position, eval_every=RESOURCES[resource])
        return replace(base, **overrides)

    @classmethod
    def toy(
        cls, mask_position: str = "post", max_steps: int = 400, seed: int = 0
    ) -> "FinetuneConfig":
        return cls(
            mask_position=mask_position,
            post_channel_span=8,
            pre_freq_span=8,
            max_steps=max_steps,
            peak_lr=2e-3,
            eval_every=100,
            batch_seconds=6.0,
            seed=seed,
        )

    @property
    def freezes_frontend(self) -> bool:
        return self.mask_position == "post"

    def schedule(self) -> TriStageSchedule:
        return TriStageSchedule(self.peak_lr, self.max_steps)


# ----------------------------------------------------------------------
# Masking
# ----------------------------------------------------------------------


def apply_pre_cnn_masking(
    features: np.ndarray,
    config: FinetuneConfig,
    seed: Union[int, Sequence[int], np.random.Generator],
    min_time_spans: int = 0,
) -> Tuple[np.ndarray, MaskPlan, MaskPlan]:
    """Zero time spans and mel-bin spans of a CMVN-normalized (T, F) matrix."""
    features = np.asarray(features)
    rng = np.random.default_rng(seed)
    steps, bins = features.shape
    time_span, freq_span = config.pre_time_span, config.pre_freq_span
    time_plan = sample_spans(
        steps, config.pre_time_prob / time_span, time_span, rng, min_time_spans
    )
    freq_plan = sample_spans(bins, config.pre_freq_prob / freq_span, freq_span, rng)
    masked = features.copy()
    masked[time_plan.mask, :] = 0.0
    masked[:, freq_plan.mask] = 0.0
    return masked, time_plan, freq_plan


def apply_post_cnn_masking(
    z: Tensor,
    config: FinetuneConfig,
    mask_emb: Tensor,
    seed: Union[int, Sequence[int], np.random.Generator],
    min_time_spans: int = 0,
) -> Tuple[Tensor, MaskPlan, MaskPlan]:
    """Replace time spans by ``mask_emb``, then zero channel spans at every frame."""
    rng = np.random.default_rng(seed)
    steps, channels = z.shape
    time_span, channel_span = config.post_time_span, config.post_channel_span
    time_plan = sample_spans(
        steps, config.post_time_prob / time_span, time_span, rng, min_time_spans
    )
    channel_plan = sample_spans(
        channels, config.post_channel_prob / channel_span, channel_span, rng
    )
    masked = z
    if time_plan.mask.any():
        filler = reshape(mask_emb, (1, channels))
        masked = where(time_plan.mask[:, None], filler, masked)
    if channel_plan.mask.any():
        masked = where(channel_plan.mask[None, :], 0.0, masked)
    return masked, time_plan, channel_plan


# ----------------------------------------------------------------------
# Forward / step
# ----------------------------------------------------------------------


def ctc_logits(
    model: SpeechModel,
    features: np.ndarray,
    config: Optional[FinetuneConfig] = None,
    utterance_id: str = "",
    step: int = 0,
    train: bool = False,
) -> Tensor:
    """(T', V) CTC logits; masking and dropout only when ``train``."""
    params, mcfg = model.params, model.config
    seed = config.seed if config is not None else 0
    inputs = features
    if train and config is not None and config.mask_position == "pre":
        axis_rng = utterance_rng(seed, step, utterance_id, AXIS_STREAM)
        inputs, _, _ = apply_pre_cnn_masking(features, config, axis_rng)
    z = model.encode_latents(inputs).states
    if config is not None and config.freezes_frontend:
        z = detach(z)
    if train and config is not None and config.mask_position == "post":
        time_rng = utterance_rng(seed, step, utterance_id, TIME_STREAM)
        mask_emb = params["encoder.mask_emb"]
        z, _, _ = apply_post_cnn_masking(z, config, mask_emb, time_rng)
    dropout_rng: Optional[np.random.Generator] = None
    if train:
        dropout_rng = utterance_rng(seed, step, utterance_id, DROPOUT_STREAM)
    context = encode(z, params, mcfg.encoder, rng=dropout_rng)
    return linear(context.states, params["ctc_head.weight"], params["ctc_head.bias"])


@dataclass
class FinetuneMetrics:
    step: int
    loss: float
    lr: float
    utterances: int
    skipped: int
    wall_ms: float

    def to_record(self) -> Dict[str, float]:
        return asdict(self)


def _targets(batch: Batch, b: int, vocab: Vocabulary) -> List[int]:
    transcript = batch.transcripts[b]
    if transcript is None:
        raise ManifestError(f"{batch.ids[b]}: fine-tuning needs a transcript")
    return vocab.encode(transcript)


def finetune_step(
    model: SpeechModel,
    batch: Batch,
    vocab: Vocabulary,
    opt_state: AdamState,
    step: int,
    config: FinetuneConfig,
    schedule: Optional[Schedule] = None,
) -> FinetuneMetrics:
    """One Adam update on the mean per-utterance CTC loss.

    Utterances whose target cannot be aligned to their frames are skipped and
    counted. The frontend is excluded from the update under post-CNN masking.
    """
    started = time.perf_counter()
    losses: List[Tensor] = []
    skipped = 0
    for b in sorted(range(len(batch)), key=lambda i: batch.ids[i]):
        target = _targets(batch, b, vocab)
        logits = ctc_logits(
            model, batch.utterance(b), config, batch.ids[b], step, train=True
        )
        try:
            losses.append(ctc_loss(logits, target))
        except InadmissibleTargetError as e:
            logger.warning("step %d: skipping %s (%s)", step, batch.ids[b], e)
            skipped += 1
    lr = float((schedule or config.schedule())(step))
    if not losses:
        logger.warning("step %d: every utterance in the batch was skipped", step)
        return FinetuneMetrics(step + 1, float("nan"), lr, 0, skipped, 0.0)

    total = losses[0]
    for loss in losses[1:]:
        total = total + loss
    mean_loss = total * (1.0 / len(losses))
    model.params.zero_grad()
    mean_loss.backward()
    frozen = (FROZEN_PREFIX,) if config.freezes_frontend else ()
    if config.clip_norm > 0:
        clip_grad_norm(model.params, config.clip_norm)
    adam_step(model.params, opt_state, lr, frozen=frozen)
    return FinetuneMetrics(
        step=step + 1,
        loss=mean_loss.item(),
        lr=lr,
        utterances=len(losses),
        skipped=skipped,
        wall_ms=round((time.perf_counter() - started) * 1000.0, 3),
    )


# ----------------------------------------------------------------------
# Evaluation
# ----------------------------------------------------------------------


@dataclass
class EvalResult:
    step: int
    dev_loss: float
    dev_cer: float
    dev_wer: float
    hypotheses: Dict[str, str] = field(default_factory=dict, repr=False)

    def to_record(self) -> Dict[str, float]:
        return {
            "step": self.step,
            "dev_loss": self.dev_loss,
            "dev_cer": self.dev_cer,
            "dev_wer": self.dev_wer,
        }


def transcribe(model: SpeechModel, features: np.ndarray, vocab: Vocabulary) -> str:
    return vocab.decode(greedy_decode(ctc_logits(model, features)))


def evaluate(
    model: SpeechModel,
    entries: Sequence[ManifestEntry],
    features: Dict[str, np.ndarray],
    vocab: Vocabulary,
    step: int = 0,
) -> EvalResult:
    """Dev loss (mean CTC), pooled CER and WER with masking and dropout off."""
    losses: List[float] = []
    hypotheses: Dict[str, str] = {}
    pairs: List[Tuple[str, str]] = []
    for entry in entries:
        if entry.transcript is None:
            raise ManifestError(f"{entry.utterance_id}: evaluation needs a transcript")
        logits = ctc_logits(model, features[entry.utterance_id])
        try:
            losses.append(ctc_loss(logits, vocab.encode(entry.transcript)).item())
        except InadmissibleTargetError as e:
            logger.warning(
                "eval: %s excluded from dev loss (%s)", entry.utterance_id, e
            )
        hypothesis = vocab.decode(greedy_decode(logits))
        hypotheses[entry.utterance_id] = hypothesis
        pairs.append((entry.transcript, hypothesis))
    dev_loss = float(np.mean(losses)) if losses else float("inf")
    return EvalResult(
        step=step,
        dev_loss=dev_loss,
        dev_cer=score_corpus(pairs, "char").error_rate,
        dev_wer=score_corpus(pairs, "word").error_rate,
        hypotheses=hypotheses,
    )


def evaluation_steps(max_steps: int, eval_every: int) -> List[int]:
    """Multiples of ``eval_every`` up to ``max_steps``, plus ``max_steps`` itself."""
    steps = list(range(eval_every, max_steps + 1, eval_every))
    if not steps or steps[-1] != max_steps:
        steps.append(max_steps)
    return steps


# ----------------------------------------------------------------------
# Training run
# ----------------------------------------------------------------------


@dataclass
class FinetuneResult:
    averaged: Path
    report: Path
    evaluations: List[EvalResult]
    averaged_eval: EvalResult
    retained: List[Path]


def _fresh_store(directory: Path, k: int) -> CheckpointStore:
    store = CheckpointStore(directory, k=k)
    if store.entries:
        logger.warning(
            "discarding %d checkpoints left in %s by an earlier run",
            len(store.entries),
            directory,
        )
        for path in store.paths():
            path.unlink(missing_ok=True)
        store.entries = []
    return store


def _encoder_size(config: ModelConfig) -> Tuple[int, int, int, int]:
    enc = config.encoder
    return enc.dim, enc.blocks, enc.heads, enc.ffn_dim


def _check_compatible(stored: ModelConfig, requested: ModelConfig) -> None:
    """The pretrained model must match the run's frontend, encoder kind and size."""
    if stored.frontend.kind != requested.frontend.kind:
        raise ConfigError(
            f"pretrained model uses the {stored.frontend.kind} frontend, "
            f"run asks for {requested.frontend.kind}"
        )
    if stored.encoder.kind != requested.encoder.kind:
        raise ConfigError(
            f"pretrained model uses a {stored.encoder.kind} encoder, "
            f"run asks for {requested.encoder.kind}"
        )
    same_layers = stored.frontend.layers == requested.frontend.layers
    if _encoder_size(stored) != _encoder_size(requested) or not same_layers:
        raise ConfigError(
            "pretrained model size (dim, blocks, heads, ffn) "
            f"{_encoder_size(stored)} differs from the run's {_encoder_size(requested)}"
        )


def _load_pretrained(
    path: Union[str, Path], model_config: Optional[ModelConfig]
) -> Tuple[ModelConfig, Dict[str, np.ndarray]]:
    checkpoint = load_checkpoint(path)
    if "model" in checkpoint.meta:
        stored = ModelConfig.from_dict(checkpoint.meta["model"])
        if model_config is not None:
            _check_compatible(stored, model_config)
        model_config = stored
    if model_config is None:
        raise ConfigError(f"{path} carries no model configuration")
    return model_config, checkpoint.arrays


def run_finetuning(
    train_manifest: Union[str, Path, Sequence[ManifestEntry]],
    dev_manifest: Union[str, Path, Sequence[ManifestEntry]],
    vocab: Vocabulary,
    config: FinetuneConfig,
    out_dir: Union[str, Path],
    model_config: Optional[ModelConfig] = None,
    pretrained: Optional[Union[str, Path]] = None,
    cmvn: Optional[CmvnStats] = None,
    workers: int = 1,
    on_step: Optional[Callable[[FinetuneMetrics], None]] = None,
    on_eval: Optional[Callable[[EvalResult], None]] = None,
) -> FinetuneResult:
    """Train to ``max_steps``, evaluate on the dev set at each cadence boundary,
    keep the ``keep_top`` checkpoints with the lowest dev loss and average them.

    Without ``pretrained`` the model trains from scratch (baseline).
    """
    train_entries = _entries(train_manifest)
    dev_entries = _entries(dev_manifest)
    arrays = None
    if pretrained is not None:
        model_config, arrays = _load_pretrained(pretrained, model_config)
    if model_config is None:
        raise ConfigError(
            "a model configuration or a pretrained checkpoint is required"
        )
    if config.mask_position == "pre" and model_config.frontend.kind != "fbank":
        raise ConfigError("pre-CNN masking needs the fbank frontend")

    model = SpeechModel.for_finetuning(model_config, len(vocab), config.seed, arrays)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    unit = budget_unit(model_config)
    budget = budget_from_seconds(config.batch_seconds, unit)
    first_plan = make_batches(train_entries, budget, unit, config.seed, 0)
    batches_per_epoch = len(first_plan.batches)
    if batches_per_epoch == 0:
        raise ManifestError(
            f"every utterance exceeds the {config.batch_seconds}s batch budget"
        )

    frontend = model_config.frontend.kind
    train_features = load_corpus_features(train_entries, frontend, cmvn, workers)
    dev_features = load_corpus_features(dev_entries, frontend, cmvn, workers)
    extra_meta: Dict[str, Any] = {"cmvn": cmvn.to_dict()} if cmvn is not None else {}
    store = _fresh_store(out / "checkpoints", config.keep_top)
    log = MetricLog(out / "train.jsonl")
    log.reset()
    state = AdamState()
    schedule = config.schedule()
    eval_at = set(evaluation_steps(config.max_steps, config.eval_every))
    evaluations: List[EvalResult] = []
    plans: Dict[int, List[List[int]]] = {}

    for step in range(config.max_steps):
        epoch, index = divmod(step, batches_per_epoch)
        if epoch not in plans:
            plans.clear()
            epoch_plan = make_batches(train_entries, budget, unit, config.seed, epoch)
            plans[epoch] = epoch_plan.batches
        chosen = [train_entries[i] for i in plans[epoch][index]]
        batch = collate(
            [train_features[e.utterance_id] for e in chosen],
            [e.utterance_id for e in chosen],
            [e.transcript for e in chosen],
        )
        metrics = finetune_step(model, batch, vocab, state, step, config, schedule)
        log.append(metrics.to_record())
        if on_step is not None:
            on_step(metrics)
        if metrics.step in eval_at:
            result = evaluate(model, dev_entries, dev_features, vocab, metrics.step)
            evaluations.append(result)
            path = save_checkpoint(
                store.directory / f"step{metrics.step:08d}.ckpt",
                model.params,
                step=metrics.step,
                dev_metric=result.dev_loss,
                meta=model.metadata(
                    kind="finetune", seed=config.seed, vocab=vocab.tokens, **extra_meta
                ),
            )
            retain_top_k(store, path)
            logger.info(
                "step %d: dev loss %.4f, CER %.4f, WER %.4f",
                result.step,
                result.dev_loss,
                result.dev_cer,
                result.dev_wer,
            )
            if on_eval is not None:
                on_eval(result)

    averaged = average_checkpoints(store.paths())
    averaged_path = save_checkpoint(
        out / "averaged.ckpt", averaged.arrays, step=averaged.step, meta=averaged.meta
    )
    final_model = SpeechModel(model_config, averaged.to_parameters(), len(vocab))
    averaged_eval = evaluate(
        final_model, dev_entries, dev_features, vocab, averaged.step
    )
    report = out / "report.json"
    payload = {
        "evaluations": [e.to_record() for e in evaluations],
        "retained": [
            {"path": e.path, "step": e.step, "dev_loss": e.dev_metric}
            for e in store.entries
        ],
        "averaged_model": str(averaged_path),
        "averaged_dev_loss": averaged_eval.dev_loss,
        "averaged_dev_cer": averaged_eval.dev_cer,
        "averaged_dev_wer": averaged_eval.dev_wer,
    }
    text = json.dumps(finite_or_none(payload), indent=2, allow_nan=False)
    report.write_text(text + "\n", encoding="utf-8")
    return FinetuneResult(
        averaged=averaged_path,
        report=report,
        evaluations=evaluations,
        averaged_eval=averaged_eval,
        retained=store.paths(),
    )
