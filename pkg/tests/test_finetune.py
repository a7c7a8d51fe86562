"""Tests for CTC fine-tuning: masking variants, the update step and the run."""

import json
import math
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

from w2vj.core.autograd import Tensor
from w2vj.core.data import Batch, collate, load_corpus_features
from w2vj.core.finetune import (
    FinetuneConfig,
    apply_post_cnn_masking,
    apply_pre_cnn_masking,
    ctc_logits,
    evaluate,
    evaluation_steps,
    finetune_step,
    run_finetuning,
    transcribe,
)
from w2vj.core.model import ModelConfig, SpeechModel
from w2vj.core.optim import AdamState
from w2vj.utils.checkpoints import load_checkpoint, save_checkpoint
from w2vj.utils.errors import ConfigError


def _z(steps: int = 40, channels: int = 64) -> Tensor:
    return Tensor(np.random.default_rng(0).standard_normal((steps, channels)) + 5.0)


ZEROS = Tensor(np.zeros(64))


class TestMasking:
    def test_zero_probabilities_are_identity(self):
        config = replace(
            FinetuneConfig.toy(), post_time_prob=0.0, post_channel_prob=0.0
        )
        z = _z()
        masked, time_plan, channel_plan = apply_post_cnn_masking(
            z, config, ZEROS, seed=0
        )
        np.testing.assert_array_equal(masked.data, z.data)
        assert time_plan.masked_count == channel_plan.masked_count == 0

        pre = replace(FinetuneConfig.toy("pre"), pre_time_prob=0.0, pre_freq_prob=0.0)
        feats = np.random.default_rng(1).standard_normal((30, 80))
        out, _, _ = apply_pre_cnn_masking(feats, pre, seed=0)
        np.testing.assert_array_equal(out, feats)

    def test_channel_masks_cover_every_frame(self):
        config = replace(
            FinetuneConfig.toy(), post_time_prob=0.0, post_channel_prob=1.0
        )
        z = _z()
        masked, _, plan = apply_post_cnn_masking(z, config, ZEROS, seed=3)
        assert plan.masked_count > 0
        np.testing.assert_array_equal(masked.data[:, plan.mask], 0.0)
        np.testing.assert_array_equal(masked.data[:, ~plan.mask], z.data[:, ~plan.mask])

    def test_time_masks_use_the_mask_embedding(self):
        config = replace(
            FinetuneConfig.toy(), post_time_prob=1.0, post_channel_prob=0.0
        )
        z = _z(200)
        emb = Tensor(np.arange(64.0))
        masked, plan, _ = apply_post_cnn_masking(z, config, emb, seed=2)
        assert plan.masked_count > 0
        assert np.all(masked.data[plan.mask] == emb.data)
        np.testing.assert_array_equal(masked.data[~plan.mask], z.data[~plan.mask])

    def test_pre_cnn_zeroes_time_and_frequency_spans(self):
        config = replace(
            FinetuneConfig.toy("pre"), pre_time_prob=1.0, pre_freq_prob=1.0
        )
        feats = np.random.default_rng(4).standard_normal((200, 80)) + 3.0
        out, time_plan, freq_plan = apply_pre_cnn_masking(feats, config, seed=5)
        assert time_plan.masked_count > 0 and freq_plan.masked_count > 0
        np.testing.assert_array_equal(out[time_plan.mask], 0.0)
        np.testing.assert_array_equal(out[:, freq_plan.mask], 0.0)
        keep = np.ix_(~time_plan.mask, ~freq_plan.mask)
        np.testing.assert_array_equal(out[keep], feats[keep])

    def test_masked_fraction_tracks_probability(self):
        config = replace(
            FinetuneConfig.toy(), post_time_prob=0.5, post_channel_prob=0.0
        )
        z = _z(20000, 2)
        _, plan, _ = apply_post_cnn_masking(z, config, Tensor(np.zeros(2)), seed=0)
        expected = 1.0 - (1.0 - 0.05) ** 10
        assert abs(plan.masked_count / 20000 - expected) < 0.03


class TestFinetuneConfig:
    def test_resource_presets(self):
        assert FinetuneConfig.preset("low").eval_every == 1600
        assert FinetuneConfig.preset("high", "pre").eval_every == 6400
        assert FinetuneConfig.preset("low").max_steps == 80_000

    def test_unknown_values(self):
        with pytest.raises(ConfigError):
            FinetuneConfig.preset("medium")
        with pytest.raises(ConfigError):
            FinetuneConfig(mask_position="mid")
        with pytest.raises(ConfigError):
            FinetuneConfig(post_time_prob=1.2)

    def test_evaluation_cadence(self):
        assert evaluation_steps(8000, 1600) == [1600, 3200, 4800, 6400, 8000]
        assert evaluation_steps(100, 30) == [30, 60, 90, 100]
        assert evaluation_steps(10, 50) == [10]

    def test_only_post_masking_freezes(self):
        assert FinetuneConfig(mask_position="post").freezes_frontend
        assert not FinetuneConfig(mask_position="pre").freezes_frontend


@pytest.fixture(scope="module")
def ctc_batch(synth_corpus) -> Batch:
    _, entries = synth_corpus
    chosen = entries[:3]
    feats = load_corpus_features(chosen, "fbank")
    return collate(
        [feats[e.utterance_id] for e in chosen],
        [e.utterance_id for e in chosen],
        [e.transcript for e in chosen],
    )


def _model(tone_vocab) -> SpeechModel:
    return SpeechModel.for_finetuning(
        ModelConfig.preset("toy"), len(tone_vocab), seed=0
    )


def _pretrain_checkpoint(config: ModelConfig, path) -> Path:
    pretrained = SpeechModel.for_pretraining(config, seed=0)
    meta = pretrained.metadata(kind="pretrain")
    return save_checkpoint(path, pretrained.params, meta=meta)


class TestFinetuneStep:
    def test_post_masking_leaves_frontend_bit_identical(self, ctc_batch, tone_vocab):
        model = _model(tone_vocab)
        before = model.params.to_arrays()
        config = FinetuneConfig.toy("post", max_steps=10)
        metrics = finetune_step(model, ctc_batch, tone_vocab, AdamState(), 3, config)
        assert metrics.utterances == 3 and metrics.skipped == 0
        assert math.isfinite(metrics.loss)
        for name, array in model.params.to_arrays().items():
            if name.startswith("frontend."):
                np.testing.assert_array_equal(array, before[name])
        head = model.params["ctc_head.weight"].data
        assert not np.array_equal(head, before["ctc_head.weight"])

    def test_pre_masking_trains_the_frontend(self, ctc_batch, tone_vocab):
        model = _model(tone_vocab)
        before = model.params["frontend.layer0.weight"].data.copy()
        config = FinetuneConfig.toy("pre", max_steps=10)
        finetune_step(model, ctc_batch, tone_vocab, AdamState(), 3, config)
        assert not np.array_equal(model.params["frontend.layer0.weight"].data, before)

    def test_inadmissible_targets_are_skipped(self, ctc_batch, tone_vocab, caplog):
        batch = Batch(
            ids=ctc_batch.ids,
            features=ctc_batch.features,
            lengths=ctc_batch.lengths,
            transcripts=["ab" * 20] + ctc_batch.transcripts[1:],
        )
        config = FinetuneConfig.toy(max_steps=10)
        model = _model(tone_vocab)
        metrics = finetune_step(model, batch, tone_vocab, AdamState(), 3, config)
        assert metrics.skipped == 1
        assert metrics.utterances == 2
        assert "skipping" in caplog.text

    def test_all_skipped_reports_nan_without_update(self, ctc_batch, tone_vocab):
        batch = Batch(
            ids=ctc_batch.ids,
            features=ctc_batch.features,
            lengths=ctc_batch.lengths,
            transcripts=["ab" * 20] * 3,
        )
        model = _model(tone_vocab)
        before = model.params.to_arrays()
        state = AdamState()
        config = FinetuneConfig.toy(max_steps=10)
        metrics = finetune_step(model, batch, tone_vocab, state, 3, config)
        assert math.isnan(metrics.loss)
        assert state.step == 0
        for name, array in model.params.to_arrays().items():
            np.testing.assert_array_equal(array, before[name])

    def test_inference_is_deterministic(self, ctc_batch, tone_vocab):
        model = _model(tone_vocab)
        feats = ctc_batch.utterance(0)
        a = ctc_logits(model, feats)
        b = ctc_logits(model, feats)
        np.testing.assert_array_equal(a.data, b.data)
        assert a.shape == (math.ceil(ctc_batch.lengths[0] / 4), len(tone_vocab))
        assert set(transcribe(model, feats, tone_vocab)) <= set(tone_vocab.symbols())

    def test_evaluate_reports_pooled_rates(self, synth_corpus, tone_vocab):
        _, entries = synth_corpus
        feats = load_corpus_features(entries[:4], "fbank")
        result = evaluate(_model(tone_vocab), entries[:4], feats, tone_vocab, step=7)
        assert result.step == 7
        assert math.isfinite(result.dev_loss)
        assert result.dev_cer >= 0.0 and result.dev_wer >= 0.0
        assert set(result.hypotheses) == {e.utterance_id for e in entries[:4]}


class TestRunFinetuning:
    def test_keeps_top_one_and_averages(self, synth_corpus, tone_vocab, tmp_path):
        manifest, entries = synth_corpus
        config = replace(
            FinetuneConfig.toy(max_steps=4), eval_every=2, keep_top=1, batch_seconds=1.0
        )
        evals = []
        result = run_finetuning(
            manifest,
            entries[:3],
            tone_vocab,
            config,
            tmp_path,
            model_config=ModelConfig.preset("toy"),
            on_eval=evals.append,
        )
        assert [e.step for e in result.evaluations] == [2, 4]
        assert len(evals) == 2
        assert len(result.retained) == 1
        kept = sorted(p.name for p in (tmp_path / "checkpoints").glob("*.ckpt"))
        assert kept == [result.retained[0].name]
        best = min(result.evaluations, key=lambda e: (e.dev_loss, e.step))
        assert load_checkpoint(result.retained[0]).step == best.step

        averaged = load_checkpoint(result.averaged)
        only = load_checkpoint(result.retained[0])
        for name in only.arrays:
            np.testing.assert_array_equal(averaged.arrays[name], only.arrays[name])
        assert averaged.meta["vocab"] == tone_vocab.tokens

        report = json.loads(result.report.read_text(encoding="utf-8"))
        assert len(report["evaluations"]) == 2
        averaged_loss = result.averaged_eval.dev_loss
        assert report["averaged_dev_loss"] == pytest.approx(averaged_loss)
        lines = (tmp_path / "train.jsonl").read_text(encoding="utf-8").splitlines()
        assert len(lines) == 4

    def test_pre_masking_needs_fbank(self, synth_corpus, tone_vocab, tmp_path):
        manifest, _ = synth_corpus
        with pytest.raises(ConfigError):
            run_finetuning(
                manifest,
                manifest,
                tone_vocab,
                FinetuneConfig.toy("pre"),
                tmp_path,
                model_config=ModelConfig.preset("toy", frontend="wav"),
            )

    def test_pretrained_frontend_must_match(self, synth_corpus, tone_vocab, tmp_path):
        manifest, _ = synth_corpus
        stored = ModelConfig.preset("toy", frontend="wav")
        path = _pretrain_checkpoint(stored, tmp_path / "pre.ckpt")
        with pytest.raises(ConfigError):
            run_finetuning(
                manifest,
                manifest,
                tone_vocab,
                FinetuneConfig.toy(),
                tmp_path / "ft",
                model_config=ModelConfig.preset("toy", frontend="fbank"),
                pretrained=path,
            )

    @pytest.mark.parametrize(
        "stored",
        [
            ModelConfig.preset("toy", encoder="conformer"),
            ModelConfig.preset("gradcheck"),
        ],
        ids=["encoder-kind", "encoder-size"],
    )
    def test_pretrained_encoder_must_match(
        self, stored, synth_corpus, tone_vocab, tmp_path
    ):
        manifest, _ = synth_corpus
        path = _pretrain_checkpoint(stored, tmp_path / "pre.ckpt")
        with pytest.raises(ConfigError):
            run_finetuning(
                manifest,
                manifest,
                tone_vocab,
                FinetuneConfig.toy(),
                tmp_path / "ft",
                model_config=ModelConfig.preset("toy"),
                pretrained=path,
            )

    def test_model_config_is_required(self, synth_corpus, tone_vocab, tmp_path):
        manifest, _ = synth_corpus
        with pytest.raises(ConfigError):
            run_finetuning(
                manifest, manifest, tone_vocab, FinetuneConfig.toy(), tmp_path
            )

    @pytest.mark.slow
    def test_training_lowers_dev_loss(self, synth_corpus, tone_vocab, tmp_path):
        _, entries = synth_corpus
        train = entries[:4]
        feats = load_corpus_features(train, "fbank")
        config = replace(
            FinetuneConfig.toy(max_steps=60), eval_every=30, batch_seconds=2.0
        )
        initial = evaluate(_model(tone_vocab), train, feats, tone_vocab)
        result = run_finetuning(
            train,
            train,
            tone_vocab,
            config,
            tmp_path,
            model_config=ModelConfig.preset("toy"),
        )
        assert result.evaluations[-1].dev_loss < initial.dev_loss
