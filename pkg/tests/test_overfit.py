"""End-to-end overfit runs on the 20-utterance tone corpus."""

from dataclasses import replace
from typing import List, Optional

import numpy as np
import pytest

from w2vj.core.data import (
    BLANK,
    Vocabulary,
    generate_synthetic_corpus,
    load_corpus_features,
)
from w2vj.core.features import estimate_cmvn
from w2vj.core.finetune import EvalResult, FinetuneConfig, run_finetuning
from w2vj.core.model import ModelConfig
from w2vj.core.pretrain import PretrainConfig, run_pretraining

pytestmark = pytest.mark.slow

WINDOW = 10


def _first_perfect_step(evaluations: List[EvalResult]) -> Optional[int]:
    return next((e.step for e in evaluations if e.dev_cer == 0.0), None)


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    vocab = Vocabulary([BLANK] + list("abcdefgh"))
    out_dir = tmp_path_factory.mktemp("tones")
    _, entries = generate_synthetic_corpus(20, vocab, seed=7, out_dir=out_dir)
    features = load_corpus_features(entries, "fbank")
    cmvn = estimate_cmvn(features[e.utterance_id] for e in entries)
    return vocab, entries, cmvn


@pytest.fixture(scope="module")
def pretrained(corpus, tmp_path_factory):
    _, entries, cmvn = corpus
    return run_pretraining(
        entries,
        ModelConfig.preset("toy"),
        PretrainConfig.toy(),
        tmp_path_factory.mktemp("pt"),
        cmvn=cmvn,
    )


def _finetune(corpus, out_dir, pretrained_ckpt=None):
    vocab, entries, cmvn = corpus
    config = replace(FinetuneConfig.toy(max_steps=400), eval_every=25)
    return run_finetuning(
        entries,
        entries,
        vocab,
        config,
        out_dir,
        model_config=ModelConfig.preset("toy"),
        pretrained=pretrained_ckpt,
        cmvn=cmvn,
    )


@pytest.fixture(scope="module")
def scratch_run(corpus, tmp_path_factory):
    return _finetune(corpus, tmp_path_factory.mktemp("ft_scratch"))


@pytest.fixture(scope="module")
def pretrained_run(corpus, pretrained, tmp_path_factory):
    out_dir = tmp_path_factory.mktemp("ft_pretrained")
    return _finetune(corpus, out_dir, pretrained.checkpoint)


class TestPretrainingOverfit:
    def test_contrastive_loss_falls_by_thirty_percent(self, pretrained):
        losses = np.array([m.contrastive for m in pretrained.history])
        assert len(losses) == 200
        assert losses[-WINDOW:].mean() <= 0.7 * losses[:WINDOW].mean()


class TestFinetuningOverfit:
    def test_scratch_reaches_zero_training_cer(self, scratch_run):
        assert _first_perfect_step(scratch_run.evaluations) is not None

    def test_pretrained_reaches_zero_training_cer(self, pretrained_run):
        assert _first_perfect_step(pretrained_run.evaluations) is not None

    def test_pretrained_is_not_slower_than_scratch(self, scratch_run, pretrained_run):
        scratch = _first_perfect_step(scratch_run.evaluations)
        warm = _first_perfect_step(pretrained_run.evaluations)
        assert scratch is not None and warm is not None
        assert warm <= scratch

    @pytest.mark.parametrize("run", ["scratch_run", "pretrained_run"])
    def test_averaged_model_stays_near_the_best_checkpoint(self, run, request):
        result = request.getfixturevalue(run)
        best = min(e.dev_loss for e in result.evaluations)
        assert result.averaged_eval.dev_loss <= 1.2 * best
