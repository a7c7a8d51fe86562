"""Tests for Gumbel product quantization and the diversity penalty."""

import numpy as np
import pytest

from w2vj.core.autograd import Tensor, tsum
from w2vj.core.model import ModelConfig, SpeechModel
from w2vj.core.optim import ParameterSet
from w2vj.core.quantizer import (
    QuantizerConfig,
    anneal_temperature,
    code_perplexity,
    diversity_loss,
    frame_gumbel_noise,
    gumbel_noise,
    quantize,
)
from w2vj.utils.errors import ConfigError, NumericsError


@pytest.fixture(scope="module")
def model() -> SpeechModel:
    return SpeechModel.for_pretraining(ModelConfig.preset("toy"), seed=0)


def _z(steps: int = 6) -> Tensor:
    frames = np.random.default_rng(5).standard_normal((steps, 64))
    return Tensor(frames.astype(np.float32))


class TestQuantize:
    def test_hard_selection_is_one_code_per_group(self, model):
        config = model.config.quantizer
        noise = gumbel_noise(6, config, np.random.default_rng(0))
        out = quantize(_z(), model.params, config, temperature=2.0, noise=noise)
        assert out.targets.shape == (6, config.output_dim)
        assert out.codes.shape == (6, config.groups)
        assert np.all((out.codes >= 0) & (out.codes < config.entries))
        np.testing.assert_allclose(out.probabilities.data.sum(axis=-1), 1.0, rtol=1e-5)

    def test_hard_targets_equal_projected_codewords(self, model):
        config = model.config.quantizer
        out = quantize(_z(), model.params, config, temperature=1.0)
        book = model.params["quantizer.codebook.weight"].data
        book = book.reshape(config.groups, config.entries, -1)
        groups = range(config.groups)
        picked = np.concatenate([book[g, out.codes[:, g]] for g in groups], axis=1)
        w = model.params["quantizer.out_proj.weight"].data
        b = model.params["quantizer.out_proj.bias"].data
        expected = picked @ w.T + b
        np.testing.assert_allclose(out.targets.data, expected, rtol=1e-5, atol=1e-5)

    def test_without_noise_selection_is_argmax(self, model):
        config = model.config.quantizer
        out = quantize(_z(), model.params, config, temperature=0.7)
        best = np.argmax(out.probabilities.data, axis=-1)
        np.testing.assert_array_equal(out.codes, best)

    def test_hard_mode_passes_gradients_to_logits(self, model):
        config = model.config.quantizer
        model.params.zero_grad()
        noise = gumbel_noise(6, config, np.random.default_rng(1))
        out = quantize(_z(), model.params, config, temperature=2.0, noise=noise)
        tsum(out.targets * out.targets).backward()
        assert np.any(model.params.grad("quantizer.logit_proj.weight") != 0.0)
        model.params.zero_grad()

    def test_straight_through_gradient_is_the_soft_gradient(self, rng):
        """Hard and soft modes share logit gradients under a linear readout."""
        config = QuantizerConfig(
            input_dim=6, groups=2, entries=3, entry_dim=2, output_dim=4
        )
        arrays = {
            "quantizer.logit_proj.weight": rng.standard_normal((6, 6)),
            "quantizer.logit_proj.bias": rng.standard_normal(6),
            "quantizer.codebook.weight": rng.standard_normal((6, 2)),
            "quantizer.out_proj.weight": rng.standard_normal((4, 4)),
            "quantizer.out_proj.bias": rng.standard_normal(4),
        }
        z = Tensor(rng.standard_normal((5, 6)))
        readout = Tensor(rng.standard_normal((5, 4)))
        noise = gumbel_noise(5, config, rng)
        grads = {}
        for mode in ("hard", "soft"):
            params = ParameterSet(arrays)
            out = quantize(z, params, config, temperature=1.3, mode=mode, noise=noise)
            tsum(out.targets * readout).backward()
            grads[mode] = params.grad("quantizer.logit_proj.weight")
        np.testing.assert_allclose(grads["hard"], grads["soft"], atol=1e-12)

    def test_uniform_logits_use_every_code_equally(self):
        config = QuantizerConfig(
            input_dim=2, groups=1, entries=4, entry_dim=2, output_dim=2
        )
        params = ParameterSet(
            {
                "quantizer.logit_proj.weight": np.zeros((4, 2)),
                "quantizer.logit_proj.bias": np.zeros(4),
                "quantizer.codebook.weight": np.ones((4, 2)),
                "quantizer.out_proj.weight": np.zeros((2, 2)),
                "quantizer.out_proj.bias": np.zeros(2),
            }
        )
        draws = 100_000
        noise = gumbel_noise(draws, config, np.random.default_rng(11))
        z = Tensor(np.zeros((draws, 2)))
        out = quantize(z, params, config, temperature=2.0, noise=noise)
        counts = np.bincount(out.codes[:, 0], minlength=4)
        sigma = np.sqrt(draws * 0.25 * 0.75)
        assert np.all(np.abs(counts - draws / 4) < 3 * sigma)

    def test_soft_mode_is_near_uniform_at_high_temperature(self, rng):
        config = QuantizerConfig(
            input_dim=2, groups=1, entries=4, entry_dim=4, output_dim=4
        )
        params = ParameterSet(
            {
                "quantizer.logit_proj.weight": rng.standard_normal((4, 2)),
                "quantizer.logit_proj.bias": rng.standard_normal(4),
                "quantizer.codebook.weight": np.eye(4),
                "quantizer.out_proj.weight": np.eye(4),
                "quantizer.out_proj.bias": np.zeros(4),
            }
        )
        draws = 100_000
        z = Tensor(rng.standard_normal((draws, 2)))
        noise = gumbel_noise(draws, config, np.random.default_rng(12))
        out = quantize(z, params, config, temperature=1e4, mode="soft", noise=noise)
        # identity codebook and projection expose the mixing weights directly
        np.testing.assert_allclose(out.targets.data.sum(axis=1), 1.0)
        assert np.max(np.abs(out.targets.data - 0.25)) < 0.01

    def test_frame_noise_depends_only_on_key_and_frame(self, model):
        config = model.config.quantizer
        short = frame_gumbel_noise(5, config, [0, 3, 17, 2])
        long = frame_gumbel_noise(9, config, [0, 3, 17, 2])
        assert long.shape == (9, config.groups, config.entries)
        np.testing.assert_array_equal(short, long[:5])
        other = frame_gumbel_noise(5, config, [1, 3, 17, 2])
        assert not np.array_equal(short, other)

    def test_bad_temperature_and_mode(self, model):
        config = model.config.quantizer
        with pytest.raises(ConfigError):
            quantize(_z(), model.params, config, temperature=0.0)
        with pytest.raises(ConfigError):
            quantize(_z(), model.params, config, temperature=1.0, mode="sparse")


class TestTemperature:
    def test_schedule_endpoints(self):
        assert anneal_temperature(0) == 2.0
        assert anneal_temperature(1000) == pytest.approx(2.0 * 0.999995**1000)
        assert anneal_temperature(10_000_000) == 0.5

    def test_negative_step(self):
        with pytest.raises(ConfigError):
            anneal_temperature(-1)


class TestDiversity:
    def test_uniform_usage_is_zero(self):
        probs = Tensor(np.full((5, 2, 4), 0.25))
        assert float(diversity_loss(probs).data) == pytest.approx(0.0, abs=1e-12)
        assert code_perplexity(probs) == pytest.approx(8.0)

    def test_collapsed_single_group(self):
        one_hot = np.zeros((3, 1, 4))
        one_hot[:, 0, 2] = 1.0
        assert float(diversity_loss(Tensor(one_hot)).data) == pytest.approx(0.75)
        assert code_perplexity(Tensor(one_hot)) == pytest.approx(1.0)

    def test_frames_spread_over_codes(self):
        probs = np.zeros((4, 1, 4))
        probs[np.arange(4), 0, np.arange(4)] = 1.0
        loss = float(diversity_loss(Tensor(probs)).data)
        assert loss == pytest.approx(0.0, abs=1e-12)

    def test_rows_must_be_distributions(self):
        with pytest.raises(NumericsError):
            diversity_loss(Tensor(np.full((2, 1, 4), 0.3)))

    def test_rank_is_checked(self):
        with pytest.raises(NumericsError):
            diversity_loss(Tensor(np.full((2, 4), 0.25)))

    def test_sizes_must_be_positive(self):
        with pytest.raises(ConfigError):
            QuantizerConfig(groups=0)
