"""Tests for FBANK extraction and CMVN."""

import numpy as np
import pytest

from w2vj.core.features import (
    NUM_MEL_BINS,
    CmvnAccumulator,
    CmvnStats,
    Waveform,
    apply_cmvn,
    estimate_cmvn,
    extract_fbank,
    invert_cmvn,
    load_cmvn,
    load_waveform,
    mel_filterbank,
    num_frames,
    save_cmvn,
    save_waveform,
)
from w2vj.utils.errors import FeatureError


def _tone(seconds: float = 1.0, hz: float = 440.0) -> Waveform:
    t = np.arange(int(16000 * seconds)) / 16000.0
    return Waveform(0.5 * np.sin(2 * np.pi * hz * t))


class TestFbank:
    def test_frame_count(self):
        assert num_frames(16000) == 98
        assert num_frames(400) == 1
        assert num_frames(399) == 0

    def test_one_second_shape(self):
        feats = extract_fbank(_tone())
        assert feats.shape == (98, NUM_MEL_BINS)
        assert np.all(np.isfinite(feats))

    def test_tone_energy_peaks_near_its_frequency(self):
        feats = extract_fbank(_tone(hz=1000.0))
        low = extract_fbank(_tone(hz=200.0))
        assert np.argmax(feats.mean(axis=0)) > np.argmax(low.mean(axis=0))

    def test_silence_hits_log_floor(self):
        feats = extract_fbank(Waveform(np.zeros(800)))
        np.testing.assert_allclose(feats, np.log(1e-10))

    def test_filterbank_shape_and_nonnegative(self):
        filters = mel_filterbank()
        assert filters.shape == (NUM_MEL_BINS, 257)
        assert np.all(filters >= 0.0)

    def test_one_hop_shift_drops_the_first_frame(self, rng):
        samples = rng.uniform(-0.5, 0.5, 8000)
        full = extract_fbank(Waveform(samples))
        shifted = extract_fbank(Waveform(samples[160:]))
        assert shifted.shape[0] == full.shape[0] - 1
        np.testing.assert_allclose(shifted, full[1:], atol=1e-6)

    def test_short_waveform_is_rejected(self):
        with pytest.raises(FeatureError):
            extract_fbank(Waveform(np.zeros(399)))

    def test_wrong_sample_rate(self):
        with pytest.raises(FeatureError):
            Waveform(np.zeros(1600), sample_rate=8000)

    def test_out_of_range_samples(self):
        with pytest.raises(FeatureError):
            Waveform(np.array([0.0, 1.5]))

    def test_wav_file_quantization(self, tmp_path):
        wave = _tone(0.1)
        save_waveform(tmp_path / "a.wav", wave)
        loaded = load_waveform(tmp_path / "a.wav")
        assert len(loaded) == len(wave)
        assert np.max(np.abs(loaded.samples - wave.samples)) < 1.0 / 16000


class TestCmvn:
    def test_normalized_corpus_has_zero_mean_unit_variance(self, rng):
        corpus = [rng.normal(3.0, 2.0, size=(n, NUM_MEL_BINS)) for n in (50, 70, 30)]
        stats = estimate_cmvn(corpus)
        normalized = np.concatenate([apply_cmvn(c, stats) for c in corpus])
        np.testing.assert_allclose(normalized.mean(axis=0), 0.0, atol=1e-9)
        np.testing.assert_allclose(normalized.var(axis=0), 1.0, atol=1e-9)
        assert stats.frame_count == 150

    def test_merge_matches_single_pass(self, rng):
        frames = rng.standard_normal((90, 4)) * 5.0 + 1.0
        left = CmvnAccumulator(4).update(frames[:40])
        right = CmvnAccumulator(4).update(frames[40:])
        merged = left.merge(right).finalize()
        np.testing.assert_allclose(merged.mean, frames.mean(axis=0), rtol=1e-12)
        np.testing.assert_allclose(merged.variance, frames.var(axis=0), rtol=1e-10)

    def test_constant_dimension_is_floored(self):
        frames = np.ones((10, 3))
        stats = estimate_cmvn([frames])
        assert np.all(stats.variance == 1e-8)
        assert np.all(np.isfinite(apply_cmvn(frames, stats)))

    def test_invert_restores_frames(self, rng):
        frames = rng.standard_normal((20, 6))
        stats = estimate_cmvn([frames])
        restored = invert_cmvn(apply_cmvn(frames, stats), stats)
        np.testing.assert_allclose(restored, frames, atol=1e-12)

    def test_text_file_is_exact(self, rng, tmp_path):
        stats = estimate_cmvn([rng.standard_normal((15, 5))])
        save_cmvn(stats, tmp_path / "cmvn.txt")
        loaded = load_cmvn(tmp_path / "cmvn.txt")
        np.testing.assert_array_equal(loaded.mean, stats.mean)
        np.testing.assert_array_equal(loaded.variance, stats.variance)
        assert loaded.frame_count == 15

    def test_dimension_mismatch(self, rng):
        stats = estimate_cmvn([rng.standard_normal((5, 4))])
        with pytest.raises(FeatureError):
            apply_cmvn(rng.standard_normal((5, 3)), stats)

    def test_empty_corpus(self):
        with pytest.raises(FeatureError):
            estimate_cmvn([])

    def test_malformed_file(self, tmp_path):
        path = tmp_path / "bad.txt"
        path.write_text("1 2\n3\n", encoding="utf-8")
        with pytest.raises(FeatureError):
            load_cmvn(path)

    def test_checkpoint_metadata_form(self, rng):
        stats = estimate_cmvn([rng.standard_normal((12, 3))])
        restored = CmvnStats.from_dict(stats.to_dict())
        np.testing.assert_array_equal(restored.mean, stats.mean)
        assert restored.frame_count == 12
        with pytest.raises(FeatureError):
            CmvnStats.from_dict(
                {"mean": [0.0, 1.0], "variance": [1.0], "frame_count": 3}
            )
