"""
FBANK extraction and global CMVN for w2vj.

Features are 80 log mel-filterbank energies per 25 ms frame with a 10 ms
shift. Normalization statistics are accumulated with mergeable partial sums
so corpora can be processed in parallel chunks.
"""

from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path
from typing import Any, Dict, Iterable, Mapping, Optional, Union

import librosa
import numpy as np
from scipy.signal import get_window

from ..utils.audio import read_wav, write_wav
from ..utils.errors import FeatureError

SAMPLE_RATE = 16000
NUM_MEL_BINS = 80
VARIANCE_FLOOR = 1e-8


@dataclass(frozen=True)
class FbankOptions:
    """Filterbank settings; defaults follow the Kaldi/ESPnet 16 kHz recipes."""

    sample_rate: int = SAMPLE_RATE
    num_mel_bins: int = NUM_MEL_BINS
    frame_length: int = 400
    frame_shift: int = 160
    n_fft: int = 512
    preemphasis: float = 0.97
    low_freq: float = 20.0
    high_freq: float = 7600.0
    log_floor: float = 1e-10


DEFAULT_FBANK = FbankOptions()


@dataclass
class Waveform:
    """Mono audio with samples in [-1, 1]."""

    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self) -> None:
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.sample_rate != SAMPLE_RATE:
            raise FeatureError(
                f"sample rate must be {SAMPLE_RATE} Hz, got {self.sample_rate}"
            )
        if self.samples.ndim != 1 or self.samples.size == 0:
            raise FeatureError("waveform must be a nonempty 1-D sample array")
        if not np.all(np.isfinite(self.samples)) or np.max(np.abs(self.samples)) > 1.0:
            raise FeatureError("waveform samples must be finite and within [-1, 1]")

    def __len__(self) -> int:
        return int(self.samples.size)

    @property
    def duration(self) -> float:
        return self.samples.size / self.sample_rate


def load_waveform(path: Union[str, Path]) -> Waveform:
    samples, rate = read_wav(path)
    return Waveform(samples, rate)


def save_waveform(path: Union[str, Path], waveform: Waveform) -> None:
    write_wav(path, waveform.samples, waveform.sample_rate)


def num_frames(num_samples: int, options: FbankOptions = DEFAULT_FBANK) -> int:
    """T = 1 + floor((N - frame_length) / frame_shift); 0 below one window."""
    if num_samples < options.frame_length:
        return 0
    return 1 + (num_samples - options.frame_length) // options.frame_shift


@lru_cache(maxsize=8)
def mel_filterbank(options: FbankOptions = DEFAULT_FBANK) -> np.ndarray:
    """Triangular HTK-scale mel filters, shape (num_mel_bins, n_fft // 2 + 1)."""
    return librosa.filters.mel(
        sr=options.sample_rate,
        n_fft=options.n_fft,
        n_mels=options.num_mel_bins,
        fmin=options.low_freq,
        fmax=options.high_freq,
        htk=True,
        norm=None,
        dtype=np.float64,
    )


@lru_cache(maxsize=8)
def _analysis_window(length: int) -> np.ndarray:
    return get_window("hann", length, fftbins=True).astype(np.float64)


def extract_fbank(
    waveform: Waveform, options: FbankOptions = DEFAULT_FBANK
) -> np.ndarray:
    """Log mel-filterbank matrix of shape (T, num_mel_bins)."""
    samples = waveform.samples
    if samples.size < options.frame_length:
        raise FeatureError(
            f"waveform has {samples.size} samples, "
            f"shorter than one {options.frame_length}-sample window"
        )
    frames = np.array(
        librosa.util.frame(
            samples,
            frame_length=options.frame_length,
            hop_length=options.frame_shift,
            axis=0,
        )
    )
    emphasized = np.empty_like(frames)
    emphasized[:, 1:] = frames[:, 1:] - options.preemphasis * frames[:, :-1]
    emphasized[:, 0] = frames[:, 0] * (1.0 - options.preemphasis)
    windowed = emphasized * _analysis_window(options.frame_length)
    spectrum = np.fft.rfft(windowed, n=options.n_fft, axis=1)
    power = spectrum.real**2 + spectrum.imag**2
    energies = power @ mel_filterbank(options).T
    return np.log(np.maximum(energies, options.log_floor))


# ----------------------------------------------------------------------
# Global CMVN
# ----------------------------------------------------------------------


@dataclass
class CmvnStats:
    """Per-dimension mean and (floored) variance over a corpus."""

    mean: np.ndarray
    variance: np.ndarray
    frame_count: int

    @property
    def dim(self) -> int:
        return int(self.mean.size)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "mean": self.mean.tolist(),
            "variance": self.variance.tolist(),
            "frame_count": int(self.frame_count),
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "CmvnStats":
        try:
            mean = np.asarray(data["mean"], dtype=np.float64)
            variance = np.asarray(data["variance"], dtype=np.float64)
            count = int(data["frame_count"])
        except (KeyError, TypeError, ValueError) as e:
            raise FeatureError(f"malformed CMVN statistics: {e}") from e
        if mean.shape != variance.shape or mean.ndim != 1 or count <= 0:
            raise FeatureError("inconsistent CMVN statistics")
        return cls(mean=mean, variance=variance, frame_count=count)


class CmvnAccumulator:
    """Streaming mean/variance with associative ``merge`` (Chan et al. update)."""

    def __init__(self, dim: int = NUM_MEL_BINS) -> None:
        self.dim = dim
        self.count = 0
        self.mean = np.zeros(dim, dtype=np.float64)
        self.m2 = np.zeros(dim, dtype=np.float64)

    def update(self, frames: np.ndarray) -> "CmvnAccumulator":
        frames = np.asarray(frames, dtype=np.float64)
        if frames.ndim != 2 or frames.shape[1] != self.dim:
            raise FeatureError(f"expected (T, {self.dim}) frames, got {frames.shape}")
        if frames.shape[0] == 0:
            return self
        other = CmvnAccumulator(self.dim)
        other.count = frames.shape[0]
        other.mean = frames.mean(axis=0)
        centered = frames - other.mean
        other.m2 = (centered * centered).sum(axis=0)
        return self.merge(other)

    def merge(self, other: "CmvnAccumulator") -> "CmvnAccumulator":
        if other.dim != self.dim:
            raise FeatureError(
                f"cannot merge CMVN accumulators of dim {self.dim} and {other.dim}"
            )
        if other.count == 0:
            return self
        if self.count == 0:
            self.count = other.count
            self.mean, self.m2 = other.mean.copy(), other.m2.copy()
            return self
        total = self.count + other.count
        delta = other.mean - self.mean
        self.mean = self.mean + delta * (other.count / total)
        weight = self.count * other.count / total
        self.m2 = self.m2 + other.m2 + delta * delta * weight
        self.count = total
        return self

    def finalize(self, floor: float = VARIANCE_FLOOR) -> CmvnStats:
        if self.count == 0:
            raise FeatureError("cannot estimate CMVN from an empty corpus")
        variance = np.maximum(self.m2 / self.count, floor)
        return CmvnStats(
            mean=self.mean.copy(), variance=variance, frame_count=self.count
        )


def estimate_cmvn(
    corpus: Iterable[np.ndarray], floor: float = VARIANCE_FLOOR
) -> CmvnStats:
    """Exact global mean/variance over every frame of ``corpus``."""
    accumulator: Optional[CmvnAccumulator] = None
    for frames in corpus:
        frames = np.asarray(frames, dtype=np.float64)
        if accumulator is None:
            dim = frames.shape[1] if frames.ndim == 2 else NUM_MEL_BINS
            accumulator = CmvnAccumulator(dim)
        accumulator.update(frames)
    if accumulator is None:
        raise FeatureError("cannot estimate CMVN from an empty corpus")
    return accumulator.finalize(floor)


def _check_dim(frames: np.ndarray, stats: CmvnStats) -> np.ndarray:
    frames = np.asarray(frames, dtype=np.float64)
    if frames.ndim != 2 or frames.shape[1] != stats.dim:
        raise FeatureError(
            f"feature width {frames.shape[-1]} does not match CMVN dim {stats.dim}"
        )
    return frames


def apply_cmvn(frames: np.ndarray, stats: CmvnStats) -> np.ndarray:
    """(x - mean) / sqrt(variance) per dimension."""
    frames = _check_dim(frames, stats)
    return (frames - stats.mean) / np.sqrt(stats.variance)


def invert_cmvn(frames: np.ndarray, stats: CmvnStats) -> np.ndarray:
    frames = _check_dim(frames, stats)
    return frames * np.sqrt(stats.variance) + stats.mean


def save_cmvn(stats: CmvnStats, path: Union[str, Path]) -> None:
    """Three text lines: means, variances, frame count (17 significant digits)."""
    lines = [
        " ".join(f"{value:.17g}" for value in stats.mean),
        " ".join(f"{value:.17g}" for value in stats.variance),
        str(int(stats.frame_count)),
    ]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_cmvn(path: Union[str, Path]) -> CmvnStats:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if len(lines) < 3:
        raise FeatureError(f"{path}: CMVN file needs 3 lines, found {len(lines)}")
    try:
        mean = np.array([float(v) for v in lines[0].split()], dtype=np.float64)
        variance = np.array([float(v) for v in lines[1].split()], dtype=np.float64)
        count = int(lines[2].strip())
    except ValueError as e:
        raise FeatureError(f"{path}: malformed CMVN file: {e}") from e
    if mean.size != variance.size or count <= 0:
        raise FeatureError(f"{path}: inconsistent CMVN statistics")
    return CmvnStats(mean=mean, variance=variance, frame_count=count)
