"""
WAV file helpers for w2vj (16-bit PCM, mono).
"""

from pathlib import Path
from typing import Tuple, Union

import numpy as np
from scipy.io import wavfile

from .errors import FeatureError

PathLike = Union[str, Path]

PCM_SCALE = 32768.0


def read_wav(path: PathLike) -> Tuple[np.ndarray, int]:
    """Read a mono 16-bit WAV file as float64 samples in [-1, 1)."""
    try:
        rate, data = wavfile.read(str(path))
    except (OSError, ValueError) as e:
        raise FeatureError(f"cannot read WAV {path}: {e}") from e
    if data.ndim != 1:
        raise FeatureError(f"{path}: expected mono audio, got {data.shape[1]} channels")
    if data.dtype != np.int16:
        raise FeatureError(f"{path}: expected 16-bit PCM, got {data.dtype}")
    return data.astype(np.float64) / PCM_SCALE, int(rate)


def write_wav(path: PathLike, samples: np.ndarray, sample_rate: int) -> None:
    """Write float samples as 16-bit PCM (clipped to [-1, 1])."""
    pcm = np.round(np.clip(samples, -1.0, 1.0) * (PCM_SCALE - 1)).astype(np.int16)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    wavfile.write(str(path), sample_rate, pcm)
