"""
CTC loss, its brute-force oracle and best-path decoding. Blank is index 0.
"""

import itertools
from typing import List, Optional, Sequence, Union

import numpy as np
from scipy.special import logsumexp

from ..utils.errors import InadmissibleTargetError, ShapeError
from .autograd import Tensor
from .data import BLANK_INDEX

MAX_ENUMERATION = 1_000_000


def required_frames(target: Sequence[int]) -> int:
    """Minimum T' for ``target``: its length plus one blank per adjacent repeat."""
    repeats = sum(1 for a, b in zip(target, target[1:]) if a == b)
    return len(target) + repeats


def _check_target(
    target: Sequence[int], frames: int, vocab_size: int, blank: int
) -> List[int]:
    labels = [int(t) for t in target]
    for label in labels:
        if label == blank or not 0 <= label < vocab_size:
            raise InadmissibleTargetError(
                f"target index {label} outside [1, {vocab_size})"
            )
    needed = required_frames(labels)
    if frames < needed:
        raise InadmissibleTargetError(
            f"target needs {needed} frames, logits have {frames}"
        )
    return labels


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    x = np.asarray(logits, dtype=np.float64)
    return x - logsumexp(x, axis=-1, keepdims=True)


def _extend(labels: Sequence[int], blank: int) -> np.ndarray:
    ext = np.full(2 * len(labels) + 1, blank, dtype=np.int64)
    ext[1::2] = labels
    return ext


def _forward_backward(log_probs: np.ndarray, ext: np.ndarray, blank: int):
    frames = log_probs.shape[0]
    states = ext.size
    skip = np.zeros(states, dtype=bool)
    skip[2:] = (ext[2:] != blank) & (ext[2:] != ext[:-2])
    emit = log_probs[:, ext]

    alpha = np.full((frames, states), -np.inf)
    alpha[0, 0] = emit[0, 0]
    if states > 1:
        alpha[0, 1] = emit[0, 1]
    for t in range(1, frames):
        prev = alpha[t - 1]
        stay_or_step = np.logaddexp(prev, np.concatenate(([-np.inf], prev[:-1])))
        jump = np.where(skip, np.concatenate(([-np.inf, -np.inf], prev[:-2])), -np.inf)
        alpha[t] = np.logaddexp(stay_or_step, jump) + emit[t]

    beta = np.full((frames, states), -np.inf)
    beta[-1, -1] = 0.0
    if states > 1:
        beta[-1, -2] = 0.0
    skip_from = np.concatenate((skip[2:], [False, False]))
    for t in range(frames - 2, -1, -1):
        nxt = beta[t + 1] + emit[t + 1]
        stay_or_step = np.logaddexp(nxt, np.concatenate((nxt[1:], [-np.inf])))
        shifted = np.concatenate((nxt[2:], [-np.inf, -np.inf]))
        jump = np.where(skip_from, shifted, -np.inf)
        beta[t] = np.logaddexp(stay_or_step, jump)

    final = alpha[-1, -1] if states == 1 else np.logaddexp(alpha[-1, -1], alpha[-1, -2])
    return alpha, beta, float(final)


def ctc_loss(logits: Tensor, target: Sequence[int], blank: int = BLANK_INDEX) -> Tensor:
    """-log p(target | logits) summed over all blank-augmented alignments.

    ``logits`` is (T', V) pre-softmax. The gradient is the analytic
    softmax-minus-occupancy from the log-space forward/backward recursions.
    """
    if logits.ndim != 2:
        raise ShapeError(f"ctc_loss expects (T, V) logits, got {logits.dims}")
    frames, vocab_size = logits.shape
    labels = _check_target(target, frames, vocab_size, blank)
    log_probs = _log_softmax(logits.data)
    ext = _extend(labels, blank)
    alpha, beta, log_likelihood = _forward_backward(log_probs, ext, blank)
    if not np.isfinite(log_likelihood):
        raise InadmissibleTargetError("target has zero probability under the logits")

    def backward(g: np.ndarray):
        occupancy = np.exp(alpha + beta - log_likelihood)
        per_label = np.zeros((frames, vocab_size))
        np.add.at(per_label, (slice(None), ext), occupancy)
        grad = (np.exp(log_probs) - per_label) * float(g)
        return (grad.astype(logits.dtype, copy=False),)

    value = np.asarray(-log_likelihood, dtype=logits.dtype)
    return Tensor.from_op(value, (logits,), backward, "ctc_loss")


def collapse(path: Sequence[int], blank: int = BLANK_INDEX) -> List[int]:
    """Merge consecutive repeats, then drop blanks."""
    out: List[int] = []
    previous: Optional[int] = None
    for label in path:
        label = int(label)
        if label != previous and label != blank:
            out.append(label)
        previous = label
    return out


def ctc_loss_bruteforce(
    logits: Union[np.ndarray, Tensor], target: Sequence[int], blank: int = BLANK_INDEX
) -> float:
    """Enumerate every length-T' path; +inf when no path collapses to ``target``."""
    data = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    frames, vocab_size = data.shape
    if vocab_size**frames > MAX_ENUMERATION:
        raise ShapeError(
            f"{vocab_size}^{frames} paths exceed the limit {MAX_ENUMERATION}"
        )
    log_probs = _log_softmax(data)
    wanted = [int(t) for t in target]
    rows = np.arange(frames)
    scores = [
        float(log_probs[rows, list(path)].sum())
        for path in itertools.product(range(vocab_size), repeat=frames)
        if collapse(path, blank) == wanted
    ]
    if not scores:
        return float("inf")
    return float(-logsumexp(scores))


def greedy_decode(
    logits: Union[np.ndarray, Tensor],
    length: Optional[int] = None,
    blank: int = BLANK_INDEX,
) -> List[int]:
    """Best path: per-frame argmax (ties to the lower index), collapse, drop blanks."""
    data = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    if length is not None:
        data = data[:length]
    return collapse(np.argmax(data, axis=-1).tolist(), blank)
