"""
Parameters, Adam and learning-rate schedules for w2vj.
"""

import math
from dataclasses import dataclass, field
from typing import Dict, Iterator, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from ..utils.errors import ConfigError, MissingGradientError, ShapeError
from .autograd import Tensor


class ParameterSet:
    """Named trainable tensors, iterated in lexicographic name order."""

    def __init__(self, arrays: Optional[Mapping[str, np.ndarray]] = None) -> None:
        self._entries: Dict[str, Tensor] = {}
        for name, array in (arrays or {}).items():
            self.add(name, array)

    def add(self, name: str, array: np.ndarray) -> Tensor:
        if not name:
            raise ConfigError("parameter names must be nonempty")
        if name in self._entries:
            raise ConfigError(f"duplicate parameter name: {name}")
        tensor = Tensor(np.array(array, copy=True), requires_grad=True, name=name)
        self._entries[name] = tensor
        return tensor

    def __getitem__(self, name: str) -> Tensor:
        return self._entries[name]

    def __contains__(self, name: object) -> bool:
        return name in self._entries

    def __len__(self) -> int:
        return len(self._entries)

    def __iter__(self) -> Iterator[str]:
        return iter(self.names())

    def names(self) -> Sequence[str]:
        return sorted(self._entries)

    def items(self) -> Iterator[Tuple[str, Tensor]]:
        for name in self.names():
            yield name, self._entries[name]

    def with_prefix(self, prefix: str) -> Sequence[str]:
        return [name for name in self.names() if name.startswith(prefix)]

    def grad(self, name: str) -> np.ndarray:
        """Gradient of ``name``, zeros when nothing has been accumulated."""
        tensor = self._entries[name]
        return tensor.grad if tensor.grad is not None else np.zeros_like(tensor.data)

    def zero_grad(self) -> None:
        for tensor in self._entries.values():
            tensor.grad = None

    def to_arrays(self) -> Dict[str, np.ndarray]:
        """Copy of the current values keyed by name (sorted)."""
        return {name: tensor.data.copy() for name, tensor in self.items()}

    def load_arrays(
        self, arrays: Mapping[str, np.ndarray], strict: bool = True
    ) -> None:
        """Overwrite values in place from ``arrays``."""
        for name, array in arrays.items():
            if name not in self._entries:
                if strict:
                    raise ShapeError(f"unexpected parameter: {name}")
                continue
            target = self._entries[name]
            if tuple(array.shape) != target.dims:
                raise ShapeError(f"{name}: dims {tuple(array.shape)} vs {target.dims}")
            target.data = np.array(array, dtype=target.dtype, copy=True)

    def num_elements(self) -> int:
        return int(sum(t.data.size for t in self._entries.values()))


@dataclass
class AdamState:
    """Moments and step counter for Adam."""

    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-6
    step: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)

    def to_arrays(self) -> Dict[str, np.ndarray]:
        arrays = {f"m.{name}": value for name, value in self.m.items()}
        arrays.update({f"v.{name}": value for name, value in self.v.items()})
        return arrays

    @classmethod
    def from_arrays(
        cls,
        arrays: Mapping[str, np.ndarray],
        step: int,
        beta1: float = 0.9,
        beta2: float = 0.98,
        eps: float = 1e-6,
    ) -> "AdamState":
        state = cls(beta1=beta1, beta2=beta2, eps=eps, step=step)
        for key, value in arrays.items():
            kind, name = key.split(".", 1)
            (state.m if kind == "m" else state.v)[name] = np.array(value, copy=True)
        return state


def adam_step(
    params: ParameterSet,
    state: AdamState,
    lr: float,
    frozen: Sequence[str] = (),
) -> AdamState:
    """Apply one Adam update in place and clear gradients.

    Parameters whose name starts with a ``frozen`` prefix, or that received no
    gradient, are left untouched.
    """
    updatable = [
        (name, tensor)
        for name, tensor in params.items()
        if tensor.grad is not None and not any(name.startswith(p) for p in frozen)
    ]
    if not updatable:
        raise MissingGradientError("adam_step called without any populated gradient")

    state.step += 1
    t = state.step
    correction1 = 1.0 - state.beta1**t
    correction2 = 1.0 - state.beta2**t
    for name, tensor in updatable:
        grad = tensor.grad
        assert grad is not None
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None or v is None:
            m = np.zeros_like(tensor.data)
            v = np.zeros_like(tensor.data)
        m = state.beta1 * m + (1.0 - state.beta1) * grad
        v = state.beta2 * v + (1.0 - state.beta2) * grad * grad
        state.m[name] = m
        state.v[name] = v
        update = (m / correction1) / (np.sqrt(v / correction2) + state.eps)
        tensor.data = (tensor.data - lr * update).astype(tensor.dtype, copy=False)
    params.zero_grad()
    return state


def clip_grad_norm(params: ParameterSet, max_norm: float) -> float:
    """Scale all gradients so their global L2 norm is at most ``max_norm``."""
    squares = [
        float(np.sum(t.grad.astype(np.float64) ** 2))
        for _, t in params.items()
        if t.grad is not None
    ]
    total = math.sqrt(math.fsum(squares))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / (total + 1e-6)
        for _, tensor in params.items():
            if tensor.grad is not None:
                tensor.grad = (tensor.grad * scale).astype(tensor.dtype, copy=False)
    return total


# ----------------------------------------------------------------------
# Learning-rate schedules
# ----------------------------------------------------------------------


@dataclass(frozen=True)
class TriStageSchedule:
    """Warmup from ``init_scale * peak``, hold at peak, then linear decay to
    ``final_scale * peak`` at ``total_steps``."""

    peak_lr: float
    total_steps: int
    warmup_ratio: float = 0.1
    hold_ratio: float = 0.4
    decay_ratio: float = 0.5
    init_scale: float = 0.01
    final_scale: float = 0.05

    def __post_init__(self) -> None:
        if self.total_steps <= 0:
            raise ConfigError("total_steps must be positive")
        if abs(self.warmup_ratio + self.hold_ratio + self.decay_ratio - 1.0) > 1e-9:
            raise ConfigError("tri-stage ratios must sum to 1")

    @property
    def warmup_steps(self) -> int:
        return int(round(self.warmup_ratio * self.total_steps))

    @property
    def hold_steps(self) -> int:
        return int(round(self.hold_ratio * self.total_steps))

    def __call__(self, step: int) -> float:
        if step < 0:
            raise ConfigError(f"negative step: {step}")
        peak = self.peak_lr
        warmup = self.warmup_steps
        hold_end = warmup + self.hold_steps
        if step < warmup:
            start = self.init_scale * peak
            return start + (peak - start) * step / warmup
        if step <= hold_end:
            return peak
        decay = self.total_steps - hold_end
        if decay <= 0 or step >= self.total_steps:
            return self.final_scale * peak
        frac = (step - hold_end) / decay
        return peak + (self.final_scale * peak - peak) * frac


@dataclass(frozen=True)
class LinearWarmupDecaySchedule:
    """Linear warmup from 0 to peak, then linear decay to 0 at ``total_steps``."""

    peak_lr: float
    total_steps: int
    warmup_steps: int

    def __post_init__(self) -> None:
        if (
            self.total_steps <= 0
            or self.warmup_steps < 0
            or self.warmup_steps > self.total_steps
        ):
            raise ConfigError("invalid warmup/total steps")

    def __call__(self, step: int) -> float:
        if step < 0:
            raise ConfigError(f"negative step: {step}")
        if self.warmup_steps and step < self.warmup_steps:
            return self.peak_lr * step / self.warmup_steps
        remaining = self.total_steps - self.warmup_steps
        if remaining <= 0 or step >= self.total_steps:
            return 0.0 if step >= self.total_steps else self.peak_lr
        return self.peak_lr * (self.total_steps - step) / remaining


Schedule = Union[TriStageSchedule, LinearWarmupDecaySchedule]


def lr_schedule(step: int, spec: Schedule) -> float:
    """Learning rate at ``step`` for a schedule descriptor."""
    return float(spec(step))
