"""
Finite-difference gradient checking.

``gradient_check`` compares the analytic gradients of a scalar-valued
fragment against central differences, parameter by parameter. The error for
one entry is ``|a - n| / max(|a|, |n|, floor)``; the floor keeps entries
whose true gradient is ~0 from reporting roundoff as relative error.
"""

from dataclasses import dataclass, field
from typing import Callable, List, Optional

import numpy as np

from ..utils.errors import NonDeterministicError, ShapeError
from .autograd import Tensor
from .optim import ParameterSet

Fragment = Callable[[], Tensor]


@dataclass
class ParameterCheck:
    name: str
    max_rel_error: float
    checked: int
    passed: bool


@dataclass
class GradCheckReport:
    fragment: str
    tolerance: float
    checks: List[ParameterCheck] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(check.passed for check in self.checks)

    @property
    def max_rel_error(self) -> float:
        return max((check.max_rel_error for check in self.checks), default=0.0)


def _evaluate(fragment: Fragment) -> float:
    root = fragment()
    if root.data.size != 1:
        raise ShapeError(
            f"gradient check needs a scalar fragment, got dims {root.dims}"
        )
    return float(root.data.reshape(-1)[0])


def gradient_check(
    fragment: Fragment,
    params: ParameterSet,
    tolerance: float = 1e-4,
    eps: float = 1e-5,
    max_entries: Optional[int] = None,
    seed: int = 0,
    floor: float = 1e-4,
    name: str = "fragment",
) -> GradCheckReport:
    """Check analytic gradients of ``fragment`` w.r.t. every entry of ``params``.

    ``fragment`` must rebuild its graph from ``params`` on every call and be
    deterministic; a fragment that returns different values on two calls
    raises ``NonDeterministicError``. ``max_entries`` limits how many
    (seeded, randomly chosen) elements of each parameter are perturbed.
    """
    first = fragment()
    second = fragment()
    if not np.array_equal(first.data, second.data):
        raise NonDeterministicError(
            f"{name}: two evaluations with the same seed differ"
        )

    params.zero_grad()
    root = fragment()
    root.backward()
    analytic = {pname: params.grad(pname).copy() for pname in params.names()}
    params.zero_grad()

    rng = np.random.default_rng(seed)
    report = GradCheckReport(fragment=name, tolerance=tolerance)
    for pname, tensor in params.items():
        tensor.data = np.ascontiguousarray(tensor.data)
        flat = tensor.data.reshape(-1)
        indices = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            indices = np.sort(rng.choice(flat.size, size=max_entries, replace=False))
        worst = 0.0
        for index in indices:
            original = flat[index]
            flat[index] = original + eps
            plus = _evaluate(fragment)
            flat[index] = original - eps
            minus = _evaluate(fragment)
            flat[index] = original
            numeric = (plus - minus) / (2.0 * eps)
            exact = float(analytic[pname].reshape(-1)[index])
            error = abs(exact - numeric) / max(abs(exact), abs(numeric), floor)
            worst = max(worst, error)
        report.checks.append(
            ParameterCheck(
                name=pname,
                max_rel_error=worst,
                checked=int(indices.size),
                passed=worst <= tolerance,
            )
        )
    return report
