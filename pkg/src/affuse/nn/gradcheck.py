"""Central finite-difference verification of tape gradients."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from ..errors import DeterminismError
from .tensor import Tensor, no_grad, record_relu_masks


@dataclass
class GradCheckReport:
    tolerance: float
    errors: dict[str, float] = field(default_factory=dict)
    # coordinates skipped because x-h and x+h fall on different sides of a relu kink
    kinks: dict[str, int] = field(default_factory=dict)

    @property
    def worst(self) -> float:
        return max(self.errors.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return self.worst <= self.tolerance

    @property
    def failures(self) -> list[str]:
        return [name for name, err in self.errors.items() if err > self.tolerance]


def relative_error(g_ad: float, g_fd: float) -> float:
    return abs(g_ad - g_fd) / max(1e-8, abs(g_ad) + abs(g_fd))


def grad_check(
    closure: Callable[[], Tensor],
    params: Mapping[str, Tensor] | Sequence[Tensor],
    tolerance: float = 1e-4,
    h: float = 1e-5,
    samples: int | None = 16,
    seed: int = 0,
) -> GradCheckReport:
    """Compare tape gradients of ``closure()`` against central differences.

    ``closure`` must return a scalar Tensor and be deterministic; it is run
    twice up front and a mismatch raises DeterminismError. Up to ``samples``
    elements per parameter are checked (all of them when ``samples`` is None).

    A coordinate whose stencil x-h, x+h changes the activation pattern of any
    relu straddles a kink, where the central difference does not estimate the
    derivative. Such coordinates are skipped, counted in ``kinks``, and
    replaced by the next sampled coordinate.
    """
    if not isinstance(params, Mapping):
        params = {getattr(p, "name", "") or f"param{i}": p for i, p in enumerate(params)}

    for p in params.values():
        p.grad = None
    out = closure()
    with no_grad():
        again = closure()
    if out.size != 1:
        raise ValueError(f"closure must return a scalar, got shape {out.shape}")
    if not np.array_equal(out.data, again.data):
        raise DeterminismError(
            f"closure returned {out.item()!r} then {again.item()!r} for identical parameters"
        )
    out.backward()

    rng = np.random.default_rng(seed)
    report = GradCheckReport(tolerance=tolerance)
    for name, p in params.items():
        analytic = np.zeros_like(p.data) if p.grad is None else p.grad
        flat = p.data.reshape(-1)
        flat_grad = analytic.reshape(-1)
        want = flat.size if samples is None else min(samples, flat.size)
        order = np.arange(flat.size) if samples is None else rng.permutation(flat.size)
        worst, checked, kinks = 0.0, 0, 0
        for i in order:
            if checked == want:
                break
            orig = flat[i]
            with no_grad():
                flat[i] = orig + h
                with record_relu_masks() as masks_plus:
                    f_plus = closure().item()
                flat[i] = orig - h
                with record_relu_masks() as masks_minus:
                    f_minus = closure().item()
            flat[i] = orig
            if masks_plus != masks_minus:
                kinks += 1
                continue
            g_fd = (f_plus - f_minus) / (2.0 * h)
            worst = max(worst, relative_error(float(flat_grad[i]), g_fd))
            checked += 1
        if kinks:
            report.kinks[name] = kinks
        report.errors[name] = worst
    for p in params.values():
        p.grad = None
    return report
