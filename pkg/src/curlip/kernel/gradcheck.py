"""Central-difference verification of analytic gradients."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable

import numpy as np

from .tensor import Tensor, no_grad, track_kinks


def rel_error(analytic: float, numeric: float) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-8)


@dataclass
class GradCheckReport:
    max_rel_error: float
    per_param: dict[str, float] = field(default_factory=dict)
    checked: dict[str, int] = field(default_factory=dict)
    kinked: dict[str, int] = field(default_factory=dict)

    @property
    def unchecked(self) -> list[str]:
        """Parameters for which no kink-free coordinate was found."""
        return [name for name, n in self.checked.items() if n == 0]

    def passed(self, threshold: float) -> bool:
        return self.max_rel_error < threshold and not self.unchecked

    def worst(self, k: int = 5) -> list[tuple[str, float]]:
        return sorted(self.per_param.items(), key=lambda kv: -kv[1])[:k]


def grad_check(f: Callable[[], Tensor], params: Iterable[Tensor], seed: int = 0,
               n_coords: int = 64, h: float = 1e-5, max_attempts: int | None = None,
               shrink_steps: int = 2) -> GradCheckReport:
    """Compare backprop gradients of scalar ``f()`` with central differences.

    ``params`` are leaf tensors (normally :class:`Param`) holding float64
    data; non-trainable ones are skipped.  At most ``n_coords`` coordinates
    per parameter are probed.  A coordinate whose +h / -h evaluations change
    the activation pattern of any relu straddles a kink, where finite
    differences are not a valid reference.  Such a coordinate is retried with
    the step shrunk tenfold up to ``shrink_steps`` times, then replaced by
    another sample and counted in ``kinked``.  ``max_attempts`` bounds the
    number of coordinates tried per parameter (default: all of them).
    """
    n_coords = min(n_coords, 64)
    params = [p for p in params if getattr(p, "trainable", p.requires_grad)]
    for p in params:
        if p.data.dtype != np.float64:
            raise TypeError(f"grad_check needs float64 parameters, {getattr(p, 'name', p)} is {p.data.dtype}")
        p.grad = np.zeros_like(p.data)

    with track_kinks() as base_sig:
        loss = f()
    loss.backward()
    base_sig = list(base_sig)

    def probe() -> tuple[float, list[bytes]]:
        with track_kinks() as sig, no_grad():
            val = float(np.sum(f().data))
        return val, sig

    rng = np.random.default_rng(seed)
    report = GradCheckReport(max_rel_error=0.0)
    for idx, p in enumerate(params):
        name = getattr(p, "name", f"param{idx}")
        flat = p.data.reshape(-1)
        grad = p.grad.reshape(-1)
        order = rng.permutation(flat.size)
        worst, checked, kinked = 0.0, 0, 0
        if max_attempts is not None:
            order = order[:max_attempts]
        for i in order:
            if checked >= n_coords:
                break
            orig = flat[i]
            for step in h * 0.1 ** np.arange(shrink_steps + 1):
                flat[i] = orig + step
                fp, sp = probe()
                flat[i] = orig - step
                fm, sm = probe()
                flat[i] = orig
                if sp == base_sig and sm == base_sig:
                    worst = max(worst, rel_error(float(grad[i]), (fp - fm) / (2 * step)))
                    checked += 1
                    break
            else:
                kinked += 1
        report.per_param[name] = worst
        report.checked[name] = checked
        report.kinked[name] = kinked
        report.max_rel_error = max(report.max_rel_error, worst)
    return report
