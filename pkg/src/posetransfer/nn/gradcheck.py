"""Central finite-difference checks for scalar functions of parameters."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .autodiff import Tensor

DENOM_FLOOR = 1e-8


@dataclass
class GradCheckResult:
    max_rel_error: float
    n_probes: int
    worst: tuple  # (parameter index, flat index, analytic, numeric)

    def passed(self, tol: float) -> bool:
        return self.max_rel_error < tol


def relative_error(a: float, n: float) -> float:
    return abs(a - n) / max(abs(a), abs(n), DENOM_FLOOR)


def check_gradients(
    loss_fn: Callable[[], Tensor],
    params: Sequence[Tensor],
    n_probes: int = 20,
    step: float = 1e-5,
    seed: int = 0,
) -> GradCheckResult:
    """Compare backward() against central differences at random entries.

    ``loss_fn`` must rebuild the graph from the current parameter values.
    Probes are spread over all parameter tensors (at least one per tensor
    when there are enough probes).
    """
    params = list(params)
    for p in params:
        p.grad = None
    loss = loss_fn()
    loss.backward()
    grads = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]
    rng = np.random.default_rng(seed)
    sizes = np.array([p.size for p in params])
    probes = []
    if n_probes >= len(params):
        probes += [(i, int(rng.integers(sizes[i]))) for i in range(len(params))]
    while len(probes) < n_probes:
        i = int(rng.choice(len(params), p=sizes / sizes.sum()))
        probes.append((i, int(rng.integers(sizes[i]))))
    worst = (-1, -1, 0.0, 0.0)
    max_err = 0.0
    for i, j in probes:
        flat = params[i].data.reshape(-1)
        orig = flat[j]
        flat[j] = orig + step
        up = loss_fn().item()
        flat[j] = orig - step
        down = loss_fn().item()
        flat[j] = orig
        num = (up - down) / (2 * step)
        ana = grads[i].reshape(-1)[j]
        err = relative_error(ana, num)
        if err >= max_err:
            max_err = err
            worst = (i, j, float(ana), float(num))
    for p in params:
        p.grad = None
    return GradCheckResult(max_err, len(probes), worst)
