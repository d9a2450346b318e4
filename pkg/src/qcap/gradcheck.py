"""Central finite-difference gradient checks."""

from __future__ import annotations

from typing import Callable

import numpy as np

from .tensor import Tensor, no_grad


def relative_error(analytic: float, numeric: float, floor: float = 1e-8) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def check_gradients(loss_fn: Callable[[], Tensor], params: list[Tensor], n_probes: int = 20,
                    h: float = 1e-5, rng: np.random.Generator | None = None) -> list[float]:
    """Compare backprop against central differences at ``n_probes`` random entries.

    ``loss_fn`` must be deterministic and rebuild the graph on every call.
    Returns the relative error of each probe.
    """
    rng = rng or np.random.default_rng(0)
    for p in params:
        p.grad = None
    loss = loss_fn()
    loss.backward()
    analytic = [p.grad.copy() for p in params]

    sizes = np.array([p.size for p in params])
    errors = []
    for _ in range(n_probes):
        which = int(rng.choice(len(params), p=sizes / sizes.sum()))
        p = params[which]
        flat = p.data.reshape(-1)
        i = int(rng.integers(flat.size))
        orig = flat[i]
        with no_grad():
            flat[i] = orig + h
            up = loss_fn().item()
            flat[i] = orig - h
            down = loss_fn().item()
        flat[i] = orig
        numeric = (up - down) / (2 * h)
        errors.append(relative_error(float(analytic[which].reshape(-1)[i]), numeric))
    return errors
