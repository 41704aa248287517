"""Central finite-difference verification of analytic gradients.

Meant to run on float64 copies of the model: central differences of a
float32 forward are too noisy for the tolerances used in the tests.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable

import numpy as np
import torch

from .errors import ConfigError, NonFiniteError


def finite_difference_check(
    loss_fn: Callable[[], torch.Tensor],
    parameters: Iterable[torch.Tensor],
    eps: float = 1e-5,
    num_coords: int = 200,
    seed: int = 0,
) -> float:
    """Max relative error between autograd and central differences.

    ``loss_fn`` re-evaluates the scalar loss from the current parameter
    values. Coordinates are sampled uniformly over the concatenated
    parameter space; each is perturbed by +-eps in place. The relative error
    uses denominator max(|analytic|, |numeric|, 1e-8).
    """
    if not 1e-6 <= eps <= 1e-3:
        raise ConfigError(f"eps {eps} outside [1e-6, 1e-3]")
    params = [p for p in parameters if p.requires_grad]
    if not params:
        raise ConfigError("no trainable parameters given")

    loss = loss_fn()
    if not bool(torch.isfinite(loss)):
        raise NonFiniteError("loss is not finite at the evaluation point")
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    grads = [
        g if g is not None else torch.zeros_like(p) for g, p in zip(grads, params)
    ]

    sizes = [p.numel() for p in params]
    total = sum(sizes)
    rng = np.random.default_rng(seed)
    coords = rng.choice(total, size=min(num_coords, total), replace=False)

    bounds = np.cumsum([0, *sizes])
    worst = 0.0
    for flat in sorted(int(c) for c in coords):
        pi = int(np.searchsorted(bounds, flat, side="right")) - 1
        local = flat - bounds[pi]
        p = params[pi]
        idx = np.unravel_index(local, p.shape)
        orig = p.data[idx].item()
        with torch.no_grad():
            p.data[idx] = orig + eps
            f_plus = float(loss_fn())
            p.data[idx] = orig - eps
            f_minus = float(loss_fn())
            p.data[idx] = orig
        if not (math.isfinite(f_plus) and math.isfinite(f_minus)):
            raise NonFiniteError(f"loss not finite when probing coordinate {flat}")
        numeric = (f_plus - f_minus) / (2 * eps)
        analytic = grads[pi][idx].item()
        rel = abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-8)
        worst = max(worst, rel)
    return worst
