"""Central-difference gradient checking for float64 torch computations."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Mapping

import numpy as np
import torch


@dataclass
class GradCheckResult:
    max_rel_error: float
    per_array: dict[str, float]
    coords_checked: dict[str, int]

    def passed(self, tol: float = 1e-4) -> bool:
        return self.max_rel_error < tol


def grad_check(fn: Callable[[], torch.Tensor], tensors: Mapping[str, torch.Tensor], step: float = 1e-5,
               n_coords: int = 200, seed: int = 0, atol: float = 1e-5,
               analytic: Mapping[str, torch.Tensor] | None = None) -> GradCheckResult:
    """Compare backprop gradients of the scalar ``fn()`` against central differences.

    ``tensors`` are the leaves to check (float64, requires_grad). Up to
    ``n_coords`` coordinates of each are sampled (all of them if the array
    is smaller). The relative error of a coordinate is
    ``|a - n| / max(|a|, |n|, atol)``; ``atol`` keeps coordinates whose true
    gradient is zero from being judged on rounding noise alone.
    ``analytic`` overrides the backprop gradients (used for fault injection).
    """
    for name, t in tensors.items():
        if t.dtype != torch.float64:
            raise TypeError(f"{name}: gradient checks need float64, got {t.dtype}")
    if analytic is None:
        out = fn()
        grads = torch.autograd.grad(out, list(tensors.values()), allow_unused=True)
        analytic = {k: (g if g is not None else torch.zeros_like(t))
                    for (k, t), g in zip(tensors.items(), grads)}
    rng = np.random.default_rng(seed)
    per_array, counts = {}, {}
    with torch.no_grad():
        for name, t in tensors.items():
            flat = t.view(-1)
            n = flat.numel()
            idx = np.arange(n) if n <= n_coords else rng.choice(n, size=n_coords, replace=False)
            a_flat = analytic[name].reshape(-1)
            worst = 0.0
            for i in idx:
                orig = flat[i].item()
                flat[i] = orig + step
                f_plus = fn().item()
                flat[i] = orig - step
                f_minus = fn().item()
                flat[i] = orig
                num = (f_plus - f_minus) / (2 * step)
                a = a_flat[i].item()
                err = abs(a - num) / max(abs(a), abs(num), atol)
                worst = max(worst, err)
            per_array[name] = worst
            counts[name] = len(idx)
    return GradCheckResult(max(per_array.values()) if per_array else 0.0, per_array, counts)
