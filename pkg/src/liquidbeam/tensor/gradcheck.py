"""Central finite-difference oracle for the tape's analytic gradients."""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .core import Tensor, no_grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-12) -> float:
    """Norm-wise relative error ``|a - n| / max(|a|, |n|)``; 0 when both vanish."""
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    scale = max(np.linalg.norm(a), np.linalg.norm(n))
    if scale < floor:
        return 0.0
    return float(np.linalg.norm(a - n) / scale)


def numeric_grad(loss_fn: Callable[[], Tensor], p: Tensor, idx: Sequence[tuple[int, ...]],
                 eps: float = 1e-6) -> np.ndarray:
    out = np.empty(len(idx))
    with no_grad():
        for k, i in enumerate(idx):
            orig = p.data[i]
            p.data[i] = orig + eps
            fp = float(loss_fn().data)
            p.data[i] = orig - eps
            fm = float(loss_fn().data)
            p.data[i] = orig
            out[k] = (fp - fm) / (2 * eps)
    return out


def check_gradients(loss_fn: Callable[[], Tensor], params: dict[str, Tensor], eps: float = 1e-6,
                    max_entries: int | None = None,
                    rng: np.random.Generator | None = None) -> dict[str, float]:
    """Compare backward() against central differences for each named tensor.

    ``max_entries`` caps how many coordinates per tensor are perturbed (sampled
    without replacement); large conv kernels are checked on a random subset.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    for p in params.values():
        p.grad = None
    loss_fn().backward()
    errors = {}
    for name, p in params.items():
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
        flat = np.arange(p.size)
        if max_entries is not None and p.size > max_entries:
            flat = np.sort(rng.choice(p.size, size=max_entries, replace=False))
        idx = [np.unravel_index(f, p.shape) for f in flat]
        num = numeric_grad(loss_fn, p, idx, eps)
        ana = np.array([analytic[i] for i in idx])
        errors[name] = relative_error(ana, num)
    return errors
