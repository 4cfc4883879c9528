"""Central finite-difference checks of recorded gradients."""

from __future__ import annotations

from typing import Callable, Mapping

import numpy as np

from .tensor import Tensor, grad, no_grad

DEFAULT_STEP = 1e-5
DEFAULT_TOLERANCE = 1e-4
# denominator floor, relative to the largest gradient entry across all checked tensors
SCALE_FLOOR = 1e-3


def numerical_gradient(f: Callable[[], Tensor], param: Tensor, h: float = DEFAULT_STEP) -> np.ndarray:
    """d f / d param by central differences; ``f`` must return a scalar tensor."""
    out = np.zeros_like(param.data)
    flat = param.data.reshape(-1)
    g = out.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = f().item()
            flat[i] = orig - h
            fm = f().item()
            flat[i] = orig
            g[i] = (fp - fm) / (2 * h)
    return out


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> float:
    """Max abs difference scaled by the larger gradient magnitude of the tensor.

    ``floor`` bounds the denominator from below so that parameters whose true
    gradient is zero (e.g. key biases under a softmax) are not judged on
    finite-difference round-off alone.
    """
    scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0), floor)
    return float(np.abs(analytic - numeric).max(initial=0.0) / scale)


def check(
    f: Callable[[], Tensor],
    params: Mapping[str, Tensor],
    h: float = DEFAULT_STEP,
    corrupt: str | None = None,
) -> dict[str, float]:
    """Per-parameter relative error between backward and finite differences.

    ``corrupt`` names a parameter whose analytic gradient is deliberately
    perturbed, to exercise the failure path.
    """
    names = list(params)
    tensors = [params[n] for n in names]
    for t in tensors:
        t.requires_grad = True
    loss = f()
    analytic = grad(loss, tensors, allow_unused=True)
    numeric = [numerical_gradient(f, t, h) for t in tensors]
    scale = max(max(np.abs(a).max(), np.abs(n).max()) for a, n in zip(analytic, numeric))
    floor = max(SCALE_FLOOR * scale, 1e-8)
    report = {}
    for name, a, n in zip(names, analytic, numeric):
        if name == corrupt:
            a = a.copy()
            a.reshape(-1)[0] += 0.1 * max(np.abs(a).max(), 1.0)
        report[name] = relative_error(a, n, floor)
    return report


def projected(out: Tensor, rng: np.random.Generator) -> Callable[[Tensor], Tensor]:
    """Fixed random projection turning a tensor output into a scalar objective."""
    from . import ops

    r = Tensor(rng.standard_normal(out.shape).astype(out.dtype))
    return lambda y: ops.sum(ops.mul(y, r))
