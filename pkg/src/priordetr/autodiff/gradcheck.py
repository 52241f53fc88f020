"""Central-difference gradient oracle."""
from __future__ import annotations

from typing import Callable, Optional, Sequence, Union

import numpy as np

from .tensor import Tensor, no_grad

Inputs = Union[Tensor, np.ndarray, Sequence[Union[Tensor, np.ndarray]]]


def finite_diff_check(
    f: Callable[..., Tensor],
    x: Inputs,
    eps: float = 1e-6,
    params: Sequence[Tensor] = (),
    max_coords: Optional[int] = None,
    seed: int = 0,
) -> float:
    """Max over coordinates of |analytic - numeric| / max(1, |analytic|).

    ``f`` receives the input tensor(s) positionally and returns a scalar
    tensor.  ``eps`` is rounded to the nearest power of two.  ``params`` are extra leaves (e.g. module weights) checked in
    place.  With ``max_coords`` only a seeded random subset of coordinates
    of each checked array is perturbed.
    """
    if not 1e-8 <= eps <= 1e-3:
        raise ValueError(f"eps={eps} outside the usable range [1e-8, 1e-3]")
    # power-of-two step: x +/- eps is exact for moderately sized x
    eps = float(2.0 ** np.round(np.log2(eps)))
    single = isinstance(x, (Tensor, np.ndarray))
    raw = [x] if single else list(x)
    inputs = [
        Tensor(np.array(t.data if isinstance(t, Tensor) else t, dtype=np.float64),
               requires_grad=True)
        for t in raw
    ]
    params = list(params)
    for p in params:
        p.grad = None

    out = f(*inputs)
    if out.data.size != 1:
        raise ValueError(f"f must return a scalar, got shape {out.shape}")
    if not np.isfinite(out.data).all():
        raise FloatingPointError("f returned a non-finite value at the base point")
    out.backward()

    rng = np.random.default_rng(seed)
    worst = 0.0
    for k, leaf in enumerate(inputs + params):
        analytic = leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data)
        flat = leaf.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
        a_flat = analytic.reshape(-1)
        for i in coords:
            orig = flat[i]
            with no_grad():
                flat[i] = orig + eps
                fp = float(f(*inputs).data)
                flat[i] = orig - eps
                fm = float(f(*inputs).data)
            flat[i] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                idx = tuple(int(v) for v in np.unravel_index(i, leaf.shape))
                raise FloatingPointError(
                    f"non-finite value perturbing input {k} at index {idx}"
                )
            numeric = (fp - fm) / (2 * eps)
            a = float(a_flat[i])
            if not np.isfinite(a):
                idx = tuple(int(v) for v in np.unravel_index(i, leaf.shape))
                raise FloatingPointError(
                    f"non-finite analytic gradient for input {k} at index {idx}"
                )
            worst = max(worst, abs(a - numeric) / max(1.0, abs(a)))
    return worst
