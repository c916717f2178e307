"""Central finite-difference check of analytic gradients."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Mapping

import numpy as np

from ..errors import NumericError

LossFn = Callable[[dict[str, np.ndarray]], tuple[float, dict[str, np.ndarray]]]


@dataclass
class GradCheckReport:
    max_rel_error: float
    per_block: dict[str, float]
    n_checked: int
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance


def grad_check(
    loss_fn: LossFn,
    params: Mapping[str, np.ndarray],
    tolerance: float = 1e-4,
    step: float = 1e-5,
    blocks=None,
    value_fn: Callable[[dict[str, np.ndarray]], float] | None = None,
    max_entries: int | None = None,
    seed: int = 0,
) -> GradCheckReport:
    """Compare ``loss_fn``'s analytic gradients with central differences.

    ``loss_fn(params) -> (value, grads)``. The finite differences are taken
    of ``value_fn`` when given (used where the analytic gradient belongs to
    a different scalar than the reported loss, as with gradient reversal),
    otherwise of the loss value itself.

    The relative error of a block is ``max|a - n| / max(max|a|, max|n|)``
    over the checked entries; blocks whose gradients are both identically
    zero report 0. ``max_entries`` checks a random subset per block.
    """
    params = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
    value, grads = loss_fn(params)
    if not np.isfinite(value):
        raise NumericError("E_NONFINITE", f"loss is {value}")
    f = value_fn or (lambda p: loss_fn(p)[0])
    rng = np.random.default_rng(seed)
    per_block, total = {}, 0
    for name in blocks or params:
        p = params[name]
        flat = p.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = np.sort(rng.choice(flat.size, max_entries, replace=False))
        numeric = np.empty(len(idx))
        for j, i in enumerate(idx):
            orig = flat[i]
            flat[i] = orig + step
            up = f(params)
            flat[i] = orig - step
            down = f(params)
            flat[i] = orig
            if not (np.isfinite(up) and np.isfinite(down)):
                raise NumericError("E_NONFINITE", f"loss non-finite while perturbing {name}[{i}]")
            numeric[j] = (up - down) / (2 * step)
        analytic = np.asarray(grads[name], dtype=np.float64).reshape(-1)[idx]
        if not np.all(np.isfinite(analytic)):
            raise NumericError("E_NONFINITE", f"analytic gradient of {name} is non-finite")
        scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0))
        per_block[name] = 0.0 if scale == 0 else float(np.abs(analytic - numeric).max() / scale)
        total += len(idx)
    return GradCheckReport(max(per_block.values(), default=0.0), per_block, total, tolerance)
