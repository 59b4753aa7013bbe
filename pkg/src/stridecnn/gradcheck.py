"""Central finite-difference check of the hand-derived network gradients."""

from dataclasses import dataclass

import numpy as np

from .network import PARAM_NAMES, REDUCED_CONFIG, backward, forward, init_params
from .training import loss, loss_gradient, relative_errors

__all__ = ["GradCheckResult", "gradient_check"]


@dataclass
class GradCheckResult:
    n_coords: int
    worst_rel_error: float
    worst_coord: tuple
    per_tensor: dict
    tolerance: float

    @property
    def passed(self):
        return self.worst_rel_error < self.tolerance


def _rel_error(a, b, floor=1e-8):
    return abs(a - b) / max(abs(a), abs(b), floor)


def gradient_check(rng, config=REDUCED_CONFIG, n_coords=120, h=1e-6, batch=4, tolerance=1e-5):
    """Compare analytic and numerical gradients of the batch training loss.

    The objective is the relative-RMS loss of a random batch under a fixed
    dropout mask, so the check covers the loss gradient, dropout scaling,
    and every layer. Coordinates are spread over all parameter tensors.
    """
    params = init_params(config, rng)
    x = rng.uniform(-1.0, 1.0, size=(batch, config.N0, config.L0))
    # keep-mask with at least one kept node per sample
    mask = (rng.random((batch, config.Nfc)) >= config.p_drop).astype(np.float64)
    mask[:, 0] = 1.0
    y0, _ = forward(params, x, config, dropout=mask)
    # references must be positive whatever the sign of the untrained outputs
    y_ref = np.abs(y0) * rng.uniform(0.7, 1.3, size=batch) + 0.5

    def objective(p):
        y, _ = forward(p, x, config, dropout=mask)
        return loss(relative_errors(y, y_ref))

    y, cache = forward(params, x, config, dropout=mask)
    grads = backward(params, cache, loss_gradient(y, y_ref), config)

    # one coordinate from every tensor, the rest uniformly over all parameters
    sizes = [getattr(params, n).size for n in PARAM_NAMES]
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    total = int(offsets[-1])
    first = [int(offsets[i] + rng.integers(sizes[i])) for i in range(len(PARAM_NAMES))]
    rest = np.setdiff1d(np.arange(total), first)
    extra = rng.choice(rest, size=max(0, min(n_coords, total) - len(first)), replace=False)
    chosen = np.sort(np.concatenate([first, extra]).astype(np.int64))

    worst, worst_coord, per_tensor = 0.0, None, {}
    for flat_global in chosen:
        t = int(np.searchsorted(offsets, flat_global, side="right") - 1)
        name = PARAM_NAMES[t]
        tensor = getattr(params, name)
        idx = np.unravel_index(int(flat_global - offsets[t]), tensor.shape)
        orig = tensor[idx]
        tensor[idx] = orig + h
        f_plus = objective(params)
        tensor[idx] = orig - h
        f_minus = objective(params)
        tensor[idx] = orig
        numeric = (f_plus - f_minus) / (2.0 * h)
        err = _rel_error(float(getattr(grads, name)[idx]), numeric)
        per_tensor[name] = max(per_tensor.get(name, 0.0), err)
        if err >= worst:
            worst, worst_coord = err, (name, tuple(int(i) for i in idx))
    return GradCheckResult(len(chosen), worst, worst_coord, per_tensor, tolerance)
