"""Analytic-vs-numeric gradient verification.

`grad_map` runs one backward pass and returns named gradients (zeros,
flagged, for parameters the loss never touched). `grad_check` compares
those gradients against central finite differences coordinate by
coordinate and reports the worst relative error and where it lives.
"""

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor

#: below this magnitude, |a - n| is compared absolutely rather than
#: relatively (finite differences lose meaning near zero)
REL_FLOOR = 1e-6


def grad_map(loss: Tensor, params: dict) -> tuple:
    """Backward from `loss`; returns ({name: gradient}, off_path_names).

    Parameters unreachable from the loss get exact zero gradients and
    their names are returned in `off_path` for the caller to inspect.
    """
    loss.backward()
    grads = {}
    off_path = []
    for name, tensor in params.items():
        if tensor.grad is None:
            grads[name] = np.zeros_like(tensor.data)
            off_path.append(name)
        else:
            grads[name] = tensor.grad
    return grads, off_path


@dataclass
class GradCheckReport:
    max_rel_error: float
    worst_param: str
    worst_coord: tuple
    analytic: float
    numeric: float
    n_checked: int
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance

    def __str__(self):
        status = "OK" if self.passed else "FAIL"
        return (f"grad_check {status}: max rel error {self.max_rel_error:.3e} "
                f"at {self.worst_param}{list(self.worst_coord)} "
                f"(analytic {self.analytic:.6e}, numeric {self.numeric:.6e}, "
                f"{self.n_checked} coords, tol {self.tolerance:g})")


def numerical_grad(loss_fn, tensor: Tensor, step: float = 1e-5,
                   coords=None) -> np.ndarray:
    """Central finite differences of `loss_fn()` w.r.t. `tensor`.

    Perturbs the tensor's storage in place and restores it; `coords`
    restricts the check to a subset of flat indices.
    """
    flat = tensor.data.ravel()
    grad = np.zeros_like(flat)
    indices = range(flat.size) if coords is None else coords
    for i in indices:
        original = flat[i]
        flat[i] = original + step
        up = float(loss_fn().data)
        flat[i] = original - step
        down = float(loss_fn().data)
        flat[i] = original
        grad[i] = (up - down) / (2.0 * step)
    return grad.reshape(tensor.data.shape)


def grad_check(loss_fn, params: dict, step: float = 1e-5,
               tolerance: float = 1e-4, max_coords_per_param: int | None = None,
               rng: np.random.Generator | None = None) -> GradCheckReport:
    """Compare analytic gradients with central differences.

    Checks every coordinate of every parameter unless
    `max_coords_per_param` caps them (sampled with `rng`). 64-bit
    parameters and dropout-free loss_fn are the caller's responsibility.
    """
    if any(t.dtype != np.float64 for t in params.values()):
        raise ValueError("grad_check requires 64-bit parameters")
    analytic, _ = grad_map(loss_fn(), params)

    worst = (0.0, "", (), 0.0, 0.0)
    checked = 0
    for name, tensor in params.items():
        size = tensor.data.size
        if max_coords_per_param is not None and size > max_coords_per_param:
            if rng is None:
                raise ValueError("sampled grad_check needs an rng")
            coords = rng.choice(size, size=max_coords_per_param, replace=False)
        else:
            coords = range(size)
        numeric_flat = numerical_grad(loss_fn, tensor, step=step,
                                      coords=coords).ravel()
        analytic_flat = analytic[name].ravel()
        for i in coords:
            a, n = float(analytic_flat[i]), float(numeric_flat[i])
            rel = abs(a - n) / max(abs(a), abs(n), REL_FLOOR)
            checked += 1
            if rel > worst[0]:
                worst = (rel, name,
                         np.unravel_index(i, tensor.data.shape), a, n)
    return GradCheckReport(max_rel_error=worst[0], worst_param=worst[1],
                           worst_coord=worst[2], analytic=worst[3],
                           numeric=worst[4], n_checked=checked,
                           tolerance=tolerance)
