"""Central finite-difference gradient checking."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

FD_STEP = 1e-5


@dataclass
class GradReport:
    name: str
    max_rel_err: float
    max_abs_err: float
    n_checked: int
    tolerance: float

    @property
    def passed(self) -> bool:
        return bool(self.max_rel_err < self.tolerance)

    def __str__(self):
        status = "PASS" if self.passed else "FAIL"
        return (f"[{status}] {self.name}: max rel err {self.max_rel_err:.3e} "
                f"(tol {self.tolerance:.0e}, {self.n_checked} entries)")


def relative_error(analytic, numeric, floor=1e-3):
    """Elementwise |a - n| / max(|a|, |n|, floor).

    Central differences at step 1e-5 carry round-off near 1e-10 for O(1)
    objectives, so entries below ``floor`` are judged on absolute error
    scaled by ``floor`` instead.
    """
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


def numeric_grad(f, x: np.ndarray, indices=None, step=FD_STEP) -> np.ndarray:
    """Central differences of scalar ``f`` w.r.t. ``x`` (perturbed in place, then restored)."""
    flat = x.reshape(-1)
    indices = np.arange(flat.size) if indices is None else np.asarray(indices)
    out = np.zeros(len(indices))
    for n, idx in enumerate(indices):
        orig = flat[idx]
        flat[idx] = orig + step
        fp = f()
        flat[idx] = orig - step
        fm = f()
        flat[idx] = orig
        out[n] = (fp - fm) / (2 * step)
    return out


def grad_check(f, x: np.ndarray, analytic: np.ndarray, tolerance=1e-6, name="op",
               max_entries=None, rng=None, step=FD_STEP, floor=1e-3) -> GradReport:
    """Compare ``analytic`` (d f / d x) with central differences.

    ``f`` is a zero-argument callable reading ``x``, which is perturbed in
    place; it must be f64. With ``max_entries`` a random subset is checked.
    """
    if x.dtype != np.float64:
        raise TypeError("grad_check runs in f64 verification mode")
    size = x.size
    if max_entries is not None and size > max_entries:
        rng = rng or np.random.default_rng(0)
        indices = np.sort(rng.choice(size, size=max_entries, replace=False))
    else:
        indices = np.arange(size)
    num = numeric_grad(f, x, indices, step)
    ana = np.asarray(analytic, dtype=np.float64).reshape(-1)[indices]
    rel = relative_error(ana, num, floor)
    return GradReport(name, float(rel.max(initial=0.0)), float(np.abs(ana - num).max(initial=0.0)),
                      len(indices), tolerance)


def check_layer(forward, backward, x: np.ndarray, tolerance=1e-6, name="layer", seed=0, **kw) -> GradReport:
    """Check an op by projecting its output on a fixed random tensor.

    ``forward(x) -> y`` and ``backward(grad_y) -> grad_x`` where backward
    refers to the most recent forward at the unperturbed ``x``.
    """
    rng = np.random.default_rng(seed)
    y = forward(x)
    proj = rng.standard_normal(y.shape)
    analytic = backward(proj)
    return grad_check(lambda: float(np.sum(forward(x) * proj)), x, analytic, tolerance, name, **kw)
