"""Dense 64-bit numerics shared by every other module.

All functions are pure: they never mutate their inputs and hold no state,
so concurrent read-only use is safe. Inputs and outputs are finite float64
arrays; NaN/Inf anywhere is rejected with :class:`NonFiniteError`.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from . import backend

EPS_NORM = 1e-12


def derive_seed(seed: int, tag: int) -> int:
    """Deterministic sub-seed so one master seed can drive independent generators."""
    return int(np.random.SeedSequence([int(seed), int(tag)]).generate_state(1)[0])


class NonFiniteError(ValueError):
    """An input or intermediate value is NaN or infinite."""


class DegenerateVectorError(ValueError):
    """A vector with (near-)zero norm was given where a direction is required."""


def check_finite(name: str, arr: np.ndarray) -> None:
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"{name} contains non-finite values")


def as_matrix(x, name: str = "matrix") -> np.ndarray:
    """Coerce to a C-contiguous float64 2-D array and validate finiteness."""
    a = np.ascontiguousarray(np.asarray(x, dtype=np.float64))
    if a.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {a.shape}")
    check_finite(name, a)
    return a


def softmax_rows(x) -> np.ndarray:
    """Row-wise softmax with max-subtraction; each output row sums to 1.

    Shift invariant: adding a constant to a row leaves its softmax unchanged.
    """
    a = as_matrix(x, "softmax input")
    if a.shape[1] == 0:
        raise ValueError("softmax_rows needs at least one column")
    return backend.softmax_rows(a)


def l2_normalize(v) -> np.ndarray:
    """Scale a vector to unit L2 norm, preserving direction.

    Raises DegenerateVectorError when the norm is at or below 1e-12;
    the caller decides how to handle that case.
    """
    a = np.asarray(v, dtype=np.float64)
    check_finite("l2_normalize input", a)
    n = float(np.linalg.norm(a))
    if n <= EPS_NORM:
        raise DegenerateVectorError(f"vector norm {n:.3e} is at or below {EPS_NORM:.0e}")
    return a / n


def sgd_step(
    theta: np.ndarray,
    grad: np.ndarray,
    gamma: float,
    momentum_state: np.ndarray,
    mu: float,
) -> tuple[np.ndarray, np.ndarray]:
    """One SGD step with classical (heavy-ball) momentum.

    v' = mu * v + grad;  theta' = theta - gamma * v'.
    With mu = 0 this is plain gradient descent. Returns (theta', v').
    """
    theta = np.asarray(theta, dtype=np.float64)
    grad = np.asarray(grad, dtype=np.float64)
    momentum_state = np.asarray(momentum_state, dtype=np.float64)
    if theta.shape != grad.shape or theta.shape != momentum_state.shape:
        raise ValueError(
            f"shape mismatch: theta {theta.shape}, grad {grad.shape}, momentum {momentum_state.shape}"
        )
    if not gamma > 0:
        raise ValueError(f"learning rate must be positive, got {gamma}")
    if not 0 <= mu < 1:
        raise ValueError(f"momentum coefficient must be in [0, 1), got {mu}")
    check_finite("gradient", grad)
    v = mu * momentum_state + grad
    return theta - gamma * v, v


def finite_diff_grad(f: Callable[[np.ndarray], float], theta, h: float = 1e-6) -> np.ndarray:
    """Central-difference gradient of a scalar function, one coordinate at a time.

    Independent of any analytic gradient path; used as the oracle when
    checking hand-derived gradients.
    """
    theta = np.array(theta, dtype=np.float64, copy=True)
    if not h > 0:
        raise ValueError("step h must be positive")
    grad = np.empty_like(theta)
    flat = theta.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(theta))
        flat[i] = orig - h
        fm = float(f(theta))
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NonFiniteError(f"objective returned a non-finite value at coordinate {i}")
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad


@dataclass
class GradReport:
    """Summary of analytic-vs-numeric gradient agreement.

    Relative error uses max(|analytic|, |numeric|, rel_floor) in the
    denominator so near-zero entries do not blow up the ratio.
    """

    max_abs_err: float
    max_rel_err: float
    per_param: dict[str, tuple[float, float]] = field(default_factory=dict)


def gradient_report(
    analytic: Mapping[str, np.ndarray],
    numeric: Mapping[str, np.ndarray],
    rel_floor: float = 1e-6,
) -> GradReport:
    """Compare named analytic gradients against numeric ones."""
    if set(analytic) != set(numeric):
        raise ValueError("analytic and numeric gradient tables name different parameters")
    per_param: dict[str, tuple[float, float]] = {}
    max_abs = 0.0
    max_rel = 0.0
    for name in sorted(analytic):
        a = np.asarray(analytic[name], dtype=np.float64)
        n = np.asarray(numeric[name], dtype=np.float64)
        if a.shape != n.shape:
            raise ValueError(f"gradient shape mismatch for {name}: {a.shape} vs {n.shape}")
        diff = np.abs(a - n)
        scale = np.maximum(np.maximum(np.abs(a), np.abs(n)), rel_floor)
        abs_err = float(diff.max()) if diff.size else 0.0
        rel_err = float((diff / scale).max()) if diff.size else 0.0
        per_param[name] = (abs_err, rel_err)
        max_abs = max(max_abs, abs_err)
        max_rel = max(max_rel, rel_err)
    return GradReport(max_abs_err=max_abs, max_rel_err=max_rel, per_param=per_param)
