"""Simulated measurement noise."""

from __future__ import annotations

import numpy as np

from .uncertainty import NoiseModel

__all__ = ["constraint_noise_model", "inject_constraint_noise", "inject_gradient_noise"]


def inject_gradient_noise(true_grad, kappa_row, sigma: float, rng) -> np.ndarray:
    """Add ``sigma * kappa_i * U[-1, 1]`` to each derivative."""
    if sigma < 0:
        raise ValueError("sigma must be nonnegative")
    true_grad = np.asarray(true_grad, dtype=float)
    if sigma == 0:
        return true_grad.copy()
    return true_grad + sigma * np.asarray(kappa_row, dtype=float) * rng.uniform(-1.0, 1.0, true_grad.shape)


def inject_constraint_noise(true_g, sigma_g: float, eps_bar, rng) -> np.ndarray:
    """Add ``N(0, (sigma_g * eps_bar_j)^2)`` noise to each constraint value."""
    if sigma_g < 0:
        raise ValueError("sigma_g must be nonnegative")
    true_g = np.asarray(true_g, dtype=float)
    if sigma_g == 0:
        return true_g.copy()
    return true_g + sigma_g * np.asarray(eps_bar, dtype=float) * rng.standard_normal(true_g.shape)


def constraint_noise_model(sigma_g: float, eps_bar, **kw):
    """Noise description matching :func:`inject_constraint_noise` (three-sigma
    lower bound, shrinking with the square root of the repeat count)."""
    return NoiseModel.gaussian(sigma_g, eps_bar, **kw)
