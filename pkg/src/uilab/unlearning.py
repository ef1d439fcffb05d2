"""Gradient-ascent unlearning of a single sample."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from uilab.errors import NumericalError, ValidationError
from uilab.model import ParamVector, Sample, grad_params

METHODS = ("ga", "masked_ga")


@dataclass(frozen=True)
class UnlearnConfig:
    method: str = "ga"
    eta: float = 0.05
    steps: int = 1
    mask_keep_frac: float = 0.5

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValidationError(f"unknown unlearning method {self.method!r}")
        if not self.eta >= 0:
            raise ValidationError("eta must be non-negative")
        if self.steps < 0:
            raise ValidationError("steps must be >= 0")
        if not 0.0 < self.mask_keep_frac <= 1.0:
            raise ValidationError("mask_keep_frac must lie in (0, 1]")


def _ascend(theta_o: ParamVector, x: Sample, eta: float, steps: int, mask=None) -> ParamVector:
    values = theta_o.values.copy()
    for step in range(steps):
        g = grad_params(theta_o.with_values(values), x)
        if not np.all(np.isfinite(g)):
            raise NumericalError(f"non-finite unlearning gradient at step {step}")
        if mask is None:
            values = values + eta * g
        else:
            values[mask] = values[mask] + eta * g[mask]
    return theta_o.with_values(values)


def ga_unlearn(theta_o: ParamVector, x: Sample, cfg: UnlearnConfig) -> ParamVector:
    """theta <- theta + eta * grad L(theta; x), ``cfg.steps`` times."""
    return _ascend(theta_o, x, cfg.eta, cfg.steps)


def saliency_mask(grad: np.ndarray, keep_frac: float) -> np.ndarray:
    """Boolean mask of the ceil(keep_frac * n) largest |grad| entries.

    Ties at the threshold go to the lower flat index.
    """
    n = grad.size
    k = int(np.ceil(keep_frac * n - 1e-12))
    # stable sort on -|g| keeps lower indices first among equals
    order = np.argsort(-np.abs(grad), kind="stable")
    mask = np.zeros(n, dtype=bool)
    mask[order[:k]] = True
    return mask


def masked_ga_unlearn(theta_o: ParamVector, x: Sample, cfg: UnlearnConfig) -> ParamVector:
    if cfg.mask_keep_frac >= 1.0:
        return ga_unlearn(theta_o, x, cfg)
    mask = saliency_mask(grad_params(theta_o, x), cfg.mask_keep_frac)
    return _ascend(theta_o, x, cfg.eta, cfg.steps, mask)


def unlearn(theta_o: ParamVector, x: Sample, cfg: UnlearnConfig) -> ParamVector:
    if cfg.method == "ga":
        return ga_unlearn(theta_o, x, cfg)
    return masked_ga_unlearn(theta_o, x, cfg)


def diffparm(theta_u, theta_o) -> np.ndarray:
    u = theta_u.values if isinstance(theta_u, ParamVector) else np.asarray(theta_u, dtype=np.float64)
    o = theta_o.values if isinstance(theta_o, ParamVector) else np.asarray(theta_o, dtype=np.float64)
    if u.shape != o.shape:
        raise ValidationError(f"diffparm length mismatch: {u.shape} vs {o.shape}")
    return u - o
