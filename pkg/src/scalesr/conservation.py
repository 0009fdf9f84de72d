"""Mass-conservation transform: thresholded power function then global rescale.

All functions accept numpy arrays or torch tensors. A prediction is shaped
``(..., T, H, W)`` and the matching LR frame ``(..., h, w)``; leading axes
are treated as a batch, each item receiving its own scalar ratio.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
import torch

from .grid import SRFactors

FAMILIES = ("power", "identity")


class ZeroMassError(ArithmeticError):
    """The thresholded prediction carries no mass, so the ratio is undefined."""


@dataclass(frozen=True)
class ConservationSpec:
    family: str = "identity"
    exponent: float = 1.0
    alpha: float = 0.0
    enabled: bool = True
    activation_epoch: int = 0

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown F family {self.family!r}")
        if self.family == "identity" and self.exponent != 1.0:
            raise ValueError("identity family requires exponent 1")
        if not self.exponent > 0:
            raise ValueError("exponent must be positive")
        if self.alpha < 0:
            raise ValueError("threshold alpha must be nonnegative")

    @classmethod
    def sqrt(cls, alpha=1e-2, **kw):
        return cls("power", 0.5, alpha, **kw)

    @classmethod
    def linear(cls, alpha=0.0, **kw):
        return cls("identity", 1.0, alpha, **kw)

    def label(self):
        f = "x" if self.family == "identity" else f"x^{self.exponent:g}"
        return f"{f}, alpha={self.alpha:g}"

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def _is_torch(x):
    return isinstance(x, torch.Tensor)


def relu_threshold(x, alpha):
    """``max(0, x - alpha)``."""
    if _is_torch(x):
        return torch.clamp(x - alpha, min=0.0)
    return np.maximum(np.asarray(x) - alpha, 0.0)


def _power(x, p):
    if p == 1.0:
        return x
    if _is_torch(x):
        # the gradient of x**p is unbounded at 0; route zeros around the power
        pos = x > 0
        safe = torch.where(pos, x, torch.ones_like(x))
        return torch.where(pos, safe ** p, torch.zeros_like(x))
    return np.power(x, p)


def apply_F(raw, spec: ConservationSpec):
    """Elementwise ``r_alpha -> x**exponent -> r_alpha``; result is nonnegative."""
    x = relu_threshold(raw, spec.alpha)
    x = _power(x, spec.exponent)
    return relu_threshold(x, spec.alpha)


def _sum_last(x, k, keep=False):
    axes = tuple(range(-k, 0))
    if _is_torch(x):
        return x.sum(dim=axes, keepdim=keep)
    return np.sum(x, axis=axes, keepdims=keep, dtype=np.float64)


def target_mass(lr_frame, f: SRFactors):
    """LR-implied HR total ``S**2 * T * sum(lr)`` per batch item."""
    return f.S**2 * f.T * _sum_last(lr_frame, 2)


def mass_conserve(pred, lr_frame, f: SRFactors):
    """Rescale ``pred`` by a single ratio per item so its total equals the LR-implied mass.

    Raises ``ZeroMassError`` when an item's prediction sums to exactly zero.
    Batched callers that prefer a silent fallback should use
    :func:`conserve_pipeline`.
    """
    denom = _sum_last(pred, 3)
    zero = denom == 0
    if bool(zero.any() if _is_torch(zero) else np.any(zero)):
        raise ZeroMassError("prediction has zero total mass")
    rho = target_mass(lr_frame, f) / denom
    return pred * rho[..., None, None, None]


def _conserve_or_keep(x, lr_frame, f):
    denom = _sum_last(x, 3)
    num = target_mass(lr_frame, f)
    if _is_torch(x):
        ok = denom != 0
        rho = torch.where(ok, num / torch.where(ok, denom, torch.ones_like(denom)),
                          torch.ones_like(denom))
    else:
        ok = denom != 0
        rho = np.where(ok, num / np.where(ok, denom, 1.0), 1.0)
    return x * rho[..., None, None, None]


def conserve_pipeline(raw, lr_frame, f: SRFactors, spec: ConservationSpec, epoch=None):
    """``MC(F(raw), lr)`` with the zero-mass fallback and the activation gate.

    Before ``spec.activation_epoch`` (when ``epoch`` is given) the raw output
    passes through untouched. A disabled spec applies only the thresholded
    transform, and only when ``alpha > 0``. Items whose transformed mass is
    zero keep the ReLU-only output.
    """
    if epoch is not None and epoch < spec.activation_epoch:
        return raw
    if not spec.enabled:
        return apply_F(raw, spec) if spec.alpha > 0 else raw
    return _conserve_or_keep(apply_F(raw, spec), lr_frame, f)


def is_fallback(raw, spec: ConservationSpec):
    """True (per item) where the transformed prediction has exactly zero mass."""
    return _sum_last(apply_F(raw, spec), 3) == 0
