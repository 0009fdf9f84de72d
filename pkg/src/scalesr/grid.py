"""Grid geometry: block-average coarsening and nearest / bicubic upsampling.

Fields are plain 2-D ``numpy`` arrays ``(H, W)``; sequences are ``(T, H, W)``.
Coarsening accumulates in float64 regardless of the input dtype so that the
mass identity ``S**2 * T * sum(lr) == sum(hr)`` holds to rounding error.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

KEYS_A = -0.5


class DimensionError(ValueError):
    """Raised when a field shape is incompatible with the scale factors."""


@dataclass(frozen=True)
class SRFactors:
    """Spatial factor ``S`` and temporal factor ``T``."""

    S: int
    T: int

    def __post_init__(self):
        if int(self.S) != self.S or self.S < 1:
            raise ValueError(f"S must be a positive integer, got {self.S!r}")
        if int(self.T) != self.T or self.T < 1:
            raise ValueError(f"T must be a positive integer, got {self.T!r}")

    def lr_shape(self, hr_shape):
        h, w = hr_shape[-2:]
        if h % self.S or w % self.S:
            raise DimensionError(f"S={self.S} does not divide HR shape {(h, w)}")
        return h // self.S, w // self.S

    def hr_shape(self, lr_shape):
        h, w = lr_shape[-2:]
        return h * self.S, w * self.S

    @classmethod
    def parse(cls, text: str) -> "SRFactors":
        """Parse ``"SxT"`` (e.g. ``"10x3"``)."""
        try:
            s, t = text.lower().split("x")
            return cls(int(s), int(t))
        except ValueError as exc:
            raise ValueError(f"factors must look like SxT, got {text!r}") from exc

    def __str__(self):
        return f"{self.S}x{self.T}"


def _as_field(x) -> np.ndarray:
    x = np.asarray(x)
    if x.ndim != 2:
        raise DimensionError(f"expected a 2-D field, got shape {x.shape}")
    if x.shape[0] == 0 or x.shape[1] == 0:
        raise DimensionError("field must be non-empty")
    return x


def coarsen_spatial(hr, f: SRFactors) -> np.ndarray:
    """Mean over non-overlapping ``S x S`` blocks. Leading axes are kept."""
    hr = np.asarray(hr)
    h, w = f.lr_shape(hr.shape)
    blocks = hr.astype(np.float64, copy=False).reshape(*hr.shape[:-2], h, f.S, w, f.S)
    return blocks.mean(axis=(-3, -1))


def coarsen_spacetime(hr_seq, f: SRFactors) -> np.ndarray:
    """Average ``T`` consecutive HR frames and their ``S x S`` blocks into one LR frame."""
    hr_seq = np.asarray(hr_seq)
    if hr_seq.ndim != 3 or hr_seq.shape[0] != f.T:
        raise DimensionError(
            f"expected a sequence of T={f.T} frames, got shape {hr_seq.shape}")
    return coarsen_spatial(hr_seq, f).mean(axis=0)


def coarsen_blocks(hr_seq, f: SRFactors) -> np.ndarray:
    """Coarsen a long ``(N*T, H, W)`` sequence into ``N`` LR frames.

    Trailing frames that do not fill a full temporal block are dropped.
    """
    hr_seq = np.asarray(hr_seq)
    n = hr_seq.shape[0] // f.T
    lr = coarsen_spatial(hr_seq[: n * f.T], f)
    return lr.reshape(n, f.T, *lr.shape[-2:]).mean(axis=1)


def upsample_nearest(lr, f: SRFactors) -> np.ndarray:
    """Replicate each LR pixel over its ``S x S`` block (leading axes kept)."""
    lr = np.asarray(lr)
    return np.repeat(np.repeat(lr, f.S, axis=-2), f.S, axis=-1)


def keys_kernel(x, a: float = KEYS_A):
    x = np.abs(np.asarray(x, dtype=np.float64))
    out = np.zeros_like(x)
    near = x <= 1
    far = (x > 1) & (x < 2)
    out[near] = (a + 2) * x[near] ** 3 - (a + 3) * x[near] ** 2 + 1
    out[far] = a * x[far] ** 3 - 5 * a * x[far] ** 2 + 8 * a * x[far] - 4 * a
    return out


@lru_cache(maxsize=64)
def bicubic_matrix(n_in: int, scale: int) -> np.ndarray:
    """Dense ``(n_in*scale, n_in)`` 1-D cubic-convolution resampling matrix.

    Output pixel centres map to input coordinates ``(i + 0.5) / scale - 0.5``;
    taps falling outside ``[0, n_in)`` are clamped onto the edge pixel
    (replicate boundary).
    """
    n_out = n_in * scale
    src = (np.arange(n_out) + 0.5) / scale - 0.5
    base = np.floor(src).astype(int)
    mat = np.zeros((n_out, n_in))
    rows = np.arange(n_out)
    for off in range(-1, 3):
        idx = base + off
        weight = keys_kernel(src - idx)
        np.add.at(mat, (rows, np.clip(idx, 0, n_in - 1)), weight)
    mat.setflags(write=False)
    return mat


def upsample_bicubic(lr, f: SRFactors, clamp: bool = True) -> np.ndarray:
    """Separable Keys bicubic upsampling (a = -0.5), leading axes kept.

    With ``clamp`` the result is floored at 0 to remove negative overshoot.
    """
    lr = np.asarray(lr, dtype=np.float64)
    if f.S == 1:
        out = lr.copy()
    else:
        ry = bicubic_matrix(lr.shape[-2], f.S)
        rx = bicubic_matrix(lr.shape[-1], f.S)
        out = ry @ lr @ rx.T
    if clamp:
        np.maximum(out, 0.0, out=out)
    return out
