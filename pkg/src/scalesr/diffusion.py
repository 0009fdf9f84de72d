"""Residual DDPM with velocity parameterisation.

Step indices ``j`` run from 1 to ``J``. The closed-form helpers work on numpy
arrays and torch tensors alike; schedule coefficients are float64 scalars.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
import torch

from .conservation import ConservationSpec, conserve_pipeline
from .grid import SRFactors

PREDICTIONS = ("velocity", "noise")


@dataclass(frozen=True)
class NoiseSchedule:
    """Linear variance schedule ``beta_j = beta_min + (j / J)(beta_max - beta_min)``."""

    J: int = 1000
    beta_min: float = 1e-4
    beta_max: float = 2e-2

    def __post_init__(self):
        if self.J < 1:
            raise ValueError("J must be >= 1")
        if not 0 < self.beta_min < self.beta_max < 1:
            raise ValueError("need 0 < beta_min < beta_max < 1")
        j = np.arange(1, self.J + 1, dtype=np.float64)
        betas = self.beta_min + (j / self.J) * (self.beta_max - self.beta_min)
        object.__setattr__(self, "_betas", betas)
        object.__setattr__(self, "_alpha_bars", np.cumprod(1.0 - betas))

    def _idx(self, j):
        j = np.asarray(j)
        if np.any(j < 1) or np.any(j > self.J):
            raise ValueError(f"step index out of range 1..{self.J}")
        return j - 1

    def beta(self, j):
        return self._betas[self._idx(j)]

    def alpha(self, j):
        return 1.0 - self.beta(j)

    def alpha_bar(self, j):
        return self._alpha_bars[self._idx(j)]

    def sigma(self, j):
        return np.sqrt(self.beta(j))

    @property
    def betas(self):
        return self._betas.copy()

    @property
    def alpha_bars(self):
        return self._alpha_bars.copy()

    def to_dict(self):
        return {"J": self.J, "beta_min": self.beta_min, "beta_max": self.beta_max}

    @classmethod
    def from_dict(cls, d):
        return cls(int(d["J"]), float(d["beta_min"]), float(d["beta_max"]))


def _coef(values, like):
    """Broadcast per-item coefficients over the trailing ``(T, H, W)`` axes."""
    values = np.asarray(values, dtype=np.float64)
    if values.ndim:
        values = values.reshape(values.shape + (1,) * 3)
    if isinstance(like, torch.Tensor):
        return torch.as_tensor(values, dtype=like.dtype, device=like.device)
    return values


def forward_noise(r0, j, eps, schedule: NoiseSchedule):
    """``r_j = sqrt(abar_j) r0 + sqrt(1 - abar_j) eps``."""
    ab = schedule.alpha_bar(j)
    return _coef(np.sqrt(ab), r0) * r0 + _coef(np.sqrt(1 - ab), r0) * eps


def velocity_target(r0, eps, j, schedule: NoiseSchedule):
    """``v_j = sqrt(abar_j) eps - sqrt(1 - abar_j) r0``."""
    ab = schedule.alpha_bar(j)
    return _coef(np.sqrt(ab), r0) * eps - _coef(np.sqrt(1 - ab), r0) * r0


def recover_epsilon(v_hat, r_j, j, schedule: NoiseSchedule):
    """Noise estimate implied by a velocity estimate at state ``r_j``."""
    ab = schedule.alpha_bar(j)
    return _coef(np.sqrt(ab), r_j) * v_hat + _coef(np.sqrt(1 - ab), r_j) * r_j


def reverse_step(r_j, eps_hat, j, z, schedule: NoiseSchedule):
    """One ancestral step ``r_j -> r_{j-1}``; the noise term is dropped at ``j == 1``."""
    j_arr = np.asarray(j)
    a = schedule.alpha(j_arr)
    b = schedule.beta(j_arr)
    ab = schedule.alpha_bar(j_arr)
    sigma = np.where(j_arr == 1, 0.0, np.sqrt(b))
    mean = _coef(1 / np.sqrt(a), r_j) * (r_j - _coef(b / np.sqrt(1 - ab), r_j) * eps_hat)
    return mean + _coef(sigma, r_j) * z


def member_noise(seed, sample_id, member, step, shape):
    """Standard normal draw keyed by ``(seed, sample, member, step)``.

    Every call builds its own Philox stream from the key, so results do not
    depend on evaluation order or on how members are batched.
    """
    key = np.random.SeedSequence([int(seed), int(sample_id), int(member), int(step)])
    return np.random.Generator(np.random.Philox(key)).standard_normal(shape)


class Conditioning(NamedTuple):
    """Per-sample conditioning for the residual network (torch tensors)."""

    det_mean: torch.Tensor      # (B, T, H, W)
    bicubic_last: torch.Tensor  # (B, 1, H, W)
    context: torch.Tensor       # (B, L, H, W), bicubic LR context

    def index(self, idx):
        return Conditioning(*(t[idx] for t in self))

    def repeat(self, k):
        return Conditioning(*(t.repeat_interleave(k, dim=0) for t in self))


def residual_scale(model) -> float:
    """Fixed scale the model's residuals are expressed in (1 when absent)."""
    scale = getattr(model, "residual_scale", None)
    return 1.0 if scale is None else float(scale)


def training_loss(model, r0, cond: Conditioning, schedule: NoiseSchedule,
                  generator=None, j=None, prediction="velocity"):
    """Batch mean of the per-sample summed squared target error.

    ``j`` is drawn uniformly from ``1..J`` per sample unless given.
    """
    if prediction not in PREDICTIONS:
        raise ValueError(f"prediction must be one of {PREDICTIONS}")
    b = r0.shape[0]
    if j is None:
        j = torch.randint(1, schedule.J + 1, (b,), generator=generator).numpy()
    j = np.array(np.broadcast_to(np.asarray(j), (b,)))
    r0 = r0 / residual_scale(model)
    eps = torch.randn(r0.shape, generator=generator, dtype=r0.dtype)
    r_j = forward_noise(r0, j, eps, schedule)
    target = velocity_target(r0, eps, j, schedule) if prediction == "velocity" else eps
    out = model(r_j, torch.as_tensor(j, dtype=torch.long), cond)
    return ((out - target) ** 2).sum(dim=(1, 2, 3)).mean()


@torch.no_grad()
def sample_residuals(model, cond: Conditioning, schedule: NoiseSchedule, K: int, seed: int,
                     sample_ids=None, prediction="velocity", batch_size=64):
    """Run the reverse chain for ``K`` members of every sample.

    The chain starts from ``N(0, (1 - abar_J) I)``, the forward marginal at
    step ``J`` with the unknown ``sqrt(abar_J) r0`` term replaced by zero.
    For schedules that fully noise (``abar_J ~ 0``) this is the usual
    standard-normal start; for nearly noiseless ones it keeps the spread
    proportional to the injected noise.

    Returns a float64 array ``(K, B, T, H, W)``.
    """
    if K < 1:
        raise ValueError("K must be >= 1")
    n = cond.det_mean.shape[0]
    shape = tuple(cond.det_mean.shape[1:])
    if sample_ids is None:
        sample_ids = np.arange(n)
    dtype = cond.det_mean.dtype
    jobs = [(i, k) for i in range(n) for k in range(K)]
    out = np.empty((K, n) + shape)
    for start in range(0, len(jobs), batch_size):
        chunk = jobs[start:start + batch_size]
        rows = torch.as_tensor([i for i, _ in chunk])
        c = cond.index(rows)

        def noise(step):
            z = np.stack([member_noise(seed, sample_ids[i], k, step, shape) for i, k in chunk])
            return torch.as_tensor(z, dtype=dtype)

        r = noise(schedule.J + 1) * float(np.sqrt(1.0 - schedule.alpha_bar(schedule.J)))
        for j in range(schedule.J, 0, -1):
            jt = torch.full((len(chunk),), j, dtype=torch.long)
            pred = model(r, jt, c)
            eps_hat = recover_epsilon(pred, r, j, schedule) if prediction == "velocity" else pred
            z = noise(j) if j > 1 else torch.zeros_like(r)
            r = reverse_step(r, eps_hat, j, z, schedule)
        r = r.double().numpy() * residual_scale(model)
        for row, (i, k) in enumerate(chunk):
            out[k, i] = r[row]
    return out


def sample_ensemble(model, cond: Conditioning, lr_last, factors: SRFactors,
                    schedule: NoiseSchedule, K: int, seed: int,
                    spec: ConservationSpec | None = None, sample_ids=None,
                    prediction="velocity", batch_size=64):
    """Members ``D + r_0`` (optionally passed through the conservation transform).

    ``lr_last`` is the ``(B, h, w)`` LR frame the conservation step targets.
    Returns a float64 array ``(K, B, T, H, W)``.
    """
    res = sample_residuals(model, cond, schedule, K, seed, sample_ids, prediction, batch_size)
    members = cond.det_mean.double().numpy()[None] + res
    if spec is not None:
        members = conserve_pipeline(members, np.asarray(lr_last, dtype=np.float64)[None],
                                    factors, spec)
    return members
