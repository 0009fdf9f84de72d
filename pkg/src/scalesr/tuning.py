"""Selection of the three factor-dependent knobs: context length, beta_max and F."""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .conservation import ConservationSpec
from .diffusion import NoiseSchedule
from .grid import SRFactors
from .metrics import ensemble_pit, pit_histogram, pitd
from .training import (
    RunConfig, ensemble_for, prepare_experiment, train_deterministic, train_diffusion,
)

log = logging.getLogger(__name__)

U_TAIL_MASS = 0.25
BELL_CENTRE_MASS = 0.3


@dataclass(frozen=True)
class TuneGrid:
    L_candidates: tuple = (1, 2, 3, 4)
    beta_max_candidates: tuple = (1e-2, 2e-2, 3.5e-2)
    F_candidates: tuple = ()

    def __post_init__(self):
        for name in ("L_candidates", "beta_max_candidates"):
            vals = tuple(getattr(self, name))
            object.__setattr__(self, name, vals)
            if not vals:
                raise ValueError(f"{name} must be nonempty")
            if list(vals) != sorted(vals) or len(set(vals)) != len(vals):
                raise ValueError(f"{name} must be strictly ascending")
        object.__setattr__(self, "F_candidates", tuple(self.F_candidates))

    def to_dict(self):
        return {"L_candidates": list(self.L_candidates),
                "beta_max_candidates": list(self.beta_max_candidates),
                "F_candidates": [s.to_dict() for s in self.F_candidates]}

    @classmethod
    def from_dict(cls, d):
        return cls(tuple(d.get("L_candidates", cls.L_candidates)),
                   tuple(d.get("beta_max_candidates", cls.beta_max_candidates)),
                   tuple(ConservationSpec.from_dict(s) for s in d.get("F_candidates", ())))


@dataclass
class TuneResult:
    factors: SRFactors
    L: int
    beta_max: float
    spec: ConservationSpec
    scores: dict = field(default_factory=dict)

    @property
    def attention_time(self):
        return self.factors.T * self.L

    def to_dict(self):
        return {"factors": str(self.factors), "L": self.L, "A_T": self.attention_time,
                "beta_max": self.beta_max, "conservation": self.spec.to_dict(),
                "scores": self.scores}


# ------------------------------------------------------------------ selection rules


def elbow_select_L(candidates, scores, rel_gain_threshold=0.02):
    """Smallest candidate whose successor improves the (lower-is-better) score by
    no more than ``rel_gain_threshold`` relative to it."""
    if len(candidates) != len(scores) or not candidates:
        raise ValueError("need one score per candidate")
    for i in range(len(candidates) - 1):
        cur, nxt = scores[i], scores[i + 1]
        gain = (cur - nxt) / abs(cur) if cur else 0.0
        if gain <= rel_gain_threshold:
            return candidates[i]
    return candidates[-1]


def tune_beta_max(candidates, pitds):
    """Candidate with the lowest PITD; ties go to the smaller beta_max."""
    if len(candidates) != len(pitds) or not candidates:
        raise ValueError("need one PITD per candidate")
    order = sorted(range(len(candidates)), key=lambda i: (pitds[i], candidates[i]))
    return candidates[order[0]]


def classify_pit_shape(hist):
    """``"U"``, ``"bell"`` or ``"flat"`` from a 10-bin PIT histogram of proportions."""
    h = np.asarray(hist, dtype=np.float64)
    if h.size != 10:
        raise ValueError("expected a 10-bin histogram")
    h = h / h.sum()
    if h[0] + h[-1] > U_TAIL_MASS:
        return "U"
    if h[4] + h[5] > BELL_CENTRE_MASS:
        return "bell"
    return "flat"


def tune_F(current: ConservationSpec, current_hist, candidates):
    """Move the F exponent against the diagnosed dispersion error.

    ``candidates`` is a list of ``(spec, pitd)``. A U-shaped PIT
    (underdispersion) admits only faster-growing F (larger exponent), a
    bell shape only slower-growing ones; the admitted candidate with the
    lowest PITD wins. A flat PIT, or no admissible candidate, keeps
    ``current``.
    """
    shape = classify_pit_shape(current_hist)
    if shape == "flat":
        return current
    if shape == "U":
        allowed = [(s, p) for s, p in candidates if s.exponent > current.exponent]
    else:
        allowed = [(s, p) for s, p in candidates if s.exponent < current.exponent]
    if not allowed:
        return current
    return min(allowed, key=lambda sp: (sp[1], sp[0].alpha))[0]


# ------------------------------------------------------------------ published settings


@dataclass(frozen=True)
class HyperParams:
    attention_time: int
    L: int
    beta_max: float
    spec: ConservationSpec


def table2_fixtures():
    """Published per-factor settings; ``L`` is derived as ``A_T / T``."""
    rows = [
        ((1, 3), 12, 1.5e-2, ConservationSpec.sqrt(1e-2)),
        ((10, 1), 10, 1e-2, ConservationSpec.sqrt(1e-2)),
        ((10, 3), 15, 2e-2, ConservationSpec.linear(2e-2)),
        ((25, 6), 18, 3.5e-2, ConservationSpec.linear(4e-2)),
    ]
    out = []
    for (s, t), a_t, beta, spec in rows:
        if a_t % t:
            raise AssertionError("attention time must be a multiple of T")
        out.append((SRFactors(s, t), HyperParams(a_t, a_t // t, beta, spec)))
    return out


# ------------------------------------------------------------------ sweeps


def _val_pit(det, dif, exp, rc, K, seed):
    members, _ = ensemble_for(det, dif, exp.val, rc, K, seed)
    u = ensemble_pit(members, exp.val.target.double().numpy(), np.random.default_rng(seed))
    return pitd(u), pit_histogram(u)


def run_sweep(base: RunConfig, grid: TuneGrid, out_dir=None, K=None, seed=0,
              rel_gain_threshold=0.02):
    """Tune L, then beta_max, then F for one factor pair, retraining per candidate.

    L is scored by validation MSE of the mean network; beta_max and F by the
    validation-ensemble PITD. Writes ``manifest.json`` when ``out_dir`` is set.
    """
    K = K or base.members
    f = base.sr
    scores = {"L": {}, "beta_max": {}, "F": {}}
    det_by_L = {}
    for L in grid.L_candidates:
        rc = base.merged({"context_len": L, "deterministic_only": True})
        exp = prepare_experiment(rc)
        det, rec = train_deterministic(exp)
        scores["L"][L] = rec.best_val
        det_by_L[L] = (det, exp)
        log.info("%s L=%d val MSE %.4e", f, L, rec.best_val)
    L = elbow_select_L(list(grid.L_candidates), [scores["L"][c] for c in grid.L_candidates],
                       rel_gain_threshold)
    det, exp = det_by_L[L]

    hist_by_beta = {}
    for b in grid.beta_max_candidates:
        sched = NoiseSchedule(base.schedule.J, base.schedule.beta_min, b)
        rc = base.merged({"context_len": L, "schedule": sched.to_dict()})
        exp.cfg = rc
        dif, _ = train_diffusion(exp, det, schedule=sched)
        score, hist = _val_pit(det, dif, exp, rc, K, seed)
        scores["beta_max"][b] = score
        hist_by_beta[b] = (hist, dif, rc)
        log.info("%s beta_max=%.3g PITD %.4f", f, b, score)
    beta = tune_beta_max(list(grid.beta_max_candidates),
                         [scores["beta_max"][b] for b in grid.beta_max_candidates])
    hist, dif, rc = hist_by_beta[beta]

    spec = base.conservation
    if grid.F_candidates:
        cands = []
        for cand in grid.F_candidates:
            rc_f = rc.merged({"conservation": cand.to_dict()})
            exp.cfg = rc_f
            det_f, _ = train_deterministic(exp, spec=cand)
            dif_f, _ = train_diffusion(exp, det_f, spec=cand)
            score, _ = _val_pit(det_f, dif_f, exp, rc_f, K, seed)
            scores["F"][cand.label()] = score
            cands.append((cand, score))
        spec = tune_F(base.conservation, hist, cands)

    result = TuneResult(f, L, beta, spec, {k: {str(c): v for c, v in d.items()}
                                           for k, d in scores.items()})
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        manifest = {"base_config": base.to_dict(), "grid": grid.to_dict(),
                    "members": K, "seed": seed, "result": result.to_dict()}
        (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return result
