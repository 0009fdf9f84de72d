"""Verification metrics for deterministic and ensemble super-resolution output.

Shapes: a prediction or target is ``(..., T, H, W)``; an ensemble stacks
members on a new leading axis ``(K, ..., T, H, W)``.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2
LOG_FLOOR = 1e-12
METRIC_KEYS = ("mse", "mae", "pe99", "lsd", "emd", "ssim", "pitd", "crps")

REPORT_SCHEMA = {
    "type": "object",
    "properties": {
        **{k: {"type": "number", "minimum": 0} for k in METRIC_KEYS if k != "ssim"},
        "ssim": {"type": "number", "minimum": -1, "maximum": 1},
    },
    "required": list(METRIC_KEYS),
    "additionalProperties": False,
}


def mse(pred, target):
    d = np.asarray(pred, dtype=np.float64) - np.asarray(target, dtype=np.float64)
    return float(np.mean(d * d))


def mae(pred, target):
    d = np.asarray(pred, dtype=np.float64) - np.asarray(target, dtype=np.float64)
    return float(np.mean(np.abs(d)))


def pe99(pred, target, q=99.0):
    """Absolute difference of the 99th percentiles (linear interpolation)."""
    return float(abs(np.percentile(pred, q) - np.percentile(target, q)))


def radial_log_spectrum(frame):
    """Log of the radially averaged 2-D FFT magnitude, unit-width bins.

    The bin of frequency ``(n, m)`` (signed FFT indices) is
    ``round(sqrt(n**2 + m**2))``.
    """
    frame = np.asarray(frame, dtype=np.float64)
    h, w = frame.shape
    mag = np.abs(np.fft.fft2(frame))
    n = np.fft.fftfreq(h, 1.0 / h)
    m = np.fft.fftfreq(w, 1.0 / w)
    radius = np.rint(np.hypot(n[:, None], m[None, :])).astype(int)
    counts = np.bincount(radius.ravel())
    sums = np.bincount(radius.ravel(), weights=mag.ravel())
    keep = counts > 0
    return np.log(np.maximum(sums[keep] / counts[keep], LOG_FLOOR))


def lsd_frame(pred, target):
    a = radial_log_spectrum(pred)
    b = radial_log_spectrum(target)
    return float(np.sqrt(np.mean((a - b) ** 2)))


def lsd(pred, target):
    """Frame-mean log-spectral distance over any leading axes."""
    pred = np.asarray(pred)
    target = np.asarray(target)
    h, w = target.shape[-2:]
    p = pred.reshape(-1, h, w)
    t = target.reshape(-1, h, w)
    return float(np.mean([lsd_frame(a, b) for a, b in zip(p, t)]))


def emd(p, q):
    """1-D Wasserstein-1 distance between two empirical samples.

    Integrates ``|F_p - F_q|`` over the merged support, so unequal sizes work.
    """
    p = np.sort(np.asarray(p, dtype=np.float64).ravel())
    q = np.sort(np.asarray(q, dtype=np.float64).ravel())
    if p.size == q.size:
        return float(np.mean(np.abs(p - q)))
    grid = np.concatenate([p, q])
    grid.sort(kind="mergesort")
    deltas = np.diff(grid)
    fp = np.searchsorted(p, grid[:-1], side="right") / p.size
    fq = np.searchsorted(q, grid[:-1], side="right") / q.size
    return float(np.sum(np.abs(fp - fq) * deltas))


def ssim_frame(pred, target, c1=SSIM_C1, c2=SSIM_C2):
    """SSIM from global frame moments (no sliding window)."""
    x = np.asarray(pred, dtype=np.float64).ravel()
    y = np.asarray(target, dtype=np.float64).ravel()
    mx, my = x.mean(), y.mean()
    vx, vy = x.var(), y.var()
    cov = np.mean((x - mx) * (y - my))
    return float((2 * mx * my + c1) * (2 * cov + c2) / ((mx**2 + my**2 + c1) * (vx + vy + c2)))


def ssim(pred, target):
    """Mean per-frame SSIM over any leading axes."""
    pred = np.asarray(pred)
    target = np.asarray(target)
    h, w = target.shape[-2:]
    return float(np.mean([ssim_frame(a, b) for a, b in
                          zip(pred.reshape(-1, h, w), target.reshape(-1, h, w))]))


def pit_values(pool, targets, rng):
    """Randomised PIT of each target value under the empirical CDF of ``pool``.

    ``u = F(y-) + V * (F(y) - F(y-))`` with ``V ~ U(0, 1)``, which keeps the
    transform uniform when the pool has atoms (e.g. exact zeros).
    """
    pool = np.sort(np.asarray(pool, dtype=np.float64).ravel())
    y = np.asarray(targets, dtype=np.float64).ravel()
    lo = np.searchsorted(pool, y, side="left") / pool.size
    hi = np.searchsorted(pool, y, side="right") / pool.size
    return lo + rng.random(y.size) * (hi - lo)


def ensemble_pit(members, target, rng):
    """PIT values per target frame, each pooled over that frame in every member.

    ``members`` is ``(K, ..., H, W)`` and ``target`` is ``(..., H, W)``.
    """
    members = np.asarray(members)
    target = np.asarray(target)
    k = members.shape[0]
    h, w = target.shape[-2:]
    m = members.reshape(k, -1, h, w)
    t = target.reshape(-1, h, w)
    return np.concatenate([pit_values(m[:, i], t[i], rng) for i in range(t.shape[0])])


def pitd(u):
    """RMS deviation of sorted PIT values from uniform order statistics."""
    u = np.sort(np.asarray(u, dtype=np.float64).ravel())
    n = u.size
    if n == 0:
        raise ValueError("pitd needs at least one value")
    expected = (np.arange(1, n + 1) - 0.5) / n
    return float(np.sqrt(np.mean((u - expected) ** 2)))


def pit_histogram(u, bins=10):
    counts, _ = np.histogram(np.asarray(u).ravel(), bins=bins, range=(0.0, 1.0))
    return counts / max(counts.sum(), 1)


def crps_ensemble(members, y):
    """Exact CRPS of the empirical member CDF, elementwise over ``y``.

    Uses ``E|X - y| - 0.5 E|X - X'|`` with the V-statistic spread term,
    which equals the integral of ``(F(t) - 1{t >= y})**2`` for a step CDF.
    """
    x = np.sort(np.asarray(members, dtype=np.float64), axis=0)
    y = np.asarray(y, dtype=np.float64)
    k = x.shape[0]
    skill = np.mean(np.abs(x - y[None]), axis=0)
    weights = (2 * np.arange(1, k + 1) - k - 1).reshape((k,) + (1,) * y.ndim)
    spread = 2.0 * np.sum(weights * x, axis=0) / k**2
    return skill - 0.5 * spread


def crps(members, target):
    """Pixel-mean ensemble CRPS."""
    return float(np.mean(crps_ensemble(members, target)))


@dataclass
class EnsembleForecast:
    members: np.ndarray
    det_mean: np.ndarray
    target: np.ndarray

    def __post_init__(self):
        self.members = np.asarray(self.members)
        self.target = np.asarray(self.target)
        self.det_mean = np.asarray(self.det_mean)
        if self.members.ndim != self.target.ndim + 1:
            raise ValueError("members need one extra leading axis over target")
        if self.members.shape[1:] != self.target.shape or self.det_mean.shape != self.target.shape:
            raise ValueError("ensemble, mean and target shapes differ")
        if self.members.shape[0] < 1:
            raise ValueError("ensemble needs at least one member")

    @property
    def K(self):
        return self.members.shape[0]

    @classmethod
    def deterministic(cls, pred, target):
        pred = np.asarray(pred)
        return cls(pred[None], pred, target)


@dataclass
class MetricReport:
    mse: float
    mae: float
    pe99: float
    lsd: float
    emd: float
    ssim: float
    pitd: float
    crps: float
    extras: dict = field(default_factory=dict, repr=False, compare=False)

    def to_dict(self):
        d = asdict(self)
        d.pop("extras")
        return {k: float(d[k]) for k in METRIC_KEYS}

    def to_json(self):
        return json.dumps(self.to_dict())

    def denormalized(self, cap):
        """Same report in physical units (``mse`` scales with ``cap**2``)."""
        d = self.to_dict()
        d["mse"] *= cap**2
        for k in ("mae", "pe99", "emd", "crps"):
            d[k] *= cap
        return MetricReport(**d)


def evaluate(ens: EnsembleForecast, seed=0) -> MetricReport:
    """Score an ensemble.

    MSE and MAE score the ensemble-mean point forecast. The realism metrics
    (99th PE, LSD, EMD, SSIM) score each member against the target and are
    averaged over members. PITD and CRPS use the whole ensemble.
    """
    members, target = ens.members, ens.target
    mean = members.mean(axis=0)
    per_member = {
        "pe99": np.mean([pe99(m, target) for m in members]),
        "lsd": np.mean([lsd(m, target) for m in members]),
        "emd": np.mean([emd(m, target) for m in members]),
        "ssim": np.mean([ssim(m, target) for m in members]),
    }
    u = ensemble_pit(members, target, np.random.default_rng(seed))
    return MetricReport(
        mse=mse(mean, target), mae=mae(mean, target), pitd=pitd(u), crps=crps(members, target),
        extras={"pit_hist": pit_histogram(u).tolist()},
        **{k: float(v) for k, v in per_member.items()},
    )


def format_table(reports: dict) -> str:
    """Plain-text table, one row per model, columns in report order."""
    head = f"{'model':<26}" + "".join(f"{k.upper():>11}" for k in METRIC_KEYS)
    lines = [head, "-" * len(head)]
    for name, rep in reports.items():
        d = rep.to_dict() if isinstance(rep, MetricReport) else rep
        lines.append(f"{name:<26}" + "".join(f"{d[k]:>11.3e}" for k in METRIC_KEYS))
    return "\n".join(lines)
