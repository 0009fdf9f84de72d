"""Dataset construction: synthetic storms, gridded I/O, capping, tiling and folds."""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage, stats

from .grid import SRFactors, coarsen_spacetime

log = logging.getLogger(__name__)

MIN_GAMMA_SAMPLES = 100


class InsufficientDataError(ValueError):
    pass


class ConfigError(ValueError):
    pass


@dataclass
class FieldSequence:
    """Equal-shape nonnegative frames ``(n, H, W)`` with time/tile indexing."""

    frames: np.ndarray
    start_time: int = 0
    tile_id: int = 0
    stride: int = 1

    def __post_init__(self):
        self.frames = np.asarray(self.frames)
        if self.frames.ndim != 3 or self.frames.shape[0] < 1:
            raise ValueError(f"need (n>=1, H, W) frames, got {self.frames.shape}")
        if np.any(self.frames < 0):
            raise ValueError("frames must be nonnegative")

    def __len__(self):
        return self.frames.shape[0]

    @property
    def times(self):
        return [self.start_time + k * self.stride for k in range(len(self))]


@dataclass
class Tile:
    tile_id: int
    row: int
    col: int
    topography: np.ndarray
    hr_frames: np.ndarray

    def __post_init__(self):
        if self.topography.shape != self.hr_frames.shape[1:]:
            raise ValueError("topography and frame shapes differ")


@dataclass(frozen=True)
class DatasetConfig:
    H: int = 40
    W: int = 40
    grid_rows: int = 4
    grid_cols: int = 4
    cap_percentile: float = 99.5
    cap_value_mmh: float | None = None
    normalization_max: float | None = None
    fold_count: int = 4

    def __post_init__(self):
        if not 0 < self.cap_percentile < 100:
            raise ConfigError("cap_percentile must be in (0, 100)")
        if not self.fold_count == self.grid_rows == self.grid_cols:
            raise ConfigError("Latin-square folds need fold_count == grid_rows == grid_cols")

    def to_dict(self):
        return asdict(self)


@dataclass
class Sample:
    lr_context: FieldSequence
    topography: np.ndarray
    hr_target: FieldSequence
    factors: SRFactors

    @property
    def tile_id(self):
        return self.hr_target.tile_id

    @property
    def time(self):
        return self.hr_target.start_time


# ------------------------------------------------------------------ preprocessing


def fit_gamma_cap(values, percentile=99.5, max_fit=200_000):
    """Percentile of a gamma law fitted by maximum likelihood to the positive values.

    Zeros are excluded; location is fixed at 0. Large inputs are thinned by
    a fixed stride before fitting.
    """
    v = np.asarray(values, dtype=np.float64).ravel()
    v = v[v > 0]
    if v.size < MIN_GAMMA_SAMPLES:
        raise InsufficientDataError(
            f"need at least {MIN_GAMMA_SAMPLES} positive values, got {v.size}")
    if np.ptp(v) == 0:
        raise InsufficientDataError("all positive values identical; gamma fit is degenerate")
    if v.size > max_fit:
        v = v[:: v.size // max_fit + 1]
    shape, _, scale = stats.gamma.fit(v, floc=0)
    return float(stats.gamma.ppf(percentile / 100.0, shape, scale=scale))


def cap_and_normalize(frames, cap_value):
    if not cap_value > 0:
        raise ValueError("cap_value must be positive")
    return np.minimum(np.asarray(frames, dtype=np.float64), cap_value) / cap_value


def denormalize(frames, cap_value):
    return np.asarray(frames, dtype=np.float64) * cap_value


def minmax(x, lo=None, hi=None):
    x = np.asarray(x, dtype=np.float64)
    lo = x.min() if lo is None else lo
    hi = x.max() if hi is None else hi
    if hi == lo:
        return np.zeros_like(x)
    return np.clip((x - lo) / (hi - lo), 0.0, 1.0)


# ------------------------------------------------------------------ folds


def make_folds(grid_rows, grid_cols, fold_count):
    """Latin-square folds: fold ``f`` holds tiles ``(r, (r + f) mod n)``."""
    if not fold_count == grid_rows == grid_cols:
        raise ConfigError("fold_count must equal grid_rows and grid_cols")
    return {f: [(r, (r + f) % grid_cols) for r in range(grid_rows)] for f in range(fold_count)}


def fold_tile_ids(grid_rows, grid_cols, fold_count):
    return {f: sorted(r * grid_cols + c for r, c in cells)
            for f, cells in make_folds(grid_rows, grid_cols, fold_count).items()}


# ------------------------------------------------------------------ synthetic storms


@dataclass(frozen=True)
class StormParams:
    """Knobs of the synthetic rain generator (rates per 100 x 100 px area)."""

    cell_rate: float = 0.15
    lifetime_mean: float = 14.0
    radius_mean: float = 5.0
    peak_median_mmh: float = 6.0
    peak_sigma: float = 0.8
    wind: tuple = (0.8, 0.5)
    wind_jitter: float = 0.3
    max_aspect: float = 2.5
    texture_sigma: float = 0.7
    texture_scale: float = 2.0
    texture_memory: float = 0.85
    orographic: float = 1.0
    wet_threshold_mmh: float = 0.1
    topo_scale: float = 12.0
    topo_max_m: float = 1500.0


def synthetic_topography(rng, shape, params: StormParams):
    """Smooth hills plus one ridge, in metres."""
    h, w = shape
    noise = ndimage.gaussian_filter(rng.standard_normal(shape), params.topo_scale, mode="wrap")
    yy, xx = np.mgrid[0:h, 0:w] / max(h, w)
    angle = rng.uniform(0, np.pi)
    ridge = np.exp(-((np.cos(angle) * (yy - 0.5) + np.sin(angle) * (xx - 0.5)) / 0.12) ** 2)
    z = minmax(noise) + 0.8 * ridge
    return params.topo_max_m * minmax(z)


def _smooth_noise(rng, shape, scale):
    z = ndimage.gaussian_filter(rng.standard_normal(shape), scale, mode="wrap")
    return z / (z.std() + 1e-12)


def synthesize_field(seed, n_frames, shape, params: StormParams = StormParams()):
    """Raw rain frames (mm/h) and topography (m) over one rectangular domain.

    Anisotropic Gaussian cells are born by a Poisson process, drift with a
    jittered common wind, grow and decay over a sine-shaped life cycle and
    are modulated by lognormal texture (AR(1) in time) and by terrain height.
    Pixels below the wet threshold are set to exactly zero.
    """
    rng = np.random.default_rng(seed)
    h, w = shape
    topo = synthetic_topography(rng, shape, params)
    orog = np.clip(1.0 + params.orographic * (minmax(topo) - 0.5), 0.1, None)
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    margin = 3 * params.radius_mean
    # births scale with the spawn area so cell density is domain-independent
    area = (h + 2 * margin) * (w + 2 * margin) / 1e4
    wind = np.asarray(params.wind, dtype=np.float64)
    cells = []
    tex = _smooth_noise(rng, shape, params.texture_scale)
    rho = params.texture_memory
    frames = np.zeros((n_frames, h, w))
    for t in range(n_frames):
        for _ in range(rng.poisson(params.cell_rate * area)):
            life = max(3.0, rng.exponential(params.lifetime_mean))
            # spawn upwind so cells drift into the domain
            cy = rng.uniform(-margin, h + margin) - wind[0] * life / 2
            cx = rng.uniform(-margin, w + margin) - wind[1] * life / 2
            cells.append({
                "y": cy, "x": cx, "age": 0.0, "life": life,
                "v": wind + params.wind_jitter * rng.standard_normal(2),
                "peak": params.peak_median_mmh * np.exp(params.peak_sigma * rng.standard_normal()),
                "r": params.radius_mean * np.exp(0.3 * rng.standard_normal()),
                "aspect": rng.uniform(1.0, params.max_aspect),
                "theta": rng.uniform(0, np.pi),
            })
        frame = np.zeros(shape)
        for c in cells:
            amp = c["peak"] * np.sin(np.pi * c["age"] / c["life"])
            if amp <= 0:
                continue
            ct, st = np.cos(c["theta"]), np.sin(c["theta"])
            dy, dx = yy - c["y"], xx - c["x"]
            a = (ct * dx + st * dy) / (c["r"] * c["aspect"])
            b = (-st * dx + ct * dy) / c["r"]
            frame += amp * np.exp(-0.5 * (a * a + b * b))
        tex = rho * tex + np.sqrt(1 - rho**2) * _smooth_noise(rng, shape, params.texture_scale)
        s = params.texture_sigma
        frame *= np.exp(s * tex - 0.5 * s * s) * orog
        frame[frame < params.wet_threshold_mmh] = 0.0
        frames[t] = frame
        for c in cells:
            c["y"] += c["v"][0]
            c["x"] += c["v"][1]
            c["age"] += 1.0
        cells = [c for c in cells if c["age"] < c["life"]]
    return frames, topo


def synthesize_storms(seed, n_frames, shape, params: StormParams = StormParams(), tile_id=0):
    """One tile of synthetic rain (raw mm/h; topography min-max scaled to [0, 1])."""
    frames, topo = synthesize_field(seed, n_frames, shape, params)
    return Tile(tile_id, 0, 0, minmax(topo), frames)


def synthesize_region(seed, n_frames, cfg: DatasetConfig, params: StormParams = StormParams()):
    """Generate one large domain and slice it into ``grid_rows x grid_cols`` tiles.

    Topography is returned raw (metres); see :func:`prepare_tiles`.
    """
    frames, topo = synthesize_field(
        seed, n_frames, (cfg.grid_rows * cfg.H, cfg.grid_cols * cfg.W), params)
    return slice_tiles(frames, topo, cfg)


def slice_tiles(frames, topo, cfg: DatasetConfig):
    tiles = []
    for r in range(cfg.grid_rows):
        for c in range(cfg.grid_cols):
            ys = slice(r * cfg.H, (r + 1) * cfg.H)
            xs = slice(c * cfg.W, (c + 1) * cfg.W)
            tiles.append(Tile(r * cfg.grid_cols + c, r, c, topo[ys, xs].copy(),
                              frames[:, ys, xs].copy()))
    return tiles


@dataclass
class PreparedData:
    tiles: list
    cap_value: float
    topo_range: tuple
    n_train_frames: int
    config: DatasetConfig = field(default_factory=DatasetConfig)


def prepare_tiles(raw_tiles, n_train_frames, cfg: DatasetConfig, train_tile_ids=None):
    """Cap, normalise and scale topography using training statistics only.

    The gamma cap is fitted on the first ``n_train_frames`` of the training
    tiles and applied everywhere; topography is min-max scaled with the
    training tiles' range.
    """
    if train_tile_ids is None:
        train_tile_ids = [t.tile_id for t in raw_tiles]
    train = [t for t in raw_tiles if t.tile_id in set(train_tile_ids)]
    cap = cfg.cap_value_mmh
    if cap is None:
        cap = fit_gamma_cap(np.concatenate([t.hr_frames[:n_train_frames].ravel() for t in train]),
                            cfg.cap_percentile)
    norm_max = cfg.normalization_max or cap
    lo = min(float(t.topography.min()) for t in train)
    hi = max(float(t.topography.max()) for t in train)
    tiles = [Tile(t.tile_id, t.row, t.col, minmax(t.topography, lo, hi),
                  np.minimum(t.hr_frames, cap) / norm_max) for t in raw_tiles]
    log.info("cap %.3f mm/h, topography range [%.1f, %.1f]", cap, lo, hi)
    return PreparedData(tiles, float(cap), (lo, hi), n_train_frames, cfg)


# ------------------------------------------------------------------ samples


def build_samples(tile: Tile, factors: SRFactors, L: int, stride: int | None = None,
                  start: int = 0, stop: int | None = None):
    """All samples whose HR frames lie inside ``[start, stop)`` of the tile.

    A sample at time ``t`` has LR context frames at ``t - (L-1)T, ..., t``
    (each the space-time block average of HR frames ``s .. s+T-1``) and HR
    target frames ``t .. t+T-1``. Successive samples are ``stride`` frames
    apart (default ``T``).
    """
    T = factors.T
    stride = stride or T
    stop = tile.hr_frames.shape[0] if stop is None else stop
    out = []
    t = start + (L - 1) * T
    while t + T <= stop:
        ctx_times = [t - (L - 1 - k) * T for k in range(L)]
        ctx = np.stack([coarsen_spacetime(tile.hr_frames[s:s + T], factors) for s in ctx_times])
        out.append(Sample(
            FieldSequence(ctx, ctx_times[0], tile.tile_id, T),
            tile.topography,
            FieldSequence(np.asarray(tile.hr_frames[t:t + T], dtype=np.float64), t,
                          tile.tile_id, 1),
            factors,
        ))
        t += stride
    return out


# ------------------------------------------------------------------ gridded container


def write_gridded(directory, variables: dict, dims, units=None, missing_value=-9999.0):
    """Write float32 little-endian raw arrays plus ``meta.json``.

    Every variable must have the same shape, named by ``dims``.
    """
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    shapes = {tuple(np.shape(v)) for v in variables.values()}
    if len(shapes) != 1:
        raise ValueError("all variables must share one shape")
    shape = shapes.pop()
    if len(shape) != len(dims):
        raise ValueError("dims do not match array rank")
    for name, arr in variables.items():
        np.ascontiguousarray(arr, dtype="<f4").tofile(d / f"{name}.f32")
    meta = {
        "dims": list(dims),
        "shape": list(shape),
        "variables": list(variables),
        "units": dict(units or {}),
        "missing_value": missing_value,
    }
    (d / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True))
    return meta


def read_gridded(directory):
    d = Path(directory)
    meta = json.loads((d / "meta.json").read_text())
    shape = tuple(meta["shape"])
    arrays = {}
    for name in meta["variables"]:
        raw = np.fromfile(d / f"{name}.f32", dtype="<f4")
        if raw.size != int(np.prod(shape)):
            raise ValueError(f"{name}: expected {np.prod(shape)} values, found {raw.size}")
        arrays[name] = raw.reshape(shape)
    return meta, arrays


def load_region(precip_dir, topo_dir, cfg: DatasetConfig, variable="precip"):
    """Read a gridded precipitation record and topography and slice into tiles.

    Missing values become 0 (treated as dry).
    """
    meta, arrays = read_gridded(precip_dir)
    precip = arrays[variable].astype(np.float64)
    miss = meta.get("missing_value")
    if miss is not None:
        bad = precip == miss
        if bad.any():
            log.warning("%d missing values set to 0", int(bad.sum()))
            precip[bad] = 0.0
    precip = np.maximum(precip, 0.0)
    tmeta, tarr = read_gridded(topo_dir)
    topo = next(iter(tarr.values())).astype(np.float64)
    if topo.ndim == 3:
        topo = topo[0]
    need = (cfg.grid_rows * cfg.H, cfg.grid_cols * cfg.W)
    if precip.shape[1:] != need or topo.shape != need:
        raise ConfigError(f"region must be {need}, got {precip.shape[1:]} and {topo.shape}")
    return slice_tiles(precip, topo, cfg)
