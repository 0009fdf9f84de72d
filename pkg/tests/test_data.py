import itertools
import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from scalesr.data import (
    ConfigError, DatasetConfig, FieldSequence, InsufficientDataError, StormParams, Tile,
    build_samples, cap_and_normalize, denormalize, fit_gamma_cap, fold_tile_ids, load_region,
    make_folds, prepare_tiles, read_gridded, synthesize_region, synthesize_storms, write_gridded,
)
from scalesr.grid import SRFactors, coarsen_spacetime


def autocorr(x, lag):
    a = x - x.mean()
    return float((a[:-lag] * a[lag:]).sum() / (a * a).sum())


# ------------------------------------------------------------------ gamma cap

def test_gamma_cap_exponential_oracle():
    theta = 3.0
    v = np.random.default_rng(0).exponential(theta, 100_000)
    assert fit_gamma_cap(v, 99.5) == pytest.approx(theta * np.log(200), rel=0.05)


def test_gamma_cap_ignores_zeros():
    v = np.random.default_rng(1).exponential(2.0, 5000)
    padded = np.concatenate([v, np.zeros(20000)])
    assert fit_gamma_cap(padded) == fit_gamma_cap(v)


def test_gamma_cap_insufficient():
    with pytest.raises(InsufficientDataError):
        fit_gamma_cap(np.r_[np.ones(99), np.zeros(1000)])
    with pytest.raises(InsufficientDataError):
        fit_gamma_cap(np.full(500, 2.0))


def test_cap_and_normalize_values():
    out = cap_and_normalize(np.array([0.0, 27.5, 55.0, 110.0]), 55.0)
    np.testing.assert_array_equal(out, [0.0, 0.5, 1.0, 1.0])
    with pytest.raises(ValueError):
        cap_and_normalize(np.ones(3), 0.0)


@given(st.lists(st.floats(0, 55), min_size=1, max_size=50), st.floats(1, 200))
def test_normalize_invertible_below_cap(values, cap):
    v = np.minimum(np.array(values), cap)
    np.testing.assert_allclose(denormalize(cap_and_normalize(v, cap), cap), v, atol=1e-12)


@given(st.lists(st.floats(0, 100), min_size=2, max_size=30))
def test_normalize_order_preserving(values):
    v = np.sort(values)
    assert np.all(np.diff(cap_and_normalize(v, 55.0)) >= 0)


# ------------------------------------------------------------------ folds

def brute_force_latin(folds, n):
    cells = [c for tiles in folds.values() for c in tiles]
    assert sorted(cells) == sorted(itertools.product(range(n), range(n)))
    for tiles in folds.values():
        assert sorted(r for r, _ in tiles) == list(range(n))
        assert sorted(c for _, c in tiles) == list(range(n))


@pytest.mark.parametrize("n", [1, 2, 3, 4, 5, 6])
def test_folds_latin_cover(n):
    folds = make_folds(n, n, n)
    assert len(folds) == n
    brute_force_latin(folds, n)


def test_folds_4x4_rule():
    folds = make_folds(4, 4, 4)
    assert folds[1] == [(0, 1), (1, 2), (2, 3), (3, 0)]
    assert fold_tile_ids(4, 4, 4)[0] == [0, 5, 10, 15]


def test_folds_config_mismatch():
    with pytest.raises(ConfigError):
        make_folds(4, 4, 3)
    with pytest.raises(ConfigError):
        DatasetConfig(grid_rows=3, grid_cols=4, fold_count=3)
    with pytest.raises(ConfigError):
        DatasetConfig(cap_percentile=100)


# ------------------------------------------------------------------ synthetic storms

def test_synthetic_deterministic():
    a = synthesize_storms(5, 30, (24, 24))
    b = synthesize_storms(5, 30, (24, 24))
    assert np.array_equal(a.hr_frames, b.hr_frames)
    assert np.array_equal(a.topography, b.topography)
    assert not np.array_equal(a.hr_frames, synthesize_storms(6, 30, (24, 24)).hr_frames)


def test_synthetic_zero_cells():
    t = synthesize_storms(0, 20, (16, 16), StormParams(cell_rate=0.0))
    assert np.count_nonzero(t.hr_frames) == 0


def test_synthetic_statistics():
    t = synthesize_storms(0, 500, (40, 40))
    f = t.hr_frames
    assert np.all(f >= 0)
    assert 0.7 <= (f == 0).mean() <= 0.9
    assert t.topography.min() == 0 and t.topography.max() == 1
    series = f.reshape(500, -1).mean(axis=1)
    assert autocorr(series, 1) > autocorr(series, 6)


def test_orographic_coupling():
    base = StormParams(texture_sigma=0.0)
    flat = StormParams(texture_sigma=0.0, orographic=0.0)
    wet = synthesize_storms(3, 200, (40, 40), base)
    dry = synthesize_storms(3, 200, (40, 40), flat)
    hi = wet.topography > 0.7
    lo = wet.topography < 0.3
    ratio_coupled = wet.hr_frames[:, hi].mean() / wet.hr_frames[:, lo].mean()
    ratio_flat = dry.hr_frames[:, hi].mean() / dry.hr_frames[:, lo].mean()
    assert ratio_coupled > ratio_flat


def test_region_slices_consistently():
    cfg = DatasetConfig(H=12, W=12, grid_rows=2, grid_cols=2, fold_count=2)
    tiles = synthesize_region(1, 10, cfg)
    assert [t.tile_id for t in tiles] == [0, 1, 2, 3]
    assert tiles[3].row == 1 and tiles[3].col == 1
    assert all(t.hr_frames.shape == (10, 12, 12) for t in tiles)


# ------------------------------------------------------------------ samples

def test_samples_trivial_identity():
    tile = synthesize_storms(0, 5, (8, 8))
    s = build_samples(tile, SRFactors(1, 1), L=1)
    assert len(s) == 5
    np.testing.assert_array_equal(s[2].lr_context.frames[0], s[2].hr_target.frames[0])


def test_sample_context_times():
    tile = synthesize_storms(0, 20, (8, 8))
    f = SRFactors(2, 3)
    samples = build_samples(tile, f, L=2)
    s = samples[0]
    assert s.time == 3
    assert s.lr_context.times == [0, 3]
    np.testing.assert_array_equal(s.lr_context.frames[0],
                                  coarsen_spacetime(tile.hr_frames[0:3], f))


def test_samples_perfect_model_consistency():
    tile = synthesize_storms(2, 60, (16, 16))
    f = SRFactors(4, 2)
    samples = build_samples(tile, f, L=3, stride=1)
    assert len(samples) == 60 - 3 * 2 + 1
    for s in samples:
        np.testing.assert_allclose(coarsen_spacetime(s.hr_target.frames, f),
                                   s.lr_context.frames[-1], atol=1e-10)
        assert s.hr_target.frames.shape == (2, 16, 16)
        assert s.lr_context.frames.shape == (3, 4, 4)


def test_samples_too_short_is_empty():
    tile = synthesize_storms(0, 5, (8, 8))
    assert build_samples(tile, SRFactors(2, 3), L=2) == []


def test_field_sequence_validation():
    with pytest.raises(ValueError):
        FieldSequence(-np.ones((1, 2, 2)))
    with pytest.raises(ValueError):
        FieldSequence(np.ones((2, 2)))
    with pytest.raises(ValueError):
        Tile(0, 0, 0, np.zeros((3, 3)), np.zeros((2, 4, 4)))


# ------------------------------------------------------------------ preprocessing

def test_prepare_uses_training_statistics_only():
    cfg = DatasetConfig(H=20, W=20, grid_rows=2, grid_cols=2, fold_count=2)
    raw = synthesize_region(4, 120, cfg)
    for t in raw:
        t.hr_frames[100:] *= 50  # test period outliers must not move the cap
    train_ids = fold_tile_ids(2, 2, 2)[0]
    a = prepare_tiles(raw, 100, cfg, train_ids)
    expected = fit_gamma_cap(np.concatenate([raw[i].hr_frames[:100].ravel() for i in train_ids]))
    assert a.cap_value == expected
    lo = min(raw[i].topography.min() for i in train_ids)
    hi = max(raw[i].topography.max() for i in train_ids)
    assert a.topo_range == (lo, hi)
    for t in a.tiles:
        assert t.hr_frames.max() <= 1.0 and t.topography.min() >= 0 and t.topography.max() <= 1


def test_prepare_fixed_cap():
    cfg = DatasetConfig(H=8, W=8, grid_rows=1, grid_cols=1, fold_count=1, cap_value_mmh=55.0)
    raw = [Tile(0, 0, 0, np.arange(64.0).reshape(8, 8), np.full((2, 8, 8), 110.0))]
    p = prepare_tiles(raw, 2, cfg)
    assert p.cap_value == 55.0
    assert np.all(p.tiles[0].hr_frames == 1.0)


# ------------------------------------------------------------------ gridded container

@settings(max_examples=20, deadline=None)
@given(n=st.integers(1, 4), h=st.integers(1, 5), w=st.integers(1, 5), seed=st.integers(0, 2**31))
def test_gridded_roundtrip_bit_exact(n, h, w, seed, tmp_path_factory):
    d = tmp_path_factory.mktemp("grid")
    x = np.random.default_rng(seed).gamma(0.5, 3.0, (n, h, w)).astype(np.float32)
    write_gridded(d, {"precip": x}, ["time", "y", "x"], {"precip": "mm/h"})
    meta, arrays = read_gridded(d)
    assert meta["dims"] == ["time", "y", "x"] and meta["shape"] == [n, h, w]
    assert arrays["precip"].tobytes() == x.astype("<f4").tobytes()


def test_gridded_rejects_truncated(tmp_path):
    write_gridded(tmp_path, {"p": np.ones((2, 3, 3))}, ["time", "y", "x"])
    raw = (tmp_path / "p.f32").read_bytes()
    (tmp_path / "p.f32").write_bytes(raw[:-4])
    with pytest.raises(ValueError):
        read_gridded(tmp_path)


def test_load_region_missing_values(tmp_path):
    cfg = DatasetConfig(H=4, W=4, grid_rows=2, grid_cols=2, fold_count=2)
    p = np.ones((3, 8, 8), dtype=np.float32)
    p[0, 0, 0] = -9999.0
    write_gridded(tmp_path / "p", {"precip": p}, ["time", "y", "x"], missing_value=-9999.0)
    write_gridded(tmp_path / "t", {"topo": np.zeros((8, 8))}, ["y", "x"])
    tiles = load_region(tmp_path / "p", tmp_path / "t", cfg)
    assert len(tiles) == 4 and tiles[0].hr_frames[0, 0, 0] == 0.0
    assert json.loads((tmp_path / "p" / "meta.json").read_text())["units"] == {}
    with pytest.raises(ConfigError):
        load_region(tmp_path / "p", tmp_path / "t", DatasetConfig(H=5, W=5, grid_rows=2,
                                                                  grid_cols=2, fold_count=2))
