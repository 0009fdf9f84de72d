import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from scalesr.diffusion import (
    NoiseSchedule, forward_noise, member_noise, recover_epsilon, reverse_step, velocity_target,
)


def test_schedule_invariants():
    for J in (10, 200, 1000):
        s = NoiseSchedule(J, 1e-4, 2e-2)
        b = s.betas
        assert np.all(np.diff(b) > 0) and np.all((b > 0) & (b < 1))
        assert np.all(np.diff(s.alpha_bars) < 0)
        assert s.beta(J) == 2e-2
        assert s.beta(1) == pytest.approx(1e-4 + (2e-2 - 1e-4) / J, rel=1e-14)
        assert s.sigma(5) == pytest.approx(np.sqrt(s.beta(5)))
        ab = 1.0
        for j in range(1, J + 1):
            ab *= 1 - s.beta(j)
        assert s.alpha_bar(J) == pytest.approx(ab, rel=1e-12)


def test_schedule_rejects_bad_values():
    with pytest.raises(ValueError):
        NoiseSchedule(100, 0.1, 0.01)
    with pytest.raises(ValueError):
        NoiseSchedule(100).alpha_bar(0)
    with pytest.raises(ValueError):
        NoiseSchedule(100).alpha_bar(101)


def test_schedule_roundtrip():
    s = NoiseSchedule(200, 1e-4, 3.5e-2)
    assert NoiseSchedule.from_dict(s.to_dict()) == s


def test_forward_noise_limits():
    s = NoiseSchedule(1000, 1e-8, 2e-2)
    rng = np.random.default_rng(0)
    r0, eps = rng.normal(size=(2, 3, 4, 4))
    r1 = forward_noise(r0, 1, eps, s)
    assert np.abs(r1 - r0).max() <= np.sqrt(1 - s.alpha_bar(1)) * np.abs(eps).max() + \
        (1 - np.sqrt(s.alpha_bar(1))) * np.abs(r0).max() + 1e-15
    np.testing.assert_array_equal(forward_noise(r0, 500, np.zeros_like(r0), s),
                                  np.sqrt(s.alpha_bar(500)) * r0)


def test_forward_chain_monte_carlo():
    # step-by-step kernel r_s = sqrt(alpha_s) r_{s-1} + sqrt(beta_s) z_s versus closed form
    s = NoiseSchedule(50, 1e-4, 5e-2)
    rng = np.random.default_rng(1)
    n = 10000
    r0 = 0.7 + 0.3 * rng.standard_normal(n)
    r = r0.copy()
    for step in range(1, 31):
        r = np.sqrt(s.alpha(step)) * r + np.sqrt(s.beta(step)) * rng.standard_normal(n)
    closed = forward_noise(r0, 30, rng.standard_normal(n), s)
    assert r.mean() == pytest.approx(closed.mean(), rel=0.02)
    assert r.var() == pytest.approx(closed.var(), rel=0.02)
    expected_var = s.alpha_bar(30) * 0.09 + 1 - s.alpha_bar(30)
    assert r.var() == pytest.approx(expected_var, rel=0.03)


def test_velocity_trivial_cases():
    s = NoiseSchedule(200)
    rng = np.random.default_rng(2)
    r0, eps = rng.normal(size=(2, 2, 3, 3))
    np.testing.assert_allclose(velocity_target(np.zeros_like(r0), eps, 7, s),
                               np.sqrt(s.alpha_bar(7)) * eps)
    np.testing.assert_allclose(velocity_target(r0, np.zeros_like(eps), 7, s),
                               -np.sqrt(1 - s.alpha_bar(7)) * r0)


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 10**6), J=st.sampled_from([200, 1000]), frac=st.floats(0, 1))
def test_epsilon_identity(seed, J, frac):
    s = NoiseSchedule(J)
    j = 1 + int(frac * (J - 1))
    rng = np.random.default_rng(seed)
    r0, eps = rng.normal(size=(2, 2, 4, 4))
    r_j = forward_noise(r0, j, eps, s)
    v = velocity_target(r0, eps, j, s)
    np.testing.assert_allclose(recover_epsilon(v, r_j, j, s), eps, atol=1e-10)


def test_recover_epsilon_zero_and_shape():
    s = NoiseSchedule(200)
    z = np.zeros((2, 3, 5))
    assert np.all(recover_epsilon(z, z, 3, s) == 0)
    assert recover_epsilon(z, z, 3, s).shape == z.shape


def test_batched_j_torch():
    s = NoiseSchedule(200)
    r0 = torch.randn(3, 2, 4, 4, dtype=torch.float64)
    eps = torch.randn(3, 2, 4, 4, dtype=torch.float64)
    j = np.array([1, 50, 200])
    batched = forward_noise(r0, j, eps, s)
    for i in range(3):
        single = forward_noise(r0[i], int(j[i]), eps[i], s)
        assert torch.allclose(batched[i], single, atol=1e-15)


def test_reverse_step_last_has_no_noise():
    s = NoiseSchedule(200)
    r = np.ones((1, 2, 2))
    e = np.full((1, 2, 2), 0.3)
    a = reverse_step(r, e, 1, np.full_like(r, 5.0), s)
    b = reverse_step(r, e, 1, np.zeros_like(r), s)
    np.testing.assert_array_equal(a, b)


def test_reverse_step_small_beta():
    s = NoiseSchedule(1000, 1e-9, 2e-9)
    r = np.random.default_rng(3).normal(size=(1, 3, 3))
    out = reverse_step(r, np.ones_like(r), 2, np.zeros_like(r), s)
    np.testing.assert_allclose(out, r, atol=1e-4)


@pytest.mark.parametrize("J", [200, 1000])
def test_oracle_chain_recovers_r0(J):
    s = NoiseSchedule(J, 1e-4, 2e-2)
    rng = np.random.default_rng(4)
    r0 = np.array([[[0.37]]])
    r = forward_noise(r0, J, rng.standard_normal(r0.shape), s)
    for j in range(J, 0, -1):
        eps_hat = (r - np.sqrt(s.alpha_bar(j)) * r0) / np.sqrt(1 - s.alpha_bar(j))
        z = rng.standard_normal(r.shape) if j > 1 else np.zeros_like(r)
        r = reverse_step(r, eps_hat, j, z, s)
    assert abs(r.item() - 0.37) < 1e-6


def test_member_noise_keyed():
    a = member_noise(1, 2, 3, 4, (5,))
    np.testing.assert_array_equal(a, member_noise(1, 2, 3, 4, (5,)))
    assert not np.array_equal(a, member_noise(1, 2, 3, 5, (5,)))
    assert not np.array_equal(a, member_noise(1, 2, 4, 4, (5,)))
