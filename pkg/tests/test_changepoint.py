import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from skillseg.changepoint import (KernelPelt, PeltConfig, RbfCost, brute_force_segment, median_bandwidth, pelt,
                                  rbf_cost, second_derivative_peaks, second_difference, segmentation_objective,
                                  smooth)
from skillseg.exceptions import ConfigurationError, UsageError


# cost --------------------------------------------------------------------------------

@pytest.mark.parametrize("n", [1, 2, 5, 17])
def test_constant_segment_costs_zero(n):
    assert rbf_cost(np.full(n, 3.0), 0, n, 1.0) == pytest.approx(0.0, abs=1e-12)


def test_length_one_segment_costs_zero():
    y = np.array([0.0, 4.0, -2.0])
    for a in range(3):
        assert rbf_cost(y, a, a + 1, 0.7) == pytest.approx(0.0, abs=1e-12)


@pytest.mark.parametrize("z", [0.3, 1.0, 2.5])
def test_two_point_closed_form(z):
    assert rbf_cost(np.array([0.0, z]), 0, 2, 1.0) == pytest.approx(1 - np.exp(-z * z / 2), abs=1e-12)


def test_cost_matches_direct_kernel_sum():
    rng = np.random.default_rng(0)
    y = rng.normal(size=(12, 2))
    h = 0.8
    cost = RbfCost(y, h)
    for a, b in [(0, 12), (3, 7), (5, 6), (2, 11)]:
        seg = y[a:b]
        k = np.exp(-((seg[:, None] - seg[None]) ** 2).sum(-1) / (2 * h * h))
        assert cost(a, b) == pytest.approx((b - a) - k.sum() / (b - a), abs=1e-10)
    m = cost.matrix()
    assert m[3, 7] == pytest.approx(cost(3, 7)) and np.isinf(m[7, 3])


def test_invalid_segment_rejected():
    with pytest.raises(UsageError):
        rbf_cost(np.zeros(4), 2, 2, 1.0)


def test_median_bandwidth_and_floor():
    assert median_bandwidth(np.array([0.0, 1.0, 3.0])) == pytest.approx(2.0)
    cost = RbfCost(np.zeros(5), "median")
    assert cost.bandwidth == pytest.approx(1e-6)


# pelt ----------------------------------------------------------------------------------

def test_constant_series_has_no_change_points():
    assert pelt(np.full(40, 2.0), PeltConfig(penalty=0.1, min_size=2, bandwidth=1.0)) == []


def test_two_level_series():
    y = np.r_[np.zeros(10), np.full(10, 5.0)]
    cfg = PeltConfig(penalty=0.5, min_size=2, bandwidth=1.0)
    assert pelt(y, cfg) == [10]
    assert brute_force_segment(y, cfg) == [10]


def test_huge_penalty_gives_no_change_points():
    y = np.random.default_rng(1).normal(size=30)
    assert pelt(y, PeltConfig(penalty=1e12, min_size=1, bandwidth=1.0)) == []


def test_length_one_series():
    assert brute_force_segment(np.array([1.0]), PeltConfig(penalty=1.0, min_size=1)) == []
    assert pelt(np.array([1.0]), PeltConfig(penalty=1.0, min_size=1)) == []


def test_bic_penalty_rule():
    assert PeltConfig().resolve_penalty(100) == pytest.approx(3 * np.log(100))
    with pytest.raises(ConfigurationError):
        PeltConfig(penalty="aic")
    with pytest.raises(ConfigurationError):
        PeltConfig(min_size=0)


def test_brute_force_length_limit():
    with pytest.raises(UsageError):
        brute_force_segment(np.zeros(30))


def test_kernel_pelt_estimator():
    y = np.r_[np.zeros(25), np.full(25, 3.0), np.zeros(25)]
    est = KernelPelt(penalty=2.0, min_size=5, bandwidth=1.0)
    assert est.fit_predict(y) == [25, 50]
    assert est.get_params() == {"penalty": 2.0, "min_size": 5, "bandwidth": 1.0}


def _random_case(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(1, 21))
    levels = rng.normal(0, 2, size=4)
    y = levels[np.sort(rng.integers(0, 4, size=n))] + rng.normal(0, 0.5, size=n)
    cfg = PeltConfig(penalty=float(rng.uniform(0.05, 3.0)), min_size=int(rng.integers(1, 4)),
                     bandwidth=float(rng.uniform(0.3, 2.0)))
    return y, cfg


@settings(max_examples=150, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_pelt_equals_brute_force_property(seed):
    y, cfg = _random_case(seed)
    fast, slow = pelt(y, cfg), brute_force_segment(y, cfg)
    if fast != slow:
        # ties are broken differently only when the objectives agree
        cost = RbfCost(y, cfg.bandwidth)
        pen = cfg.resolve_penalty(len(y))
        assert segmentation_objective(cost, fast, len(y), pen) == pytest.approx(
            segmentation_objective(cost, slow, len(y), pen), abs=1e-9)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_pelt_respects_min_size_property(seed):
    y, cfg = _random_case(seed)
    bounds = [0] + pelt(y, cfg) + [len(y)]
    if len(bounds) > 2:
        assert min(np.diff(bounds)) >= cfg.min_size


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(-50, 50))
def test_cost_shift_invariance_property(seed, shift):
    y = np.random.default_rng(seed).normal(size=10)
    a, b = RbfCost(y, 1.0), RbfCost(y + shift, 1.0)
    for s, e in [(0, 10), (2, 6), (4, 9)]:
        assert a(s, e) == pytest.approx(b(s, e), abs=1e-9)


# smoothing and peaks --------------------------------------------------------------

def test_smooth_window_one_is_identity():
    y = np.random.default_rng(2).normal(size=9)
    np.testing.assert_array_equal(smooth(y, 1), y)


def test_smooth_constant_unchanged():
    np.testing.assert_allclose(smooth(np.full(8, 4.2), 5), 4.2, atol=1e-12)


def test_smooth_impulse():
    np.testing.assert_allclose(smooth([0, 0, 1, 0, 0], 3), [0, 1 / 3, 1 / 3, 1 / 3, 0], atol=1e-15)


def test_smooth_rejects_even_window():
    with pytest.raises(UsageError):
        smooth(np.zeros(4), 2)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1), st.sampled_from([3, 5, 7]))
def test_smooth_interior_is_window_mean_property(seed, w):
    y = np.random.default_rng(seed).normal(size=20)
    s, half = smooth(y, w), w // 2
    for t in range(half, 20 - half):
        assert s[t] == pytest.approx(y[t - half:t + half + 1].mean(), abs=1e-12)


def test_second_difference():
    np.testing.assert_allclose(second_difference([0, 1, 4, 9]), [0, 2, 2, 0])


def test_linear_ramp_has_no_peaks():
    assert second_derivative_peaks(np.arange(30.0) * 0.7 + 2) == []


def test_hinge_peak_at_kink():
    t = np.arange(20.0)
    assert second_derivative_peaks(np.maximum(0.0, t - 5)) == [5]


def test_close_spikes_keep_the_larger():
    d2 = np.zeros(30)
    d2[10], d2[13] = 2.0, 1.0
    y = np.cumsum(np.cumsum(np.r_[0.0, d2[1:-1]]))  # integrate twice so y'' = d2
    y = np.r_[0.0, y]
    np.testing.assert_allclose(second_difference(y)[1:-1], d2[1:-1], atol=1e-12)
    assert second_derivative_peaks(y, prominence=1.0, min_gap=5) == [10]
    assert second_derivative_peaks(y, prominence=1.0, min_gap=2) == [10, 13]
