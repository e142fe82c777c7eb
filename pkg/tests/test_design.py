import math
import pickle

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from numpy.testing import assert_allclose
from scipy import integrate, special, stats

from threearm_ssr.design import (
    AllocationRatio,
    DesignSpec,
    GroupSizes,
    SampleSizeCurve,
    covariance_matrix,
    power,
    power_at_totals,
    required_sample_size,
    sample_size_curve,
)
from threearm_ssr.errors import DomainError, InfiniteSampleSizeError

BAL = AllocationRatio(1, 1, 1)
UNBAL = AllocationRatio(3, 2, 1)


def _t_quantile(p, nu):
    def cdf(t):
        tail = 0.5 * special.betainc(nu / 2, 0.5, nu / (nu + t * t))
        return tail if t < 0 else 1 - tail

    lo, hi = -50.0, 50.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        lo, hi = (mid, hi) if cdf(mid) < p else (lo, mid)
    return 0.5 * (lo + hi)


def power_oracle(spec, nE, nR, nP):
    """Same probability written as a one-dimensional integral.

    The E-P statistic is an exact linear combination of the E-R and R-P
    statistics, so conditioning on the first leaves a univariate probability.
    """
    s = spec.sigma
    se_er = s * math.sqrt(1 / nE + 1 / nR)
    se_rp = s * math.sqrt(1 / nR + 1 / nP)
    se_ep = s * math.sqrt(1 / nE + 1 / nP)
    mE, mR, mP = spec.means
    u1 = _t_quantile(spec.alpha, nE + nR - 2) - ((mE - mR) - spec.delta_ER) / se_er
    u2 = _t_quantile(spec.alpha, nR + nP - 2) - ((mR - mP) + spec.delta_RP) / se_rp
    u3 = _t_quantile(spec.alpha, nE + nP - 2) - ((mE - mP) + spec.delta_EP) / se_ep
    r = -(s * s / nR) / (se_er * se_rp)

    def integrand(z):
        cap = min(u2, (u3 * se_ep - se_er * z) / se_rp)
        return stats.norm.pdf(z) * stats.norm.cdf((cap - r * z) / math.sqrt(1 - r * r))

    kink = (u3 * se_ep - u2 * se_rp) / se_er
    pts = [kink] if -12 < kink < u1 else None
    return integrate.quad(integrand, -12, u1, points=pts, epsabs=1e-13, epsrel=1e-12, limit=200)[0]


# ---------------------------------------------------------------- allocation


def test_allocation_parse_and_str():
    a = AllocationRatio.parse("3:2:1")
    assert a == UNBAL and str(a) == "3:2:1"
    assert a.block_size == 6
    assert_allclose(a.weights, [0.5, 1 / 3, 1 / 6])
    for bad in ("3:2", "a:b:c", "0:1:1", "1:-1:1"):
        with pytest.raises((DomainError, ValueError)):
            AllocationRatio.parse(bad)


def test_apportion_examples():
    assert BAL.apportion(525) == (175, 175, 175)
    assert BAL.apportion(527) == (176, 176, 175)
    assert UNBAL.apportion(452) == (226, 151, 75)
    assert UNBAL.apportion(60) == (30, 20, 10)


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 5000), st.sampled_from([BAL, UNBAL, AllocationRatio(2, 2, 1), AllocationRatio(5, 3, 2)]))
def test_apportion_largest_remainder(n, alloc):
    sizes = np.array(alloc.apportion(n))
    assert sizes.sum() == n
    assert np.all(np.abs(sizes - alloc.weights * n) < 1)
    assert_allclose(alloc.apportion_many(np.array([n]))[0], sizes)


def test_min_total():
    assert BAL.min_total == 6
    assert UNBAL.min_total == 10
    assert min(UNBAL.apportion(9)) < 2


# ---------------------------------------------------------------- spec and covariance


def test_spec_validation():
    with pytest.raises(DomainError):
        DesignSpec(mu_P=0.6, sigma=0)
    with pytest.raises(DomainError):
        DesignSpec(mu_P=0.6, delta_ER=0)
    with pytest.raises(DomainError):
        DesignSpec(mu_P=0.6, alpha=0.7)
    with pytest.raises(DomainError):
        GroupSizes(0, 1, 1)


def test_in_h1():
    assert DesignSpec(mu_P=0.6).in_h1()
    assert not DesignSpec(mu_P=0.0).in_h1()
    assert not DesignSpec(mu_P=0.6, mu_E=0.4).in_h1()


@pytest.mark.parametrize("sizes", [(175, 175, 175), (226, 151, 75), (10, 40, 3)])
def test_covariance_matches_linear_combination(sizes):
    a = np.array([[1, -1, 0], [0, 1, -1], [1, 0, -1]], dtype=float)
    cov = a @ np.diag(1 / np.array(sizes, dtype=float)) @ a.T
    d = np.sqrt(np.diag(cov))
    expected = cov / np.outer(d, d)
    c = covariance_matrix(GroupSizes(*sizes))
    assert_allclose(c.matrix(), expected, atol=1e-14)
    # E-P is the sum of E-R and R-P: the matrix is singular
    assert abs(np.linalg.det(c.matrix())) < 1e-12


# ---------------------------------------------------------------- power


@pytest.mark.parametrize(
    "spec,sizes",
    [
        (DesignSpec(mu_P=0.6), (175, 175, 175)),
        (DesignSpec(mu_P=0.9, alloc=UNBAL), (219, 146, 73)),
        (DesignSpec(mu_P=0.6, delta_ER=0.2, sigma=1.3), (40, 40, 40)),
        (DesignSpec(mu_P=0.5, delta_EP=0.1, delta_RP=0.05, mu_E=0.05), (30.5, 20.25, 12.0)),
        (DesignSpec(mu_P=1.5, alpha=0.05), (8, 8, 8)),
    ],
)
def test_power_matches_integral_oracle(spec, sizes):
    assert_allclose(power(spec, GroupSizes(*sizes)), power_oracle(spec, *sizes), atol=1e-9)


def test_power_increases_with_n():
    spec = DesignSpec(mu_P=0.9, alloc=UNBAL)
    p = power_at_totals(spec, np.arange(20, 900, 7))
    assert np.all(np.diff(p) > 0)


def test_power_needs_degrees_of_freedom():
    with pytest.raises(DomainError):
        power(DesignSpec(mu_P=0.6), GroupSizes(1, 1, 5))


@pytest.mark.parametrize("mu_P,alloc", [(0.6, BAL), (0.6, UNBAL), (0.9, BAL), (0.9, UNBAL), (0.71, BAL)])
def test_required_sample_size_is_minimal(mu_P, alloc):
    spec = DesignSpec(mu_P=mu_P, alloc=alloc)
    n, sizes = required_sample_size(spec)
    assert sizes.total == n
    b = power_at_totals(spec, [n - 1, n])
    assert b[1] >= 0.8 > b[0]


def test_required_sample_size_table_values_unbalanced():
    assert abs(required_sample_size(DesignSpec(mu_P=0.6, alloc=UNBAL))[0] - 452) <= 6
    assert abs(required_sample_size(DesignSpec(mu_P=0.9, alloc=UNBAL))[0] - 438) <= 6


def test_required_sample_size_small_and_infinite():
    assert required_sample_size(DesignSpec(mu_P=0.6, sigma=1e-4))[0] == 6
    assert required_sample_size(DesignSpec(mu_P=0.6, sigma=1e-4, alloc=UNBAL))[0] == 10
    with pytest.raises(InfiniteSampleSizeError):
        required_sample_size(DesignSpec(mu_P=0.0))


@settings(max_examples=25, deadline=None)
@given(st.floats(0.3, 2.0), st.floats(0.3, 2.0))
def test_sample_size_monotone_in_sigma(s1, s2):
    lo, hi = sorted((s1, s2))
    a = required_sample_size(DesignSpec(mu_P=0.9, sigma=lo))[0]
    b = required_sample_size(DesignSpec(mu_P=0.9, sigma=hi))[0]
    assert a <= b


# ---------------------------------------------------------------- sample size curve


def test_curve_matches_direct_search():
    spec = DesignSpec(mu_P=0.6, alloc=UNBAL)
    curve = sample_size_curve(spec)
    rng = np.random.default_rng(1)
    xs = rng.uniform(0.01, 3.0, 25)
    got = curve(xs)
    expected = [required_sample_size(spec.with_sigma(math.sqrt(x)))[0] for x in xs]
    assert_allclose(got, expected)
    assert np.all(np.diff(curve.thresholds) >= 0)


def test_curve_is_sigma_free_and_extends():
    c1 = sample_size_curve(DesignSpec(mu_P=0.9))
    c2 = sample_size_curve(DesignSpec(mu_P=0.9, sigma=2.0))
    assert c1 is c2
    big = SampleSizeCurve(DesignSpec(mu_P=0.9), initial_max=64)
    n = big(9.0)
    assert n == required_sample_size(DesignSpec(mu_P=0.9, sigma=3.0))[0]
    assert big.n_max >= n


def test_curve_pickles():
    curve = SampleSizeCurve(DesignSpec(mu_P=0.9), initial_max=128)
    clone = pickle.loads(pickle.dumps(curve))
    assert_allclose(clone.thresholds, curve.thresholds)
    assert clone(0.5) == curve(0.5)
