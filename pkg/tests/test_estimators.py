import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from numpy.testing import assert_allclose
from scipy import integrate, stats

from threearm_ssr.errors import DomainError
from threearm_ssr.estimators import (
    EPS,
    EstimatorDensity,
    Method,
    TrialData,
    adjusted_one_sample,
    density_os,
    density_xg,
    estimate,
    one_sample_variance,
    os_bias,
    pooled_variance,
    read_trial_data,
    xing_ganju,
)

THIRDS = (1 / 3, 1 / 3, 1 / 3)


def test_trial_data_labels():
    d = TrialData([1.0, 2.0, 3.0], ["E", "R", "P"])
    assert d.labels.tolist() == [0, 1, 2]
    assert d.blinded().labels is None
    assert d.group_counts().tolist() == [1, 1, 1]
    with pytest.raises(DomainError):
        TrialData([1.0], ["X"])
    with pytest.raises(DomainError):
        TrialData([1.0, 2.0], [0])


# ---------------------------------------------------------------- point estimators


def test_pooled_example():
    d = TrialData([0, 2, 1, 3, 2, 4], ["E", "E", "R", "R", "P", "P"])
    assert_allclose(pooled_variance(d).value, 2.0)


def test_pooled_needs_labels_and_sizes():
    with pytest.raises(DomainError):
        pooled_variance(TrialData([0, 1, 2, 3]))
    with pytest.raises(DomainError):
        pooled_variance(TrialData([0, 1, 2, 3], ["E", "E", "R", "P"]))


def test_constant_data_is_floored():
    d = TrialData(np.full(9, 2.5), np.repeat([0, 1, 2], 3), np.repeat([0, 1, 2], 3) * 0 + np.arange(9) // 3)
    assert pooled_variance(d).value == EPS
    assert one_sample_variance(d).value == EPS
    assert xing_ganju(d.blinded()).value == EPS


def test_one_sample_example():
    assert_allclose(one_sample_variance(TrialData([1.0, 2.0, 3.0])).value, 1.0)
    with pytest.raises(DomainError):
        one_sample_variance(TrialData([1.0]))


def test_os_bias_examples():
    assert os_bias((0.3, 0.3, 0.3), THIRDS, 30) == 0.0
    assert_allclose(os_bias((0, 0, 0.6), THIRDS, 30), 30 / 29 * 0.36 * 2 / 9, rtol=1e-13)
    # mu_P == mu_R with a distinct mu_E
    assert_allclose(os_bias((0.5, 0.2, 0.2), THIRDS, 12), 12 / 11 * 0.02, rtol=1e-12)


@settings(max_examples=200, deadline=None)
@given(
    st.lists(st.floats(-3, 3), min_size=3, max_size=3),
    st.lists(st.floats(0.05, 1.0), min_size=3, max_size=3),
    st.integers(6, 500),
)
def test_os_bias_identity(mu, w, n1):
    w = np.array(w) / sum(w)
    mu = np.array(mu)
    direct = n1 / (n1 - 1) * np.sum(w * (mu - np.sum(w * mu)) ** 2)
    assert_allclose(os_bias(mu, w, n1), direct, atol=1e-12, rtol=1e-9)


def test_adjusted_one_sample():
    d = TrialData([1.0, 2.0, 3.0, 4.0, 0.5, 2.5])
    assert_allclose(adjusted_one_sample(d, (0, 0, 0), THIRDS).value, one_sample_variance(d).value)
    shifted = adjusted_one_sample(d, (0, 0, 0.6), THIRDS)
    assert_allclose(shifted.value, one_sample_variance(d).value - os_bias((0, 0, 0.6), THIRDS, 6))
    assert adjusted_one_sample(d, (0, 0, 10.0), THIRDS).value == EPS


def test_xing_ganju_example():
    # block sums 3, 5, 7 with m = 3
    y = [1, 1, 1, 1, 2, 2, 2, 2, 3]
    d = TrialData(y, [0, 1, 2] * 3, [0, 0, 0, 1, 1, 1, 2, 2, 2])
    assert_allclose(xing_ganju(d).value, 4 / 3)


def test_xing_ganju_errors():
    with pytest.raises(DomainError):
        xing_ganju(TrialData([1.0, 2.0, 3.0]))
    with pytest.raises(DomainError):
        xing_ganju(TrialData([1.0, 2.0, 3.0, 4.0, 5.0], blocks=[0, 0, 0, 1, 1]))
    with pytest.raises(DomainError):
        xing_ganju(TrialData([1.0, 2.0, 3.0], blocks=[0, 0, 0]))
    with pytest.raises(DomainError):
        xing_ganju(TrialData(np.arange(6.0), [0, 1, 2, 0, 0, 2], [0, 0, 0, 1, 1, 1]))


def test_estimate_dispatch():
    d = TrialData([1.0, 2.0, 3.0, 2.0, 5.0, 1.0], [0, 1, 2, 0, 1, 2], [0, 0, 0, 1, 1, 1])
    assert estimate(d, "OS").method is Method.OS
    assert estimate(d, Method.XG).value == xing_ganju(d).value
    assert estimate(d, "OSU", means=(0, 0, 0), pilot_alloc=THIRDS).method is Method.OSU
    with pytest.raises(DomainError):
        estimate(d, Method.FIXED)


# ---------------------------------------------------------------- sampling laws


def test_density_os_parameters():
    d = density_os(1.0, 30, (0, 0, 0), THIRDS)
    assert d.lam == 0 and d.family == "stretched-central-chisq"
    d = density_os(1.0, 30, (0, 0, 0.6), THIRDS)
    assert d.lam > 0 and d.df == 29


def test_density_os_quadrature_mean():
    d = density_os(1.0, 30, (0, 0, 0.6), THIRDS)
    mean = integrate.quad(lambda x: x * d.pdf(x), 0, np.inf, limit=200, epsabs=1e-12)[0]
    assert_allclose(mean, 1 + os_bias((0, 0, 0.6), THIRDS, 30), atol=1e-5)
    assert_allclose(d.mean, 1 + os_bias((0, 0, 0.6), THIRDS, 30), rtol=1e-12)


@pytest.mark.parametrize("n1,m", [(30, 3), (60, 6)])
def test_density_xg_quadrature_moments(n1, m):
    d = density_xg(1.0, n1, m)
    mean = integrate.quad(lambda x: x * d.pdf(x), 0, np.inf, epsabs=1e-13)[0]
    assert_allclose(mean, 1.0, atol=1e-8)
    if (n1, m) == (30, 3):
        var = integrate.quad(lambda x: (x - 1) ** 2 * d.pdf(x), 0, np.inf, epsabs=1e-13)[0]
        assert_allclose(var, 2 / 9, atol=1e-6)


def test_density_validation():
    with pytest.raises(DomainError):
        density_xg(1.0, 31, 3)
    with pytest.raises(DomainError):
        density_xg(1.0, 3, 3)
    with pytest.raises(DomainError):
        EstimatorDensity("x", -1.0, 3)


def test_density_cdf_ppf_roundtrip():
    d = density_os(2.0, 60, (0, 0, 0.9), (0.5, 1 / 3, 1 / 6))
    q = np.array([0.01, 0.5, 0.99])
    assert_allclose(d.cdf(d.ppf(q)), q, atol=1e-10)


def _pilots(rng, reps, n1, mu, m=3):
    """Block-randomized balanced pilots: every block holds one subject per group."""
    b = n1 // m
    labels = np.tile(np.arange(3), b)
    y = np.asarray(mu)[labels] + rng.standard_normal((reps, n1))
    return y, labels, np.repeat(np.arange(b), m)


def test_monte_carlo_means_and_fit():
    rng = np.random.default_rng(2024)
    reps, n1 = 20000, 30
    mu = (0, 0, 0.6)
    y, labels, blocks = _pilots(rng, reps, n1, mu)
    os_draws = y.var(axis=1, ddof=1)
    block_sums = y.reshape(reps, n1 // 3, 3).sum(axis=2)
    xg_draws = block_sums.var(axis=1, ddof=1) * (n1 // 3 - 1) / (n1 - 3)
    # agree with the subject-level estimators
    one = TrialData(y[0], labels, blocks)
    assert_allclose(xing_ganju(one).value, xg_draws[0])
    assert_allclose(one_sample_variance(one).value, os_draws[0])

    expected_os = 1 + os_bias(mu, THIRDS, n1)
    assert abs(os_draws.mean() - expected_os) < 3 * os_draws.std() / np.sqrt(reps)
    assert abs(xg_draws.mean() - 1) < 3 * xg_draws.std() / np.sqrt(reps)
    assert stats.kstest(os_draws, density_os(1.0, n1, mu, THIRDS).cdf).pvalue > 0.01
    assert stats.kstest(xg_draws, density_xg(1.0, n1, 3).cdf).pvalue > 0.01


# ---------------------------------------------------------------- data files


def test_read_trial_data_formats(tmp_path):
    p = tmp_path / "a.txt"
    p.write_text("1.5\n2.5\n\n3.0\n")
    d = read_trial_data(p)
    assert d.n1 == 3 and d.labels is None
    p.write_text("1.0,E,0\n2.0,R,0\n3.0,P,0\n")
    d = read_trial_data(p)
    assert d.labels.tolist() == [0, 1, 2] and d.blocks.tolist() == [0, 0, 0]
    p.write_text("1.0 - 0\n2.0 - 0\n3.0 - 1\n4.0 - 1\n")
    d = read_trial_data(p)
    assert d.labels is None and d.blocks.tolist() == [0, 0, 1, 1]


@pytest.mark.parametrize(
    "text,where",
    [
        ("1.0\nabc\n", ":2:"),
        ("1.0 E\n2.0 Q\n", ":2:"),
        ("1 E 0 9\n", ":1:"),
        ("1 E 0\n2 R x\n", ":2:"),
    ],
)
def test_read_trial_data_errors_name_the_line(tmp_path, text, where):
    p = tmp_path / "bad.txt"
    p.write_text(text)
    with pytest.raises(DomainError, match=where):
        read_trial_data(p)


def test_read_trial_data_mixed_labels(tmp_path):
    p = tmp_path / "mixed.txt"
    p.write_text("1.0 E\n2.0 -\n")
    with pytest.raises(DomainError):
        read_trial_data(p)
    p.write_text("1.0 E\n2.0\n")
    with pytest.raises(DomainError):
        read_trial_data(p)
