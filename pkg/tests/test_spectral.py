import csv
import math

import numpy as np
import pytest

from gmlimits import maps, spectral
from gmlimits.errors import GapCollapse, ObservableNotRepresentable, SlowMixing, StepTooLarge

P2 = np.array([[0.9, 0.1], [0.2, 0.8]])


def _top_root(t):
    # eigenvalues of P diag(e^{itf}) for f = (1, -1): x^2 - tr x + det = 0
    tr = 0.9 * np.exp(1j * t) + 0.8 * np.exp(-1j * t)
    det = np.linalg.det(P2)
    r = np.sqrt(tr * tr - 4 * det)
    roots = [(tr + r) / 2, (tr - r) / 2]
    return max(roots, key=abs)


def _exact_cf(t, n, pi=np.array([2 / 3, 1 / 3]), f=np.array([1.0, -1.0])):
    d = np.diag(np.exp(1j * t * f))
    return pi @ d @ np.linalg.matrix_power(P2 @ d, n - 1) @ np.ones(2)


def test_iid_identity(coin):
    m, obs = coin
    t = np.linspace(-1, 1, 201)
    pts = spectral.spectrum(m, obs, t)
    lam = np.array([p.lam for p in pts])
    mu = np.array([p.mu for p in pts])
    assert np.max(np.abs(lam - (1 + np.exp(1j * t)) / 2)) < 1e-12
    assert np.max(np.abs(mu - 1)) < 1e-12


@pytest.mark.parametrize("t", [-0.9, -0.1, 0.0, 0.05, 0.4, 1.0])
def test_markov_lambda_closed_form(markov2, t):
    m, obs = markov2
    pt = spectral.Spectrum(m, obs).point(t)
    assert abs(pt.lam - _top_root(t)) < 1e-14
    # the roots multiply to det(P), so the gap ratio is |det| / |lambda|^2
    assert pt.gap == pytest.approx(abs(np.linalg.det(P2)) / abs(_top_root(t)) ** 2, rel=1e-12)


@pytest.mark.parametrize("t, n", [(0.1, 5), (0.3, 10), (0.5, 40)])
def test_characteristic_function_decomposition(markov2, t, n):
    m, obs = markov2
    direct, spec, gap = spectral.characteristic_check(m, obs, t, n)
    assert abs(direct - _exact_cf(t, n)) < 1e-13
    assert abs(direct - spec) < 10 * gap**n


def test_mu_at_zero_is_one(markov2):
    m, obs = markov2
    assert abs(spectral.Spectrum(m, obs).point(0.0).mu - 1) < 1e-13


def test_lambda_identity(markov2):
    m, obs = markov2
    for t in (0.2, -0.7):
        assert spectral.lambda_identity_check(m, obs, t) < 1e-13


def test_coboundary_lambda_is_pure_phase():
    m = maps.build_finite_markov([[0.5, 0.3, 0.2], [0.1, 0.6, 0.3], [0.3, 0.3, 0.4]])
    obs = maps.coboundary_observable(m, [0.0, 1.0, -2.0], c=3.0)
    sp = spectral.Spectrum(m, obs)
    for t in (0.1, 0.5, -0.8):
        assert abs(sp.lam(t) - np.exp(3j * t)) < 1e-12


def test_depth_lift_and_sparse_path():
    rng_ = np.random.default_rng(1)
    p = rng_.random((50, 50)) + 0.05
    p /= p.sum(axis=1, keepdims=True)
    m = maps.build_finite_markov(p)
    f1 = rng_.normal(size=50)
    shallow = maps.depth_table(m, f1)
    deep = maps.depth_table(m, np.repeat(f1[:, None], 50, axis=1))
    assert len(m.cylinders(2)) > spectral.DENSE_MAX
    for t in (0.2, 0.6):
        lam1 = spectral.Spectrum(m, shallow).lam(t)
        lam2 = spectral.Spectrum(m, deep, max_dim=3000).lam(t)
        assert abs(lam1 - lam2) < 1e-10


def test_gap_collapse_detected():
    tm = spectral.TransferMatrix(0.0, 1, np.arange(2).reshape(-1, 1), np.array([0.5, 0.5]),
                                 np.ones(2), matrix=np.diag([1.0, -1.0]))
    with pytest.raises(GapCollapse):
        spectral.leading_eigen(tm)
    with pytest.raises(GapCollapse):
        spectral.check_grid([0.1, 2.0], 1.0)


def test_induced_not_representable():
    model, obs = maps.build_induced_doubling(0.6)
    with pytest.raises(ObservableNotRepresentable):
        spectral.Spectrum(model, obs)


def test_truncation_bias_reported():
    m = maps.build_countable_bernoulli({"type": "polynomial", "q": 1.0}, truncation_tol=1e-6)
    obs = maps.power_observable(m, 0.25)
    pt = spectral.Spectrum(m, obs).point(0.5)
    assert 0 < pt.truncation_bias < 2e-3


# ---------------------------------------------------------------- variance


def test_green_kubo_closed_form(markov2):
    m, obs = markov2
    gk = spectral.green_kubo_sigma2(m, obs)
    assert abs(gk.sigma2 - 136 / 27) < 1e-9
    assert gk.error_bound < 1e-9
    # lag-k covariance (8/9) 0.7^k
    assert gk.correlations[:4] == pytest.approx(8 / 9 * 0.7 ** np.arange(4), rel=1e-12)


def test_sigma2_from_lambda(markov2):
    m, obs = markov2
    assert abs(spectral.sigma2_from_lambda(m, obs) - 136 / 27) < 1e-6


def test_large_steps_rejected(markov2):
    m, obs = markov2
    with pytest.raises(StepTooLarge):
        spectral.sigma2_from_lambda(m, obs, steps=(0.8, 0.4))


def test_slow_mixing_rejected():
    m = maps.build_finite_markov([[1 - 1e-5, 1e-5], [1e-5, 1 - 1e-5]])
    with pytest.raises(SlowMixing):
        spectral.green_kubo_sigma2(m, maps.depth_table(m, [1.0, -1.0]))


def test_bias_function(markov2):
    m, obs = markov2
    bf = spectral.bias_function_u1(m, obs)
    assert bf.discrepancy < 1e-10
    # sum_{k>=1} T^k f~ has m-mean zero and i int f u1 = -sum_k Cov_k = -56/27
    c2 = 1j * (m.stationary @ (obs.values * bf.u1))
    assert c2 == pytest.approx(-56 / 27, abs=1e-10)


# ---------------------------------------------------------------- expansion


def test_expansion_bounded_markov(markov2):
    m, obs = markov2
    fit = spectral.expansion_fit(m, obs, 2.0, np.geomspace(1e-3, 1e-1, 21), min_decades=2)
    assert fit.coefficients[2] == pytest.approx(-56 / 27, abs=1e-9)
    assert fit.q_hat >= 2.8


def test_expansion_iid_is_exact(coin):
    m, obs = coin
    fit = spectral.expansion_fit(m, obs, 2.0)
    assert fit.degenerate and fit.q_hat == math.inf


def test_expansion_grid_span(markov2):
    m, obs = markov2
    with pytest.raises(ValueError):
        spectral.expansion_fit(m, obs, 2.0, np.geomspace(1e-2, 1e-1, 10))


def test_expansion_heavy_tail_chain():
    m = maps.build_reset_chain(300, 1.0, 0.5)
    obs = maps.power_observable(m, 2 / 3)
    fit = spectral.expansion_fit(m, obs, 1.5)
    assert fit.q_hat > 1.5 and fit.band < 0.5


# ---------------------------------------------------------------- coboundary


def test_coboundary_detected():
    m = maps.build_finite_markov([[0.5, 0.3, 0.2], [0.1, 0.6, 0.3], [0.3, 0.3, 0.4]])
    obs = maps.coboundary_observable(m, [0.0, 1.0, -2.0], c=3.0)
    res = spectral.coboundary_detect(m, obs, tol=1e-10, n=2000, n_traj=20)
    assert res.verdict == "Coboundary"
    assert abs(res.c_estimate - 3.0) < 1e-10
    assert np.ptp(res.centered_sums) <= 2 * 3.0 + 1e-9


def test_non_coboundary(markov2):
    m, obs = markov2
    assert spectral.coboundary_detect(m, obs).verdict == "NotCoboundary"


def test_spectrum_csv(tmp_path, markov2):
    m, obs = markov2
    path = tmp_path / "s.csv"
    spectral.write_spectrum_csv(path, spectral.spectrum(m, obs, np.linspace(-1, 1, 5)))
    rows = list(csv.reader(open(path)))
    assert rows[0] == ["t", "re_lambda", "im_lambda", "abs_lambda", "re_mu", "im_mu", "gap"]
    assert len(rows) == 6
