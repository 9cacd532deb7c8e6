import math

import numpy as np
import pytest
from scipy import special, stats

from gmlimits import domains, maps
from gmlimits.domains import DomainClass, SlowFunction, StableParams, TailSpec
from gmlimits.errors import Degenerate, NotInD, P1NonIntegrable


def _atoms(model, values):
    return TailSpec.from_atoms(maps.observable_distribution(model, maps.depth_table(model, values)))


@pytest.fixture(scope="module")
def stable_tail(poly_q1):
    return _atoms(poly_q1, (np.arange(poly_q1.n_cells) + 1.0) ** (2 / 3))


# ------------------------------------------------------------ classification


def test_finite_law_is_d1(markov2):
    m, obs = markov2
    d = domains.classify(TailSpec.from_atoms(maps.observable_distribution(m, obs)))
    assert d.variant == "D1"
    assert d.mean == pytest.approx(1 / 3) and d.variance == pytest.approx(8 / 9)


def test_stable_tail_is_d3(stable_tail):
    d = domains.classify(stable_tail)
    assert d.variant == "D3"
    assert d.p == pytest.approx(1.5, abs=0.01)
    assert d.beta == 1.0
    # P(f > x) = P(i + 1 > x^1.5) ~ x^-1.5 / zeta(2)
    assert d.L.scale == pytest.approx(1 / special.zeta(2.0), rel=0.02)
    # the full (untruncated) mean is zeta(4/3) / zeta(2)
    assert d.mean == pytest.approx(special.zeta(4 / 3) / special.zeta(2.0), rel=1e-4)


def test_symmetric_stable_tail(poly_q1):
    i = np.arange(poly_q1.n_cells)
    d = domains.classify(_atoms(poly_q1, (i + 1.0) ** (2 / 3) * (-1.0) ** i))
    assert d.variant == "D3"
    assert abs(d.beta) < 0.05


def test_boundary_tail_is_d2(poly_q1):
    d = domains.classify(_atoms(poly_q1, np.sqrt(np.arange(poly_q1.n_cells) + 1.0)))
    assert d.variant == "D2"
    # L(x) = E f^2 1{f <= x} ~ (2 log x + Euler gamma) / zeta(2)
    x = 50.0
    assert d.L(x) == pytest.approx((2 * math.log(x) + np.euler_gamma) / special.zeta(2.0), rel=0.02)


def test_index_above_two_is_d1():
    m = maps.build_countable_bernoulli({"type": "polynomial", "q": 3.0}, truncation_tol=1e-12)
    d = domains.classify(_atoms(m, (np.arange(m.n_cells) + 1.0) ** 1.2))
    assert d.variant == "D1"


def test_light_tail_is_d1():
    m = maps.build_countable_bernoulli({"type": "geometric", "ratio": 0.5}, truncation_tol=1e-12)
    d = domains.classify(_atoms(m, np.arange(m.n_cells, dtype=float)))
    assert d.variant == "D1"
    assert d.mean == pytest.approx(1.0, rel=1e-9)


def test_geometric_lattice_tail_not_in_d():
    # f = 2^(i/p) with m(a_i) = 2^-(i+1): S(x) x^p is log-periodic, not slowly varying
    m = maps.build_countable_bernoulli({"type": "geometric", "ratio": 0.5}, truncation_tol=1e-12)
    with pytest.raises(NotInD):
        domains.classify(_atoms(m, 2.0 ** (np.arange(m.n_cells) / 1.25)))


def test_constant_is_degenerate(markov2):
    m, _ = markov2
    with pytest.raises(Degenerate):
        domains.classify(_atoms(m, [2.0, 2.0]))


def test_analytic_classes():
    assert domains.classify(TailSpec.analytic(1.2, ell={"kind": "constant", "scale": 0.5})).variant == "D3"
    d2 = domains.classify(TailSpec.analytic(2.0, 0.5, 0.5))
    assert d2.variant == "D2" and d2.L(math.e**3) == pytest.approx(6.0)
    d1 = domains.classify(TailSpec.analytic(3.0, 0.5, 0.5))
    assert d1.variant == "D1" and d1.mean == pytest.approx(0.0, abs=1e-12)


def test_oscillating_tail_not_in_d():
    ell = lambda x: 2.0 + np.sin(2 * np.pi * np.log(x) / np.log(2.0))
    with pytest.raises(NotInD) as info:
        domains.classify(TailSpec.analytic(1.5, ell=ell))
    assert info.value.report["passed"] is False


def test_analytic_rejects_bad_weights():
    with pytest.raises(ValueError):
        TailSpec.analytic(1.5, c1=0.7, c2=0.7)
    with pytest.raises(ValueError):
        TailSpec.analytic(-1.0)


def test_report_fields(stable_tail):
    rep = domains.classify(stable_tail).report()
    assert set(rep) == {"variant", "p", "c1", "c2", "beta", "c", "diagnostics"}
    assert rep["c"] == pytest.approx(special.gamma(1 - rep["p"]) * math.cos(rep["p"] * math.pi / 2))


def test_truncated_second_moment_analytic_matches_closed_form():
    # P(|Z| > u) = min(1, u^-3)
    tail = TailSpec.analytic(3.0, 0.5, 0.5)
    x = 10.0
    # density 3 u^-4 on u > 1: int_1^x u^2 3 u^-4 du = 3 (1 - 1/x)
    assert domains.truncated_second_moment(tail, x) == pytest.approx(3 * (1 - 1 / x), rel=1e-8)


# ------------------------------------------------------------ slow variation


def test_slow_variation_examples():
    assert domains.slow_variation_diagnostic(np.log).passed
    # log^3 converges too slowly for tol 0.05 on [10, 1e12]; it must at least improve
    res = domains.slow_variation_diagnostic(lambda x: np.log(x) ** 3)
    assert res.top_deviation < 0.5 * res.bottom_deviation
    assert not domains.slow_variation_diagnostic(lambda x: x**0.1).passed
    assert not domains.slow_variation_diagnostic(
        lambda x: 2.0 + np.sin(2 * np.pi * np.log(x) / np.log(2.0))).passed


def test_slow_function_grid_interpolates_loglog():
    f = SlowFunction("grid", grid_x=(1.0, 10.0, 100.0), grid_y=(1.0, 2.0, 4.0))
    assert f(10.0) == pytest.approx(2.0)
    assert f(1000.0) == pytest.approx(8.0)
    assert SlowFunction.from_config(f.to_dict())(31.0) == pytest.approx(f(31.0))


# ------------------------------------------------------------------ norming


def test_norming_d1():
    ns = domains.NormingSequence(DomainClass("D1", mean=0.25, variance=1.0))
    assert ns(100) == (25.0, 10.0)


def test_norming_d3_constant_l():
    d = DomainClass("D3", mean=2.0, p=1.5, L=SlowFunction("constant", scale=0.6))
    a, b = domains.NormingSequence(d)(10_000)
    assert a == 20_000.0
    assert b == pytest.approx((10_000 * 0.6) ** (1 / 1.5), rel=1e-14)


def test_norming_d3_small_index_has_no_centering():
    d = DomainClass("D3", p=0.5, L=SlowFunction())
    assert domains.NormingSequence(d)(100) == (0.0, pytest.approx(1e4))


def test_norming_d2_solves_equation():
    ell = SlowFunction("log", scale=2.0, power=1.0)
    d = DomainClass("D2", mean=0.0, p=2.0, L=ell)
    _, b = domains.NormingSequence(d)(10_000)
    assert b**2 == pytest.approx(10_000 * 2.0 * math.log(b), rel=1e-12)


def test_norming_d3_log_slow_function():
    ell = SlowFunction("log", scale=1.0, power=2.0)
    d = DomainClass("D3", mean=1.0, p=1.5, L=ell)
    _, b = domains.NormingSequence(d)(1e6)
    assert b**1.5 == pytest.approx(1e6 * math.log(b) ** 2, rel=1e-12)


def test_norming_p1_asymmetric_rejected():
    with pytest.raises(P1NonIntegrable):
        domains.NormingSequence(DomainClass("D3", p=1.0, c1=1.0, c2=0.0, L=SlowFunction()))


# ------------------------------------------------------------- stable laws


def test_stable_cf_gaussian_and_cauchy():
    cauchy = StableParams(1.0, math.pi / 2, 0.0)
    t = np.array([-2.0, 0.0, 0.5])
    assert np.allclose(domains.stable_cf(cauchy, t), np.exp(-math.pi / 2 * np.abs(t)))


@pytest.mark.parametrize("x", [-50.0, -3.3, -0.1, 0.0, 0.7, 5.0, 49.9])
def test_cauchy_cdf_closed_form(x):
    params = StableParams(1.0, math.pi / 2, 0.0)
    assert domains.stable_cdf(params, x) == pytest.approx(0.5 + math.atan(2 * x / math.pi) / math.pi,
                                                          abs=1e-9)


@pytest.mark.parametrize("x", [0.05, 0.3, 1.0, 4.0, 40.0])
def test_levy_cdf_closed_form(x):
    # p = 1/2, beta = 1: Levy law with scale c^2, F(x) = erfc(sqrt(c^2 / (2x)))
    c = 1.3
    params = StableParams(0.5, c, 1.0)
    assert domains.stable_cdf(params, x) == pytest.approx(special.erfc(math.sqrt(c * c / (2 * x))),
                                                          abs=1e-9)
    assert domains.stable_cdf(params, -x) == pytest.approx(0.0, abs=1e-9)


@pytest.mark.parametrize("p, beta", [(1.5, 1.0), (1.2, -0.4), (0.8, 0.5)])
def test_stable_cdf_against_scipy(p, beta):
    c = 0.9
    params = StableParams(p, c, beta)
    law = stats.levy_stable(p, beta, scale=c ** (1 / p))
    law.dist.parameterization = "S1"
    for x in (-2.0, 0.3, 3.0):
        assert domains.stable_cdf(params, x) == pytest.approx(float(law.cdf(x)), abs=2e-6)


def test_stable_params_from_domain():
    sp = domains.stable_params(DomainClass("D3", p=1.5, c1=0.75, c2=0.25))
    assert sp.c == pytest.approx(special.gamma(-0.5) * math.cos(0.75 * math.pi))
    assert sp.beta == 0.5
    assert domains.stable_params(DomainClass("D3", p=1.0, c1=0.5, c2=0.5)).c == math.pi / 2


def test_normal_params_routing():
    sp = domains.normal_params(4.0)
    assert domains.stable_cdf(sp, 2.0) == pytest.approx(stats.norm.cdf(1.0), abs=1e-15)
    assert domains.stable_cf(sp, 1.0) == pytest.approx(math.exp(-2.0))


# ---------------------------------------------------------- phi diagnostic


def test_phi_ratio(markov2, stable_tail):
    m, obs = markov2
    t = np.geomspace(1e-3, 0.5, 12)
    bounded = domains.phi_diagnostic(TailSpec.from_atoms(maps.observable_distribution(m, obs)), t)
    assert not bounded.ratio_to_zero
    heavy = domains.phi_diagnostic(stable_tail, t)
    assert heavy.ratio_to_zero
    assert np.allclose(bounded.phi, 1 - (2 / 3 * np.cos(bounded.t) + 1 / 3 * np.cos(-bounded.t)))
