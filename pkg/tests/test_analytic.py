import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import integrate, stats

from stitsim import analytic as A
from stitsim.directional import DirectionalModel
from stitsim.quadrature import adaptive_gauss_legendre_2d

ISO = DirectionalModel.isotropic()
AXIS = DirectionalModel.axis()
TABLE = [0.43289, 0.21384, 0.11841, 0.07075]


# quadrature ----------------------------------------------------------------

def test_quadrature_polynomial_exact():
    val, err = adaptive_gauss_legendre_2d(lambda a, b: a ** 5 * b ** 3, tol=1e-13)
    assert val[0] == pytest.approx(1 / 24, abs=1e-14)


def test_quadrature_vector_valued_and_breakpoints():
    f = lambda a, b: np.stack([np.exp(a + b), 1 / (1 + a * b)], axis=1)
    val, _ = adaptive_gauss_legendre_2d(f, tol=1e-12, initial=([0, 0.5, 1], [0, 1]))
    ref2, _ = integrate.dblquad(lambda b, a: 1 / (1 + a * b), 0, 1, 0, 1, epsabs=1e-13)
    assert val[0] == pytest.approx((math.e - 1) ** 2, rel=1e-12)
    assert val[1] == pytest.approx(ref2, abs=1e-11)


def test_quadrature_boundary_layer():
    # sharp layer near a = 1, as in the vertex-count integrands
    f = lambda a, b: 200 * np.exp(-200 * (1 - a)) * (1 + 0 * b)
    val, _ = adaptive_gauss_legendre_2d(f, tol=1e-10)
    assert val[0] == pytest.approx(1 - math.exp(-200), abs=1e-9)


# vertex counts ---------------------------------------------------------------

def test_pn_table_values():
    got = A.eval_pn(np.arange(4))
    assert np.allclose(got, TABLE, atol=1e-5)
    for n in range(4):
        assert abs(A.eval_pn_exact(n) - got[n]) < 1e-9
        assert A.eval_pn_exact(n) == pytest.approx(TABLE[n], abs=1e-5)


def test_pn_exact_rejects_large_n():
    with pytest.raises(ValueError):
        A.eval_pn_exact(4)
    with pytest.raises(ValueError):
        A.eval_pn(-1)


def test_pn_against_scipy_dblquad():
    # independent oracle: integrate the defining double integral with scipy
    for n in (0, 5, 20):
        f = lambda b, a: 3 * (1 - a) ** 3 * (3 - (1 - a) * (3 - b)) ** n / (
            3 - (1 - a) * (2 - b)) ** (n + 1)
        ref, _ = integrate.dblquad(f, 0, 1, 0, 1, epsabs=1e-12, epsrel=1e-12)
        assert A.eval_pn(n) == pytest.approx(ref, abs=1e-9)


def test_pmn_marginalises_to_pn():
    for k in range(7):
        m = np.arange(k + 1)
        assert A.eval_pmn(m, k - m).sum() == pytest.approx(A.eval_pn(k), abs=1e-8)
    assert A.eval_pmn(0, 0) == pytest.approx(A.eval_pn(0), abs=1e-8)


def test_total_mass_and_mean_series():
    p = A.eval_pn(np.arange(1001))
    assert p.sum() >= 0.999
    m1 = (np.arange(1001) * p).sum()
    assert 1.95 <= m1 <= 2.0


def test_vertex_moments_series_consistent():
    vm = A.vertex_moments(n_max=400)
    assert vm["exact"]["mean_total"] == 2 and vm["exact"]["var_X"] == pytest.approx(11 / 3)
    s = vm["series"]
    assert s["total"]["mean"] + s["total"]["mean_tail"] == pytest.approx(2, abs=2e-3)
    assert s["T"]["mean"] + s["T"]["mean_tail"] == pytest.approx(1, abs=2e-3)
    assert s["X"]["mean"] + s["X"]["mean_tail"] == pytest.approx(1, abs=2e-3)
    assert s["total"]["var"] == pytest.approx(59 / 3, rel=0.02)
    assert s["T"]["var"] == pytest.approx(8, rel=0.02)
    assert s["X"]["var"] == pytest.approx(11 / 3, rel=0.02)
    assert vm["series_cov"] == pytest.approx(float(A.VERTEX_MOMENTS["cov"]), rel=0.05)


def test_moment_identity_and_divergence():
    M = A.VERTEX_MOMENTS
    assert M["var_total"] == M["var_T"] + M["var_X"] + 2 * M["cov"]
    with pytest.raises(ValueError):
        A.vertex_count_moment(3)
    assert A.vertex_count_moment(2, "T") == pytest.approx(9.0)


# birth times ---------------------------------------------------------------

def test_birth_laws_values():
    b = A.birth_laws(A.AnalyticContext(1.0, ISO))
    assert b.p_beta(0.5) == pytest.approx(0.75)
    assert np.allclose(b.carrier_given_beta(np.array([0.1, 0.3, 0.49]), 0.5), 2)
    tot, _ = integrate.dblquad(lambda r, s: b.joint(s, r), 0, 1, 0, lambda s: s)
    assert tot == pytest.approx(1, abs=1e-8)
    mass, _ = integrate.quad(b.p_carrier, 0, 1)
    assert mass == pytest.approx(1)
    assert b.cdf_carrier(0.4) == pytest.approx(integrate.quad(b.p_carrier, 0, 0.4)[0])


# lengths -------------------------------------------------------------------

def _mixture_density(x, t, lam):
    # independent oracle: mix Exp(lam s) over the birth-time density 3 s^2 / t^3
    return integrate.quad(lambda s: 3 * s ** 2 / t ** 3 * lam * s * math.exp(-lam * s * x),
                          0, t, epsabs=1e-14)[0]


@pytest.mark.parametrize("x", [0.05, 0.7, 3.0, 12.0])
def test_isotropic_length_density(x):
    ll = A.length_laws(A.AnalyticContext(1.0, ISO))
    ref = _mixture_density(x, 1.0, 0.5)
    assert ll.density(x) == pytest.approx(ref, rel=1e-8)
    assert A.isotropic_length_density(x, 1.0) == pytest.approx(ref, rel=1e-6)


def test_length_density_small_x_limit_finite():
    ll = A.length_laws(A.AnalyticContext(1.0, ISO))
    # limit as x -> 0 of the mixture: E[lam beta] = lam * 3t/4
    assert ll.density(1e-6) == pytest.approx(0.5 * 0.75, rel=1e-6)


def test_survival_integrates_to_conditional_mean():
    for model, u in ((ISO, [0, 0, 1]), (AXIS, [1, 0, 0])):
        ll = A.length_laws(A.AnalyticContext(2.0, model))
        m, _ = integrate.quad(lambda x: ll.survival(x, np.array(u, float)), 0, np.inf)
        assert m == pytest.approx(1.5 / (model.lambda_segment(u) * 2.0), rel=1e-8)


def test_length_cdf_and_mean_consistent():
    ll = A.length_laws(A.AnalyticContext(3.0, AXIS))
    m, _ = integrate.quad(lambda x: 1 - ll.cdf(x), 0, np.inf)
    assert m == pytest.approx(ll.mean(), rel=1e-7)
    assert integrate.quad(ll.density, 0, np.inf)[0] == pytest.approx(1, abs=1e-8)


def test_poisson_edge_laws():
    pe = A.poisson_edge_laws(ISO, 2.0)
    assert pe.survival(1.0, [0, 0, 1]) == pytest.approx(math.exp(-1))
    assert pe.weighted_survival(1e-12, [0, 0, 1]) == pytest.approx(1)
    assert A.poisson_edge_laws(ISO, 1.0).mean() == pytest.approx(2)


def test_starred_laws():
    st_ = A.starred_laws(ISO, 1.0, 2.0)
    u = np.array([0, 0, 1.0])
    assert st_.mean(u) == pytest.approx(6 / 5)
    m, _ = integrate.quad(lambda x: st_.survival(x, u), 0, np.inf, epsabs=1e-12)
    assert m == pytest.approx(6 / 5, abs=1e-8)
    xs = np.array([0.3, 1.0, 4.0])
    assert np.allclose(st_.survival(xs, u), st_.survival_closed_form(xs, u), rtol=1e-9)
    assert np.allclose(st_.weighted_survival(xs, u), st_.weighted_survival_closed_form(xs, u),
                       rtol=1e-9)
    w0 = st_.weighted_survival(np.array([1e-9]), u)[0]
    assert w0 == pytest.approx(1, abs=1e-6)
    mw, _ = integrate.quad(lambda x: st_.weighted_survival(x, u), 0, np.inf)
    # length-weighted mean = E l^2 / E l from the typical survival
    m2, _ = integrate.quad(lambda x: 2 * x * st_.survival(x, u), 0, np.inf)
    assert mw == pytest.approx(m2 / (6 / 5), rel=1e-7)
    # r -> s: segments born at time s only, Exp(lam s) lengths
    near = A.starred_laws(ISO, 2.0 - 1e-7, 2.0)
    assert near.survival(0.8, u) == pytest.approx(math.exp(-0.5 * 2 * 0.8), rel=1e-5)


def test_edge_length_intensities():
    assert A.edge_length_intensity(ISO, 2.0) == pytest.approx(math.pi)
    assert A.edge_length_intensity(AXIS, 3.0) == pytest.approx(6.0)


@settings(max_examples=40, deadline=None)
@given(st.floats(0.1, 5), st.floats(0.05, 0.95))
def test_edge_length_decomposition(s, frac):
    # L_V(s) = L_V(r) + L_V(r, s) + (length born after r on new facets)
    r = frac * s
    for m in (ISO, AXIS):
        z2 = m.zeta_constants()[0]
        assert (A.edge_length_intensity(m, s) - A.edge_length_intensity(m, r)
                - A.edge_length_intensity(m, s, r)) == pytest.approx(z2 * (s - r) ** 2, rel=1e-9)


# samplers ------------------------------------------------------------------

def test_typical_sampler_basic_moments():
    ctx = A.AnalyticContext(10.0, ISO)
    s = A.sample_typical_marks(ctx, np.random.default_rng(0), 200_000)
    assert len(s) == 200_000
    n = s.n_total
    assert abs(n.mean() - 2) < 5 * n.std() / math.sqrt(len(n))
    p0 = (n == 0).mean()
    assert abs(p0 - TABLE[0]) < 3 * math.sqrt(TABLE[0] * (1 - TABLE[0]) / len(n))
    assert np.all(s.carrier_birth < s.birth) and np.all(s.n_X_birth <= s.n_X)
    assert stats.kstest((s.birth / 10) ** 3, "uniform").pvalue > 0.01
    assert stats.kstest(s.length, A.length_laws(ctx).cdf).pvalue > 0.01


def test_typical_sampler_t_free_counts():
    a = A.sample_typical_marks(A.AnalyticContext(10.0, ISO), np.random.default_rng(1), 100_000)
    b = A.sample_typical_marks(A.AnalyticContext(2.0, AXIS), np.random.default_rng(2), 100_000)
    ca = np.bincount(np.minimum(a.n_total, 8), minlength=9)
    cb = np.bincount(np.minimum(b.n_total, 8), minlength=9)
    assert stats.chi2_contingency(np.vstack([ca, cb]))[1] > 0.01


def test_weighted_sampler():
    t = 1.0
    ctx = A.AnalyticContext(t, ISO)
    w = A.sample_weighted_marks(ctx, np.random.default_rng(3), 200_000)
    # (beta, beta_carr) uniform on the triangle: beta^2/t^2 and carr/beta uniform
    assert stats.kstest((w.birth / t) ** 2, "uniform").pvalue > 0.01
    assert stats.kstest(w.carrier_birth / w.birth, "uniform").pvalue > 0.01
    # E l = int over the triangle of (2/t^2) * 2/(lam s) = 4/(lam t)
    assert abs(w.length.mean() - 8.0) < 4 * w.length.std() / math.sqrt(len(w))
    # length-reweighting typical samples reproduces the weighted mean birth time
    s = A.sample_typical_marks(ctx, np.random.default_rng(4), 400_000)
    rw = (s.length * s.birth).sum() / s.length.sum()
    assert rw == pytest.approx(w.birth.mean(), rel=0.02)
    assert w.birth.mean() == pytest.approx(2 * t / 3, rel=0.01)


def test_single_draw_returns_scalars():
    one = A.sample_typical_marks(A.AnalyticContext(1.0, ISO), np.random.default_rng(5))
    assert np.ndim(one.length) == 0 and one.direction.shape == (3,)


def test_literal_weighted_starred_display_is_not_a_survival_function():
    # The published elementary expression for the weighted survival diverges
    # at 0; the implementation uses the expression derived from the birth law.
    lam, r, s = 0.5, 1.0, 2.0

    def literal(x):
        return 2 / (lam ** 2 * (s - r) ** 2 * x ** 2) * (
            3 * (np.exp(-lam * r * x) - np.exp(-lam * s * x))
            + lam ** 2 * s * x ** 2 * (r * np.exp(-lam * r * x) - s * np.exp(-lam * s * x)))

    assert literal(1e-4) > 100
    st_ = A.starred_laws(ISO, r, s)
    assert st_.weighted_survival_closed_form(1e-4, [0, 0, 1]) == pytest.approx(1, abs=1e-3)
