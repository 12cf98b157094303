"""Closed forms, quadratures and semi-analytic mark samplers for I-segments.

Everything here is independent of the geometric engine: the samplers draw
marks and interior-vertex counts of the typical (or length-weighted) I-segment
directly from their conditional laws, and serve as the oracle the
simulation is checked against.
"""
from __future__ import annotations

from dataclasses import dataclass, fields
from fractions import Fraction
from math import log

import numpy as np
from scipy.special import gammainc, gammaincc, gammaln

from .directional import DirectionalModel
from .quadrature import adaptive_gauss_legendre_2d

LN2, LN3 = log(2.0), log(3.0)

# (coefficient of ln 3, coefficient of ln 2, constant)
_PN_EXACT = {
    0: (Fraction(189, 8), Fraction(-26), Fraction(-15, 2)),
    1: (Fraction(1593, 16), Fraction(-107), Fraction(-35)),
    2: (Fraction(5319, 16), Fraction(-350), Fraction(-245, 2)),
    3: (Fraction(31617, 32), Fraction(-1025), Fraction(-4499, 12)),
}

VERTEX_MOMENTS = {
    "mean_total": Fraction(2),
    "var_total": Fraction(59, 3),
    "mean_T": Fraction(1),
    "var_T": Fraction(8),
    "mean_X": Fraction(1),
    "var_X": Fraction(11, 3),
    # Var(total) = Var_T + Var_X + 2 Cov
    "cov": Fraction(4),
}


@dataclass(frozen=True)
class AnalyticContext:
    t: float
    model: DirectionalModel

    def __post_init__(self):
        if not self.t > 0:
            raise ValueError("construction time must be positive")


@dataclass
class MarkSample:
    """Marks and interior-vertex counts.  Fields are scalars for a single
    draw and arrays for a batch."""

    length: np.ndarray
    direction: np.ndarray
    birth: np.ndarray
    carrier_birth: np.ndarray
    n_T: np.ndarray
    n_X: np.ndarray
    n_X_birth: np.ndarray

    def __len__(self):
        return int(np.size(self.length))

    def select(self, mask) -> "MarkSample":
        return MarkSample(**{f.name: getattr(self, f.name)[mask] for f in fields(self)})

    @property
    def n_total(self):
        return self.n_T + self.n_X


# ---------------------------------------------------------------------------
# vertex-count distribution

def _pn_integrand(ns):
    ns = np.asarray(ns, dtype=float)

    def f(a, b):
        a = a[:, None]
        b = b[:, None]
        c = 1 - a
        num = 3 - c * (3 - b)
        den = 3 - c * (2 - b)
        with np.errstate(divide="ignore"):
            lognum = np.where(ns > 0, ns * np.log(num), 0.0)
        return 3 * c ** 3 * np.exp(lognum - (ns + 1) * np.log(den))
    return f


def _graded_breaks(nmax: float) -> np.ndarray:
    # the integrand concentrates in a layer of width ~3/n below a = 1
    k = int(np.clip(np.ceil(np.log2(max(nmax, 1.0))) + 2, 1, 14))
    return np.concatenate([[0.0], 1 - 0.5 ** np.arange(1, k + 1), [1.0]])


def eval_pn(n, quad_tol: float = 1e-10):
    """Probability that the typical I-segment has ``n`` interior vertices.

    ``n`` may be an int or a sequence of ints; the double integral over the
    unit square is evaluated by adaptive tensor Gauss-Legendre quadrature.
    """
    scalar = np.ndim(n) == 0
    ns = np.atleast_1d(np.asarray(n))
    if np.any(ns < 0):
        raise ValueError("n must be non-negative")
    val, _ = adaptive_gauss_legendre_2d(
        _pn_integrand(ns), tol=quad_tol,
        initial=(_graded_breaks(ns.max()), [0.0, 1.0]))
    val = np.clip(val, 0.0, 1.0)
    return float(val[0]) if scalar else val


def eval_pn_exact(n: int) -> float:
    """Closed-form logarithmic expression for ``n`` in 0..3."""
    if n not in _PN_EXACT:
        raise ValueError("closed forms are available for n = 0..3 only")
    c3, c2, c0 = _PN_EXACT[n]
    return float(c3) * LN3 + float(c2) * LN2 + float(c0)


def _pmn_integrand(ms, ns):
    ms = np.asarray(ms, dtype=float)
    ns = np.asarray(ns, dtype=float)
    logc = np.log(3.0) + ms * np.log(2.0) + gammaln(ms + ns + 1) - gammaln(ms + 1) - gammaln(ns + 1)

    def f(a, b):
        a = a[:, None]
        b = b[:, None]
        c = 1 - a
        num = 1 - c * (1 - b)
        den = 3 - c * (2 - b)
        with np.errstate(divide="ignore"):
            la = np.where(ms > 0, ms * np.log(a), 0.0)
            ln = np.where(ns > 0, ns * np.log(num), 0.0)
        return c ** 3 * np.exp(logc + la + ln - (ms + ns + 1) * np.log(den))
    return f


def eval_pmn(m, n, quad_tol: float = 1e-10):
    """Probability of exactly ``m`` T-vertices and ``n`` X-vertices.

    ``m`` and ``n`` broadcast against each other.
    """
    scalar = np.ndim(m) == 0 and np.ndim(n) == 0
    ms, ns = (np.atleast_1d(v).ravel() for v in np.broadcast_arrays(m, n))
    if np.any(ms < 0) or np.any(ns < 0):
        raise ValueError("counts must be non-negative")
    val, _ = adaptive_gauss_legendre_2d(
        _pmn_integrand(ms, ns), tol=quad_tol,
        initial=(_graded_breaks((ms + ns).max()), [0.0, 1.0]))
    val = np.clip(val, 0.0, 1.0)
    return float(val[0]) if scalar else val


def eval_pm_T(m, quad_tol: float = 1e-12):
    """Marginal law of the T-vertex count (sum of ``eval_pmn`` over X)."""
    from scipy.integrate import quad

    def one(k):
        g = lambda a: 3 * (1 - a) ** 3 / (1 + a) * (2 * a / (1 + a)) ** k
        pts = [1 - 0.5 ** j for j in range(1, 12)]
        return quad(g, 0, 1, points=pts, epsabs=quad_tol, limit=400)[0]
    return np.array([one(k) for k in np.atleast_1d(m)])


def eval_pn_X(n, quad_tol: float = 1e-10):
    """Marginal law of the X-vertex count (sum of ``eval_pmn`` over T)."""
    ns = np.atleast_1d(np.asarray(n, dtype=float))

    def f(a, b):
        a = a[:, None]
        b = b[:, None]
        c = 1 - a
        num = 1 - c * (1 - b)
        den = 1 + b * c
        with np.errstate(divide="ignore"):
            ln = np.where(ns > 0, ns * np.log(num), 0.0)
        return 3 * c ** 3 * np.exp(ln - (ns + 1) * np.log(den))
    val, _ = adaptive_gauss_legendre_2d(
        f, tol=quad_tol, initial=(_graded_breaks(ns.max()), _graded_breaks(ns.max())))
    return val


def pn_table(quad_tol: float = 1e-10) -> list[dict]:
    """Rows ``n, exact, quadrature, difference`` for n = 0..3."""
    quad = eval_pn(np.arange(4), quad_tol)
    rows = []
    for n in range(4):
        ex = eval_pn_exact(n)
        rows.append({"n": n, "exact": ex, "quadrature": float(quad[n]),
                     "difference": float(quad[n] - ex)})
    return rows


def vertex_count_moment(order: int, kind: str = "total") -> float:
    """Exact raw moment of the interior-vertex count (``kind`` in
    ``total``, ``T``, ``X``).  Orders of three and above diverge."""
    if order >= 3:
        raise ValueError("moments of order >= 3 of the vertex counts are infinite")
    if order < 0:
        raise ValueError("order must be non-negative")
    if order == 0:
        return 1.0
    key = {"total": "total", "T": "T", "X": "X"}[kind]
    mean = VERTEX_MOMENTS[f"mean_{key}"]
    if order == 1:
        return float(mean)
    return float(VERTEX_MOMENTS[f"var_{key}"] + mean * mean)


def vertex_moments(n_max: int = 1000, quad_tol: float = 1e-12) -> dict:
    """Exact vertex-count moments plus a truncated-series check.

    The check sums ``n * p_n`` and ``n**2 * p_n`` up to ``n_max`` and
    estimates the remainders from the ``~ C n**-4`` tail of ``p_n``.
    """
    exact = {k: float(v) for k, v in VERTEX_MOMENTS.items()}
    n = np.arange(n_max + 1)
    pn = eval_pn(n, quad_tol)
    pT = eval_pm_T(n)
    pX = eval_pn_X(n, quad_tol=max(quad_tol, 1e-11))
    # tail constant from the last decade of the table
    def series(p):
        C = float(np.median(p[n_max // 2:] * n[n_max // 2:] ** 4))
        m1 = float((n * p).sum())
        m2 = float((n * n * p).sum())
        tail1 = C / (2 * n_max ** 2)
        tail2 = C / n_max
        return {"mass": float(p.sum()), "mean": m1, "mean_tail": tail1,
                "second": m2, "second_tail": tail2,
                "var": (m2 + tail2) - (m1 + tail1) ** 2}
    out = {"total": series(pn), "T": series(pT), "X": series(pX)}
    cov = (out["total"]["var"] - out["T"]["var"] - out["X"]["var"]) / 2
    return {"exact": exact, "series": out, "series_cov": cov}


# ---------------------------------------------------------------------------
# birth times

class BirthLaws:
    def __init__(self, ctx: AnalyticContext):
        self.t = ctx.t

    def _in(self, *xs):
        return np.all([(np.asarray(x) > 0) & (np.asarray(x) < self.t) for x in xs], axis=0)

    def joint(self, s, r):
        s, r = np.asarray(s, float), np.asarray(r, float)
        return np.where((r > 0) & (r < s) & (s < self.t), 3 * s / self.t ** 3, 0.0)

    def p_beta(self, s):
        s = np.asarray(s, float)
        return np.where(self._in(s), 3 * s ** 2 / self.t ** 3, 0.0)

    def cdf_beta(self, s):
        return np.clip(np.asarray(s, float) / self.t, 0, 1) ** 3

    def p_carrier(self, r):
        r = np.asarray(r, float)
        return np.where(self._in(r), 1.5 * (self.t ** 2 - r ** 2) / self.t ** 3, 0.0)

    def cdf_carrier(self, r):
        x = np.clip(np.asarray(r, float) / self.t, 0, 1)
        return 1.5 * x - 0.5 * x ** 3

    def beta_given_carrier(self, s, r):
        s, r = np.asarray(s, float), np.asarray(r, float)
        ok = (r > 0) & (r < s) & (s < self.t)
        return np.where(ok, 2 * s / np.where(ok, self.t ** 2 - r ** 2, 1.0), 0.0)

    def carrier_given_beta(self, r, s):
        s, r = np.asarray(s, float), np.asarray(r, float)
        ok = (r > 0) & (r < s) & (s < self.t)
        return np.where(ok, 1 / np.where(ok, s, 1.0), 0.0)


def birth_laws(ctx: AnalyticContext) -> BirthLaws:
    return BirthLaws(ctx)


# ---------------------------------------------------------------------------
# lengths

def _check_x(x):
    x = np.asarray(x, dtype=float)
    if np.any(x <= 0):
        raise ValueError("length argument must be positive")
    return x


class LengthLaws:
    """Length laws of the typical I-segment at time ``t``."""

    def __init__(self, ctx: AnalyticContext):
        self.t = ctx.t
        self.model = ctx.model

    def conditional_density(self, x, u, s):
        """Density of the length given direction ``u`` and birth time ``s``."""
        x = _check_x(x)
        k = self.model.lambda_segment(u) * s
        return k * np.exp(-k * x)

    def survival(self, x, u):
        """Survival function of the length given direction ``u``."""
        x = _check_x(x)
        y = self.model.lambda_segment(u) * self.t * x
        return 6 * gammainc(3, y) / y ** 3

    def weighted_survival(self, x, u):
        """Survival function of the length-weighted length given ``u``."""
        x = _check_x(x)
        y = self.model.lambda_segment(u) * self.t * x
        return 2 * (gammainc(2, y) + 2 * gammainc(3, y)) / y ** 2

    def conditional_density_given_direction(self, x, u):
        x = _check_x(x)
        lam = self.model.lambda_segment(u)
        y = lam * self.t * x
        return 18 * lam * self.t * gammainc(4, y) / y ** 4

    def conditional_mean(self, u):
        return 1.5 / (self.t * self.model.lambda_segment(u))

    def _typ_atoms(self):
        if self.model.is_isotropic:
            return np.array([[0.0, 0.0, 1.0]]), np.array([1.0])
        return self.model.edge_direction_law("typ")

    def density(self, x):
        """Marginal length density (mixture over the typical direction law)."""
        x = _check_x(x)
        d, p = self._typ_atoms()
        return sum(pk * self.conditional_density_given_direction(x, dk) for dk, pk in zip(d, p))

    def cdf(self, x):
        x = _check_x(x)
        d, p = self._typ_atoms()
        return 1 - sum(pk * self.survival(x, dk) for dk, pk in zip(d, p))

    def mean(self):
        z2, z3 = self.model.zeta_constants()
        return 1.5 / self.t * z2 / z3


def length_laws(ctx: AnalyticContext) -> LengthLaws:
    return LengthLaws(ctx)


def isotropic_length_density(x, t):
    """Direct transcription of the isotropic length density, for cross-checks."""
    x = np.asarray(x, dtype=float)
    return 3 / (t ** 3 * x ** 4) * (48 - (48 + 24 * t * x + 6 * x ** 2 * t ** 2
                                          + t ** 3 * x ** 3) * np.exp(-t * x / 2))


class PoissonEdgeLaws:
    """Edge-length laws of the Poisson plane tessellation with measure ``s Λ``."""

    def __init__(self, model: DirectionalModel, s: float):
        if not s > 0:
            raise ValueError("s must be positive")
        self.model, self.s = model, s

    def survival(self, x, u):
        return np.exp(-self.model.lambda_segment(u) * self.s * np.asarray(x, float))

    def weighted_survival(self, x, u):
        k = self.model.lambda_segment(u) * self.s * np.asarray(x, float)
        return (1 + k) * np.exp(-k)

    def mean(self):
        z2, z3 = self.model.zeta_constants()
        return z2 / (z3 * self.s)


def poisson_edge_laws(model: DirectionalModel, s: float) -> PoissonEdgeLaws:
    return PoissonEdgeLaws(model, s)


def _window_moment(n: int, k, r: float, s: float):
    """``∫_r^s w**n exp(-k w) dw`` for ``k >= 0`` via incomplete gamma functions."""
    k = np.asarray(k, dtype=float)
    if s - r <= 1e-2 * s:
        # narrow window: the incomplete-gamma differences cancel; the
        # integrand is smooth there, so a fixed Gauss-Legendre rule is exact enough
        z, wts = np.polynomial.legendre.leggauss(30)
        w = (r + s) / 2 + (s - r) / 2 * z
        vals = w ** n * np.exp(-k[..., None] * w)
        return (s - r) / 2 * (vals @ wts)
    fact = float(np.prod(np.arange(1, n + 1)))
    ks = np.where(k > 0, k, 1.0)
    lower = gammainc(n + 1, ks * s) - gammainc(n + 1, ks * r)
    upper = gammaincc(n + 1, ks * r) - gammaincc(n + 1, ks * s)
    # use the representation without cancellation in each regime
    diff = np.where(ks * r > n + 1, upper, lower)
    out = fact / ks ** (n + 1) * diff
    return np.where(k > 0, out, (s ** (n + 1) - r ** (n + 1)) / (n + 1))


class StarredLaws:
    """Length laws of I-segments born in ``(r, s]`` inside cells of the
    frame tessellation at time ``r``."""

    def __init__(self, model: DirectionalModel, r: float, s: float):
        if not 0 < r < s:
            raise ValueError("need 0 < r < s")
        self.model, self.r, self.s = model, r, s

    def survival(self, x, u):
        r, s = self.r, self.s
        k = self.model.lambda_segment(u) * np.asarray(x, float)
        J1 = _window_moment(1, k, r, s)
        J2 = _window_moment(2, k, r, s)
        return 6 * (J2 - r * J1) / ((2 * s + r) * (s - r) ** 2)

    def weighted_survival(self, x, u):
        r, s = self.r, self.s
        k = self.model.lambda_segment(u) * np.asarray(x, float)
        J0 = _window_moment(0, k, r, s)
        J1 = _window_moment(1, k, r, s)
        J2 = _window_moment(2, k, r, s)
        return 2 * (J1 - r * J0 + k * (J2 - r * J1)) / (s - r) ** 2

    def survival_closed_form(self, x, u):
        """Elementary-function form; loses precision for small ``x``."""
        r, s = self.r, self.s
        lam = self.model.lambda_segment(u)
        x = np.asarray(x, float)
        pre = 6 / (lam ** 3 * (s - r) ** 2 * (2 * s + r) * x ** 3)
        return pre * ((2 + lam * r * x) * np.exp(-lam * r * x)
                      - (2 + (2 * s - r) * lam * x + lam ** 2 * s * (s - r) * x ** 2)
                      * np.exp(-lam * s * x))

    def weighted_survival_closed_form(self, x, u):
        """Elementary-function form of :meth:`weighted_survival` (derived from
        the birth density ``2 (w - r) / (s - r)**2`` and Gamma(2) lengths)."""
        r, s = self.r, self.s
        k = self.model.lambda_segment(u) * np.asarray(x, float)
        return 2 / ((s - r) ** 2 * k ** 2) * (
            (3 + r * k) * np.exp(-r * k)
            - (3 + (3 * s - 2 * r) * k + s * (s - r) * k ** 2) * np.exp(-s * k))

    def mean(self, u):
        return 3 / (self.model.lambda_segment(u) * (2 * self.s + self.r))


def starred_laws(model: DirectionalModel, r: float, s: float) -> StarredLaws:
    return StarredLaws(model, r, s)


def edge_length_intensity(model: DirectionalModel, s: float, r: float | None = None) -> float:
    """Length density of all edges at time ``s`` or, with ``r``, of edges born
    in ``(r, s]`` on facets of the cells present at time ``r``."""
    z2, _ = model.zeta_constants()
    if r is None:
        return z2 * s * s
    if not 0 < r < s:
        raise ValueError("need 0 < r < s")
    return 2 * z2 * (r * s - r * r)


# ---------------------------------------------------------------------------
# oracle samplers

def _vertex_counts(rng, lam, length, beta, carr, t):
    mu = lam * length
    n_birth = rng.poisson(mu * (beta - carr))
    n_x = n_birth + rng.poisson(mu * (t - beta))
    n_t = rng.poisson(2 * mu * (t - beta))
    return n_t, n_x, n_birth


def sample_typical_marks(ctx: AnalyticContext, rng: np.random.Generator,
                         size: int | None = None) -> MarkSample:
    """Marks and vertex counts of the typical I-segment."""
    n = 1 if size is None else size
    t = ctx.t
    u = ctx.model.sample_directional_laws("typ", rng, n)
    beta = t * rng.random(n) ** (1 / 3)
    carr = beta * rng.random(n)
    lam = ctx.model.lambda_segment(u)
    length = rng.exponential(1 / (lam * beta))
    n_t, n_x, n_b = _vertex_counts(rng, lam, length, beta, carr, t)
    out = MarkSample(length, u, beta, carr, n_t, n_x, n_b)
    if size is None:
        return MarkSample(**{f.name: getattr(out, f.name)[0] for f in fields(out)})
    return out


def sample_weighted_marks(ctx: AnalyticContext, rng: np.random.Generator,
                          size: int | None = None) -> MarkSample:
    """Marks and vertex counts of the length-weighted typical I-segment."""
    n = 1 if size is None else size
    t = ctx.t
    u = ctx.model.sample_directional_laws("tilde", rng, n)
    beta = t * np.sqrt(rng.random(n))
    carr = beta * rng.random(n)
    lam = ctx.model.lambda_segment(u)
    length = rng.gamma(2.0, 1 / (lam * beta))
    n_t, n_x, n_b = _vertex_counts(rng, lam, length, beta, carr, t)
    out = MarkSample(length, u, beta, carr, n_t, n_x, n_b)
    if size is None:
        return MarkSample(**{f.name: getattr(out, f.name)[0] for f in fields(out)})
    return out
