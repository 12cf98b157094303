"""Estimators, goodness-of-fit tests and simulation-vs-oracle experiments.

Typical-segment statistics from a bounded window are biased toward short
segments.  Instead of correcting the simulation, the oracle samples are
thinned with the exact probability that a segment with the same length and
direction, placed with its reference point uniformly in the eroded window,
lies completely inside the window ("matched censoring").  Both sides then
have the same law and can be compared with ordinary two-sample tests.
"""
from __future__ import annotations

import json
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
from scipy import stats

from .analytic import (AnalyticContext, MarkSample, eval_pn, sample_typical_marks)
from .directional import DirectionalModel
from .serialize import write_files
from .engine import (TessellationResult, collect_complete_segments, linear_section,
                     nest, simulate)

WORKERS_ENV = "STIT_WORKERS"


# ---------------------------------------------------------------------------
# replication

def worker_count(workers: int | None = None) -> int:
    if workers is not None:
        return max(1, int(workers))
    return max(1, int(os.environ.get(WORKERS_ENV, "1")))


def _run_one(args):
    kind, window, t, model, seed, kw, reducer, index = args
    if kind == "nest":
        kw = dict(kw)
        s = kw.pop("s", t / 2)
        result = nest(window, s, t - s, model, seed, **kw)
    else:
        result = simulate(window, t, model, seed, **kw)
    return result if reducer is None else reducer(result, index)


def replicate(window, t: float, model: DirectionalModel, seed, replications: int, *,
              kind: str = "simulate", workers: int | None = None, reducer=None,
              **kw) -> list:
    """Independent replications with seeds spawned from ``seed``.

    With ``reducer`` every result is replaced by ``reducer(result, index)``
    as soon as it is produced (in the worker), so large batches need not
    hold all tessellations in memory; the reducer must be picklable when
    more than one worker is used.  Results are returned in replication order
    regardless of the worker count, so aggregation is deterministic.
    """
    if kind not in ("simulate", "nest"):
        raise ValueError(f"unknown replication kind {kind!r}")
    root = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    seeds = root.spawn(replications)
    jobs = [(kind, window, t, model, ss, dict(kw), reducer, i) for i, ss in enumerate(seeds)]
    n = worker_count(workers)
    if n == 1:
        return [_run_one(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=n) as ex:
        return list(ex.map(_run_one, jobs))


def child_seed(root: np.random.SeedSequence, index: int) -> np.random.SeedSequence:
    """The ``index``-th child of ``root`` without mutating ``root``."""
    return np.random.SeedSequence(root.entropy, spawn_key=tuple(root.spawn_key) + (index,))


# ---------------------------------------------------------------------------
# estimators

@dataclass
class Estimate:
    value: float
    se: float

    def rel_error(self, theory: float) -> float:
        return abs(self.value - theory) / abs(theory)


def _ratio_estimate(num: np.ndarray, den: np.ndarray) -> Estimate:
    """Ratio of sums with a delta-method standard error over replications."""
    num, den = np.asarray(num, float), np.asarray(den, float)
    n = len(num)
    r = num.sum() / den.sum()
    if n < 2:
        return Estimate(float(r), float("nan"))
    resid = num - r * den
    se = np.sqrt(resid.var(ddof=1) / n) / den.mean()
    return Estimate(float(r), float(se))


def _batch_mean(x) -> Estimate:
    x = np.asarray(x, float)
    se = x.std(ddof=1) / np.sqrt(len(x)) if len(x) > 1 else float("nan")
    return Estimate(float(x.mean()), float(se))


def _interior(p, lo, hi, margin):
    return bool(np.all(p > lo + margin) and np.all(p < hi - margin))


def per_replication_counts(result: TessellationResult, margin: float = 0.0) -> dict:
    """Raw totals of one replication, the building blocks of the estimators."""
    lo, hi = result.window
    vol_eroded = float(np.prod(hi - lo - 2 * margin))
    inner = [s for s in result.segments if not s.window_carried]
    n_seg = sum(1 for s in inner if _interior(s.reference_point, lo, hi, margin))
    n_T = sum(1 for v in result.vertices if v.kind == "T" and not v.on_boundary
              and _interior(v.point, lo, hi, margin))
    n_X = sum(1 for v in result.vertices if v.kind == "X" and not v.on_boundary
              and _interior(v.point, lo, hi, margin))
    return {
        "volume": result.window_volume,
        "volume_eroded": vol_eroded,
        "area": sum(p.area for p in result.polygons),
        "length": sum(s.length for s in inner),
        "n_segments": n_seg,
        "n_T": n_T,
        "n_X": n_X,
    }


def estimate_intensities(results, margin: float = 0.0) -> dict[str, Estimate]:
    """Stationary intensities with batch-means standard errors.

    Segments are counted by their reference point, vertices by position, both
    inside the window eroded by ``margin``.
    """
    if not results:
        raise ValueError("need at least one result")
    return intensities_from_counts([per_replication_counts(r, margin) for r in results])


def intensities_from_counts(rows) -> dict[str, Estimate]:
    """:func:`estimate_intensities` from per-replication count dictionaries."""
    if not rows:
        raise ValueError("need at least one replication")
    col = {k: np.array([row[k] for row in rows], float) for k in rows[0]}
    return {
        "S_V": _batch_mean(col["area"] / col["volume"]),
        "L_V": _batch_mean(col["length"] / col["volume"]),
        "segment_intensity": _batch_mean(col["n_segments"] / col["volume_eroded"]),
        "T_intensity": _batch_mean(col["n_T"] / col["volume_eroded"]),
        "X_intensity": _batch_mean(col["n_X"] / col["volume_eroded"]),
        "TX_ratio": _ratio_estimate(col["n_T"], col["n_X"]),
        "mean_segment_length": _ratio_estimate(col["length"] / col["volume"],
                                               col["n_segments"] / col["volume_eroded"]),
    }


def sample_lines(result: TessellationResult, rng, n_lines: int, model: DirectionalModel):
    """Random lines (uniform direction, uniform point in the window) and
    their hits; returns a list of ``(hits, chord, direction)``."""
    lo, hi = result.window
    out = []
    for _ in range(n_lines):
        d = rng.standard_normal(3)
        d /= np.linalg.norm(d)
        p = lo + (hi - lo) * rng.random(3)
        hits, chord = linear_section(result, p, d)
        out.append((hits, chord, d))
    return out


def linear_section_statistics(lines, t: float, model: DirectionalModel, clusters=None) -> dict:
    """Hit intensity and gap PIT values for a set of sampled lines.

    ``intensity`` is hits per unit chord length, ``Σ hits / Σ chord``, with
    theory value ``t · Σ Λ([d]) chord / Σ chord`` (``t/2`` when isotropic).
    Lines through the same tessellation are dependent, so the standard error
    treats ``clusters`` (one label per line, default: every line its own
    cluster) as the sampling units.  Gaps are mapped through the exponential
    CDF truncated at the remaining chord length, which makes them uniform
    under the Poisson hypothesis even though the chord cuts the last gap;
    ``pit_clusters`` labels every PIT value with its line's cluster.
    """
    if clusters is None:
        clusters = np.arange(len(lines))
    n_hits, chord, weight, pit, pit_cl = [], [], [], [], []
    for (hits, (x_in, x_out), d), c in zip(lines, clusters):
        lam_d = float(model.lambda_segment(d))
        L = x_out - x_in
        n_hits.append(len(hits))
        chord.append(L)
        weight.append(lam_d * L)
        rate = t * lam_d
        y = x_in
        for x in hits:
            pit.append(-np.expm1(-rate * (x - y)) / -np.expm1(-rate * (x_out - y)))
            pit_cl.append(c)
            y = x
    to_cl = lambda v: _cluster_sum(np.asarray(v, float)[:, None], clusters)[:, 0]
    est = _ratio_estimate(to_cl(n_hits), to_cl(chord))
    return {"intensity": est, "theory": t * float(np.sum(weight) / np.sum(chord)),
            "pit": np.array(pit), "pit_clusters": np.array(pit_cl, dtype=int),
            "n_hits": int(np.sum(n_hits))}


# ---------------------------------------------------------------------------
# per-replication digests

@dataclass
class ReplicationDigest:
    """What a comparison needs from one replication: raw totals, a summary,
    hits of random lines and the marks of complete segments."""

    counts: dict
    summary: dict
    lines: list
    segments: MarkSample


@dataclass
class Digester:
    """Picklable reducer turning a result into a :class:`ReplicationDigest`.

    Line seeds are children of ``line_seed`` indexed by replication, so the
    digest does not depend on the order or process in which it is computed.
    """

    margin: float
    n_lines: int
    model: DirectionalModel
    line_seed: np.random.SeedSequence

    def __call__(self, result: TessellationResult, index: int) -> ReplicationDigest:
        rng = np.random.default_rng(child_seed(self.line_seed, index))
        return ReplicationDigest(
            counts=per_replication_counts(result),
            summary=result.summary(),
            lines=sample_lines(result, rng, self.n_lines, self.model),
            segments=segment_arrays(collect_complete_segments(result, self.margin)))


# ---------------------------------------------------------------------------
# segment tables and matched censoring

def segment_arrays(segments) -> MarkSample:
    """Marks and vertex counts of engine segments as a :class:`MarkSample`."""
    if not segments:
        z = np.empty(0)
        return MarkSample(z, np.empty((0, 3)), z, z, z.astype(int), z.astype(int), z.astype(int))
    return MarkSample(
        length=np.array([s.length for s in segments]),
        direction=np.array([s.direction for s in segments]),
        birth=np.array([s.birth for s in segments]),
        carrier_birth=np.array([s.carrier_birth for s in segments]),
        n_T=np.array([s.n_T for s in segments]),
        n_X=np.array([s.n_X for s in segments]),
        n_X_birth=np.array([s.n_X_birth for s in segments]),
    )


def containment_probability(length, direction, lo, hi, margin: float = 0.0):
    """Probability that a segment with reference point (lexicographically
    smallest endpoint) uniform in the eroded box lies inside the box."""
    length = np.atleast_1d(np.asarray(length, float))
    d = np.atleast_2d(np.asarray(direction, float))
    lo, hi = np.asarray(lo, float), np.asarray(hi, float)
    # orient from the lexicographically smallest endpoint
    sign = np.ones(len(d))
    for k in (2, 1, 0):
        nz = np.abs(d[:, k]) > 1e-15
        sign = np.where(nz, np.sign(d[:, k]), sign)
    v = length[:, None] * d * sign[:, None]
    a = np.maximum(lo + margin, lo - np.minimum(v, 0))
    b = np.minimum(hi - margin, hi - np.maximum(v, 0))
    frac = np.clip(b - a, 0, None) / (hi - lo - 2 * margin)
    return np.prod(frac, axis=1)


def matched_oracle_sample(ctx: AnalyticContext, lo, hi, margin: float, size: int,
                          rng, batch: int = 200_000) -> MarkSample:
    """Oracle marks thinned by :func:`containment_probability` until ``size``
    samples are accepted."""
    parts, n = [], 0
    while n < size:
        s = sample_typical_marks(ctx, rng, batch)
        keep = rng.random(batch) < containment_probability(s.length, s.direction, lo, hi, margin)
        parts.append(s.select(keep))
        n += int(keep.sum())
    merged = MarkSample(**{k: np.concatenate([getattr(p, k) for p in parts])
                           for k in (f.name for f in fields(MarkSample))})
    return merged.select(np.arange(size))


# ---------------------------------------------------------------------------
# histograms

@dataclass
class VertexHistogram:
    joint: np.ndarray          # (K+2, K+2): n_T, n_X in 0..K plus overflow
    total: np.ndarray          # (K+2,): n_T + n_X in 0..K plus overflow
    n: int
    max_count: int

    @property
    def total_freq(self) -> np.ndarray:
        return self.total / self.n

    @property
    def joint_freq(self) -> np.ndarray:
        return self.joint / self.n

    def confidence_intervals(self, alpha: float = 0.05) -> np.ndarray:
        """Goodman simultaneous intervals for the total-count frequencies."""
        k = len(self.total)
        A = stats.chi2.ppf(1 - alpha / k, 1)
        c = self.total.astype(float)
        N = self.n
        half = np.sqrt(A * (A + 4 * c * (N - c) / N))
        return np.stack([(A + 2 * c - half), (A + 2 * c + half)], axis=1) / (2 * (N + A))


def empirical_vertex_histogram(samples, max_count: int = 10) -> VertexHistogram:
    """Histogram of ``(n_T, n_X)`` and ``n_T + n_X`` with an overflow bin.

    ``samples`` is a list of segment records or a :class:`MarkSample`.
    """
    s = samples if isinstance(samples, MarkSample) else segment_arrays(samples)
    if len(s) == 0:
        raise ValueError("empty sample")
    K = max_count
    nT = np.minimum(s.n_T, K + 1)
    nX = np.minimum(s.n_X, K + 1)
    joint = np.zeros((K + 2, K + 2), dtype=int)
    np.add.at(joint, (nT, nX), 1)
    total = np.bincount(np.minimum(s.n_T + s.n_X, K + 1), minlength=K + 2)
    return VertexHistogram(joint, total, len(s), K)


# ---------------------------------------------------------------------------
# goodness of fit

@dataclass
class TestResult:
    statistic: float
    p_value: float
    dof: int = 0
    bins: int = 0
    naive_p: float | None = None


def pool_bins(expected: np.ndarray, min_expected: float = 5.0) -> np.ndarray:
    """Group labels merging ordered bins until every group's expected count
    reaches ``min_expected`` (tails pooled inward)."""
    expected = np.asarray(expected, float)
    labels = np.zeros(len(expected), dtype=int)
    g, acc = 0, 0.0
    for i, e in enumerate(expected):
        labels[i] = g
        acc += e
        if acc >= min_expected:
            g += 1
            acc = 0.0
    if acc < min_expected and g > 0:
        labels[labels == g] = g - 1     # undersized last group joins its neighbour
    return labels


def _pooled(x, labels):
    return np.bincount(labels, weights=x)


def chisquare_gof(counts, probs, min_expected: float = 5.0) -> TestResult:
    """Chi-square goodness of fit of ordered ``counts`` to ``probs``."""
    counts = np.asarray(counts, float)
    probs = np.asarray(probs, float)
    probs = probs / probs.sum()
    N = counts.sum()
    if N == 0:
        raise ValueError("insufficient data")
    lab = pool_bins(N * probs, min_expected)
    o, e = _pooled(counts, lab), _pooled(N * probs, lab)
    if len(o) < 2:
        raise ValueError("insufficient data: fewer than two pooled bins")
    stat = float(((o - e) ** 2 / e).sum())
    dof = len(o) - 1
    return TestResult(stat, float(stats.chi2.sf(stat, dof)), dof, len(o))


def chisquare_two_sample(counts_a, counts_b, min_expected: float = 5.0) -> TestResult:
    """Chi-square homogeneity test of two ordered histograms."""
    a = np.asarray(counts_a, float).ravel()
    b = np.asarray(counts_b, float).ravel()
    Na, Nb = a.sum(), b.sum()
    if Na == 0 or Nb == 0:
        raise ValueError("insufficient data")
    pooled = (a + b) / (Na + Nb)
    lab = pool_bins(min(Na, Nb) * pooled, min_expected)
    table = np.stack([_pooled(a, lab), _pooled(b, lab)])
    if table.shape[1] < 2:
        raise ValueError("insufficient data: fewer than two pooled bins")
    stat, p, dof, _ = stats.chi2_contingency(table, correction=False)
    return TestResult(float(stat), float(p), int(dof), table.shape[1])


def ks_test(sample, cdf) -> TestResult:
    sample = np.asarray(sample, float)
    if len(sample) < 2:
        raise ValueError("insufficient data")
    r = stats.kstest(sample, cdf)
    return TestResult(float(r.statistic), float(r.pvalue))


def ks_two_sample(a, b) -> TestResult:
    if len(a) < 2 or len(b) < 2:
        raise ValueError("insufficient data")
    r = stats.ks_2samp(a, b)
    return TestResult(float(r.statistic), float(r.pvalue))


def gof_tests(sample, reference, kind: str = "auto", **kw) -> TestResult:
    """Dispatch: histogram vs probabilities (chi-square), continuous sample vs
    CDF (KS), or two samples (``kind="two_sample_ks"`` / ``"two_sample_chi2"``)."""
    if kind == "auto":
        kind = "ks" if callable(reference) else "chi2"
    if kind == "ks":
        return ks_test(sample, reference)
    if kind == "chi2":
        return chisquare_gof(sample, reference, **kw)
    if kind == "two_sample_ks":
        return ks_two_sample(sample, reference)
    if kind == "two_sample_chi2":
        return chisquare_two_sample(sample, reference, **kw)
    raise ValueError(f"unknown test kind {kind!r}")


def _cluster_sum(z: np.ndarray, clusters) -> np.ndarray:
    """Sum the rows of ``z`` within clusters (rows are units)."""
    if clusters is None:
        return z
    _, inv = np.unique(np.asarray(clusters), return_inverse=True)
    out = np.zeros((inv.max() + 1, z.shape[1]))
    np.add.at(out, inv, z)
    return out


def _robust_cov(z: np.ndarray, clusters) -> np.ndarray:
    Z = _cluster_sum(z, clusters)
    C = len(Z)
    return Z.T @ Z * (C / (C - 1) if C > 1 else 1.0)


def weighted_frequencies(categories, weights, n_bins: int, clusters=None):
    """Weighted bin frequencies and their linearised covariance.

    With ``clusters`` the covariance is the cluster-robust (sandwich) form,
    which allows arbitrary dependence between units of the same cluster.
    """
    categories = np.asarray(categories, int)
    w = np.ones(len(categories)) if weights is None else np.asarray(weights, float)
    W = w.sum()
    onehot = np.zeros((len(w), n_bins))
    onehot[np.arange(len(w)), categories] = 1
    p = w @ onehot / W
    z = w[:, None] * (onehot - p) / W
    return p, _robust_cov(z, clusters)


def _n_clusters(clusters) -> int | None:
    return None if clusters is None else len(np.unique(np.asarray(clusters)))


def _wald_pvalue(stat: float, q: int, n_clusters: int | None) -> float:
    """Chi-square p-value, or with clustered data the Hotelling-type small-sample
    version ``stat (C - q) / (q (C - 1)) ~ F(q, C - q)`` for ``C`` clusters."""
    if n_clusters is None:
        return float(stats.chi2.sf(stat, q))
    c = n_clusters
    if c <= q:
        raise ValueError(f"insufficient data: {c} clusters for {q} degrees of freedom")
    return float(stats.f.sf(stat * (c - q) / (q * (c - 1)), q, c - q))


def _quadratic_form(d, V) -> float:
    return float(d @ np.linalg.lstsq(V, d, rcond=None)[0])


def wald_two_sample(cat_a, cat_b, n_bins: int, *, w_a=None, w_b=None,
                    clusters_a=None, clusters_b=None, min_count: int = 10) -> TestResult:
    """Wald test that two (optionally weighted, optionally clustered) samples
    share the same bin probabilities.

    Ordered bins are pooled until each pooled bin holds ``min_count`` raw
    observations in both samples; with clustered data trailing bins are also
    merged so that the degrees of freedom stay below half the number of
    clusters.  Without weights or clusters this is the large-sample
    equivalent of the chi-square homogeneity test.  ``naive_p`` ignores the
    clustering.
    """
    cat_a, cat_b = np.asarray(cat_a, int), np.asarray(cat_b, int)
    ca = np.bincount(cat_a, minlength=n_bins)
    cb = np.bincount(cat_b, minlength=n_bins)
    lab = pool_bins(np.minimum(ca, cb).astype(float), min_count)
    counts = [c for c in (_n_clusters(clusters_a), _n_clusters(clusters_b)) if c is not None]
    n_cl = min(counts) if counts else None
    if n_cl is not None:
        lab = np.minimum(lab, max(1, n_cl // 2))
    g = lab.max() + 1
    if g < 2:
        raise ValueError("insufficient data: fewer than two pooled bins")
    pa, Va = weighted_frequencies(lab[cat_a], w_a, g, clusters_a)
    pb, Vb = weighted_frequencies(lab[cat_b], w_b, g, clusters_b)
    d = (pa - pb)[:-1]
    stat = _quadratic_form(d, (Va + Vb)[:-1, :-1])
    res = TestResult(stat, _wald_pvalue(stat, g - 1, n_cl), g - 1, g)
    if n_cl is not None:
        Va0 = weighted_frequencies(lab[cat_a], w_a, g)[1]
        Vb0 = weighted_frequencies(lab[cat_b], w_b, g)[1]
        res.naive_p = float(stats.chi2.sf(_quadratic_form(d, (Va0 + Vb0)[:-1, :-1]), g - 1))
    return res


def weighted_wald_two_sample(cat_a, w_a, cat_b, w_b, n_bins: int, min_count: int = 10,
                             clusters_a=None, clusters_b=None) -> TestResult:
    return wald_two_sample(cat_a, cat_b, n_bins, w_a=w_a, w_b=w_b, clusters_a=clusters_a,
                           clusters_b=clusters_b, min_count=min_count)


def cluster_ks_two_sample(x, clusters, reference, n_boot: int = 999, seed=0,
                          grid_size: int = 2000) -> TestResult:
    """Two-sample KS statistic with a cluster-bootstrap null distribution.

    ``x`` are observations grouped by ``clusters`` (e.g. segments of one
    tessellation), ``reference`` is an independent sample from the
    hypothesised law.  Both empirical CDFs are evaluated on a grid of at most
    ``grid_size`` quantiles of ``x`` and the statistic is the largest
    difference there.  Its null law is approximated by resampling whole
    clusters of ``x`` and, independently, the reference sample; this stays
    valid under within-cluster dependence.  The naive independent-sample
    p-value is reported in ``naive_p``.
    """
    x = np.asarray(x, float)
    reference = np.asarray(reference, float)
    if len(x) < 2 or len(reference) < 2:
        raise ValueError("insufficient data for KS test")
    grid = np.unique(np.quantile(x, np.linspace(0, 1, grid_size + 1)[1:]))
    _, inv = np.unique(np.asarray(clusters), return_inverse=True)
    C = inv.max() + 1
    # per-cluster counts of observations in each grid cell (last = above grid)
    M = np.zeros((C, len(grid) + 1))
    np.add.at(M, (inv, np.searchsorted(grid, x, side="left")), 1.0)
    r_cells = np.bincount(np.searchsorted(grid, reference, side="left"),
                          minlength=len(grid) + 1).astype(float)

    def ecdf(counts):
        c = np.cumsum(counts, axis=-1)
        return c[..., :-1] / c[..., -1:]

    F, G = ecdf(M.sum(axis=0)), ecdf(r_cells)
    D = float(np.abs(F - G).max())
    rng = np.random.default_rng(seed)
    p_ref = r_cells / r_cells.sum()
    exceed = 0
    for start in range(0, n_boot, 64):
        b = min(64, n_boot - start)
        k = rng.multinomial(C, np.full(C, 1 / C), size=b).astype(float)
        Fb = ecdf(k @ M)
        Gb = ecdf(rng.multinomial(len(reference), p_ref, size=b).astype(float))
        Db = np.abs((Fb - F) - (Gb - G)).max(axis=1)
        exceed += int((Db >= D).sum())
    res = TestResult(D, (exceed + 1) / (n_boot + 1))
    res.naive_p = float(stats.ks_2samp(x, reference).pvalue)
    return res


def poisson_mixture_test(counts, means, clusters=None, min_expected: float = 5.0) -> TestResult:
    """Test that ``counts[i] ~ Poisson(means[i])``.

    Observed bin counts are compared with the summed Poisson pmfs; the
    covariance of the residuals ``1{count_i = k} - pmf_i(k)`` is estimated
    cluster-robustly, giving a Wald statistic with ``bins - 1`` degrees of
    freedom (reduces to a Pearson-type test for independent units).  With
    clusters the p-value uses the small-sample F form and ``naive_p`` the
    independent-unit covariance.
    """
    counts = np.asarray(counts, int)
    means = np.asarray(means, float)
    K = int(max(counts.max(), 1)) + 1
    k = np.arange(K)
    pmf = stats.poisson.pmf(k[None, :], means[:, None])
    pmf = np.concatenate([pmf, 1 - pmf.sum(axis=1, keepdims=True)], axis=1)
    lab = pool_bins(pmf.sum(axis=0), min_expected)
    g = lab.max() + 1
    if g < 2:
        raise ValueError("insufficient data: fewer than two pooled bins")
    P = np.zeros((len(counts), g))
    np.add.at(P.T, lab, pmf.T)
    O = np.zeros((len(counts), g))
    O[np.arange(len(counts)), lab[counts]] = 1
    r = (O - P)[:, :-1]
    S = r.sum(axis=0)
    V0 = np.diag(P[:, :-1].sum(axis=0)) - P[:, :-1].T @ P[:, :-1]
    stat0 = _quadratic_form(S, V0)
    if clusters is None:
        return TestResult(stat0, float(stats.chi2.sf(stat0, g - 1)), g - 1, g)
    stat = _quadratic_form(S, _robust_cov(r, clusters))
    return TestResult(stat, _wald_pvalue(stat, g - 1, _n_clusters(clusters)), g - 1, g,
                      naive_p=float(stats.chi2.sf(stat0, g - 1)))


# ---------------------------------------------------------------------------
# experiments

_CONFIG_KEYS = {"window", "t", "model", "replications", "seed", "margin", "max_count",
                "alpha", "oracle_size", "method", "lines_per_replication", "tolerances"}

UNIFORM_REFERENCE_SIZE = 1_000_000

DEFAULT_TOLERANCES = {"S_V": 0.02, "L_V": 0.03, "segment_intensity": 0.05,
                      "TX_ratio": 0.02, "line_intensity": 0.02}


@dataclass
class ExperimentConfig:
    """Configuration of a simulation-vs-theory comparison.

    ``margin`` is in units of the mean typical-segment length.
    """

    window: tuple = ((0.0, 0.0, 0.0), (1.0, 1.0, 1.0))
    t: float = 10.0
    model: DirectionalModel = field(default_factory=DirectionalModel.isotropic)
    replications: int = 1000
    seed: int = 0
    margin: float = 0.25
    max_count: int = 8
    alpha: float = 0.01
    oracle_size: int = 1_000_000
    method: str = "direct"
    lines_per_replication: int = 20
    tolerances: dict = field(default_factory=lambda: dict(DEFAULT_TOLERANCES))

    def __post_init__(self):
        lo, hi = (np.asarray(v, float) for v in self.window)
        if lo.shape != (3,) or hi.shape != (3,) or np.any(hi <= lo):
            raise ValueError("window must be ((x0,y0,z0), (x1,y1,z1)) with positive sides")
        self.window = (tuple(lo.tolist()), tuple(hi.tolist()))
        if not self.t > 0:
            raise ValueError("t must be positive")
        if int(self.replications) < 1:
            raise ValueError("replications must be >= 1")
        if self.margin < 0:
            raise ValueError("margin must be >= 0")
        if self.method not in ("direct", "rejection"):
            raise ValueError(f"unknown method {self.method!r}")
        if not 0 < self.alpha < 1:
            raise ValueError("alpha must be in (0, 1)")
        if isinstance(self.model, dict):
            self.model = DirectionalModel.from_dict(self.model)
        tol = dict(DEFAULT_TOLERANCES)
        tol.update(self.tolerances or {})
        self.tolerances = tol
        if 2 * self.margin_length >= float(np.min(hi - lo)):
            raise ValueError("margin too large for the window")

    @property
    def mean_length(self) -> float:
        z2, z3 = self.model.zeta_constants()
        return 1.5 / self.t * z2 / z3

    @property
    def margin_length(self) -> float:
        return self.margin * self.mean_length

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        extra = set(d) - _CONFIG_KEYS
        if extra:
            raise ValueError(f"unknown config keys: {sorted(extra)}")
        d = dict(d)
        if "model" in d:
            d["model"] = DirectionalModel.from_dict(d["model"])
        if "window" in d:
            d["window"] = _parse_window(d["window"])
        return cls(**d)

    def to_dict(self) -> dict:
        return {"window": [list(self.window[0]), list(self.window[1])], "t": self.t,
                "model": self.model.to_dict(), "replications": self.replications,
                "seed": self.seed, "margin": self.margin, "max_count": self.max_count,
                "alpha": self.alpha, "oracle_size": self.oracle_size, "method": self.method,
                "lines_per_replication": self.lines_per_replication,
                "tolerances": dict(self.tolerances)}


def _parse_window(w):
    """Accept ``[[lo], [hi]]``, ``{"lo": .., "hi": ..}`` or a side length."""
    if isinstance(w, dict):
        extra = set(w) - {"lo", "hi"}
        if extra:
            raise ValueError(f"unknown window keys: {sorted(extra)}")
        return (tuple(w.get("lo", (0, 0, 0))), tuple(w["hi"]))
    if np.isscalar(w):
        return ((0.0, 0.0, 0.0), (float(w),) * 3)
    lo, hi = w
    return (tuple(lo), tuple(hi))


@dataclass
class ReportRow:
    name: str
    source: str
    theory: float | None
    estimate: float | None
    se: float | None
    statistic: float | None
    p_value: float | None
    verdict: str
    note: str = ""


@dataclass
class ComparisonReport:
    config: dict
    rows: list[ReportRow] = field(default_factory=list)
    failure: str | None = None

    @property
    def passed(self) -> bool:
        return self.failure is None and all(r.verdict == "pass" for r in self.rows)

    def add(self, **kw):
        self.rows.append(ReportRow(**kw))

    def row(self, name: str) -> ReportRow:
        for r in self.rows:
            if r.name == name:
                return r
        raise KeyError(name)

    def to_dict(self) -> dict:
        return {"schema_version": 1, "config": self.config,
                "rows": [asdict(r) for r in self.rows], "failure": self.failure,
                "passed": self.passed}

    def to_json(self) -> str:
        return json.dumps(_jsonable(self.to_dict()), indent=2, sort_keys=True)

    def to_table(self) -> str:
        head = f"{'statistic':<28}{'theory':>12}{'estimate':>12}{'se':>10}{'p':>10}  verdict  source"
        lines = [head, "-" * len(head)]
        def fmt(v, w):
            return f" {v:>{w - 1}.5g}" if isinstance(v, (int, float)) else " " * (w - 1) + "-"

        for r in self.rows:
            lines.append(f"{r.name:<28}{fmt(r.theory, 12)}{fmt(r.estimate, 12)}{fmt(r.se, 10)}"
                         f"{fmt(r.p_value, 10)}  {r.verdict:<7}  {r.source}")
        if self.failure:
            lines.append(f"FAILURE: {self.failure}")
        return "\n".join(lines)


def _jsonable(x):
    if isinstance(x, dict):
        return {k: _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, np.generic):
        return x.item()
    if isinstance(x, float) and not np.isfinite(x):
        return None
    return x


def _rel_row(report, name, source, theory, est: Estimate, tol):
    verdict = "pass" if est.rel_error(theory) <= tol else "fail"
    report.add(name=name, source=source, theory=float(theory), estimate=est.value,
               se=est.se, statistic=est.rel_error(theory), p_value=None,
               verdict=verdict, note=f"relative tolerance {tol}")


def _test_row(report, name, source, res: TestResult, alpha, theory=None, estimate=None):
    report.add(name=name, source=source, theory=theory, estimate=estimate, se=None,
               statistic=res.statistic, p_value=res.p_value,
               verdict="pass" if res.p_value >= alpha else "fail",
               note=f"level {alpha}" + (f", {res.dof} dof" if res.dof else "")
               + (f"; independent-unit p = {res.naive_p:.3g}" if res.naive_p is not None else ""))


def complete_segment_sample(results, margin: float = 0.0):
    """Complete segments of all replications as a :class:`MarkSample`, plus
    the replication index of every segment (the dependence cluster)."""
    segs, clusters = [], []
    for i, r in enumerate(results):
        got = collect_complete_segments(r, margin)
        segs.extend(got)
        clusters.extend([i] * len(got))
    return segment_arrays(segs), np.array(clusters, dtype=int)


def concat_marks(samples) -> MarkSample:
    """Concatenate :class:`MarkSample` batches."""
    samples = list(samples)
    return MarkSample(**{f.name: np.concatenate([getattr(m, f.name) for m in samples])
                         for f in fields(MarkSample)})


def vertex_categories(sample: MarkSample, max_count: int, joint: bool = False) -> np.ndarray:
    """Bin index of every unit: ``n_T + n_X`` capped at ``max_count + 1``, or
    the flattened ``(n_T, n_X)`` cell of the capped joint histogram."""
    K = max_count
    if not joint:
        return np.minimum(sample.n_T + sample.n_X, K + 1)
    return np.minimum(sample.n_T, K + 1) * (K + 2) + np.minimum(sample.n_X, K + 1)


def _by_frequency(cat_a, cat_b, n_bins):
    """Relabel categories in order of decreasing pooled frequency so that
    tail pooling merges the rarest cells."""
    order = np.argsort(-(np.bincount(cat_a, minlength=n_bins)
                         + np.bincount(cat_b, minlength=n_bins)), kind="stable")
    rank = np.empty(n_bins, dtype=int)
    rank[order] = np.arange(n_bins)
    return rank[cat_a], rank[cat_b]


def histogram_test(a: MarkSample, b: MarkSample, max_count: int, *, joint: bool = False,
                   clusters_a=None, clusters_b=None, w_a=None, w_b=None) -> TestResult:
    """Homogeneity of vertex-count histograms of two samples."""
    K = max_count
    n_bins = (K + 2) ** 2 if joint else K + 2
    ca, cb = vertex_categories(a, K, joint), vertex_categories(b, K, joint)
    if joint:
        ca, cb = _by_frequency(ca, cb, n_bins)
    return wald_two_sample(ca, cb, n_bins, w_a=w_a, w_b=w_b,
                           clusters_a=clusters_a, clusters_b=clusters_b)


def compare_to_oracle(segments: MarkSample, clusters, oracle: MarkSample,
                      model: DirectionalModel, max_count: int, alpha: float, report,
                      n_boot: int = 999, seed=0):
    """Distributional rows: vertex histograms, birth times, lengths, X at birth.

    Segments of one replication are dependent, so every test treats the
    replication as the sampling unit (cluster-robust Wald tests and
    cluster-bootstrap KS tests); the oracle sample is independent.
    """
    _test_row(report, "vertex_histogram_joint", "histograms of (n_T, n_X), cluster-robust",
              histogram_test(segments, oracle, max_count, joint=True, clusters_a=clusters), alpha)
    _test_row(report, "vertex_histogram_total", "histograms of n_T + n_X, cluster-robust",
              histogram_test(segments, oracle, max_count, clusters_a=clusters), alpha)
    for name, field_, src in (("birth_time_law", "birth", "birth time, matched censoring"),
                              ("length_law", "length", "length, matched censoring"),
                              ("carrier_birth_law", "carrier_birth", "carrier birth time")):
        res = cluster_ks_two_sample(getattr(segments, field_), clusters,
                                    getattr(oracle, field_), n_boot=n_boot, seed=seed)
        _test_row(report, name, f"KS, cluster bootstrap: {src}", res, alpha)
    p0 = float(np.mean(oracle.n_T + oracle.n_X == 0))
    zero = (segments.n_T + segments.n_X == 0).astype(float)
    f0 = _ratio_estimate(_cluster_sum(zero[:, None], clusters)[:, 0],
                         _cluster_sum(np.ones((len(zero), 1)), clusters)[:, 0])
    z = abs(f0.value - p0) / f0.se
    report.add(name="P(no interior vertex)", source="matched-censoring oracle frequency",
               theory=p0, estimate=f0.value, se=f0.se, statistic=z,
               p_value=float(2 * stats.norm.sf(z)),
               verdict="pass" if z <= 3 else "fail", note="3 cluster-robust standard errors")
    mu = model.lambda_segment(segments.direction) * segments.length * (
        segments.birth - segments.carrier_birth)
    _test_row(report, "X_at_birth_poisson", "X vertices at birth ~ Poisson(Λ([φ])ℓ(β-β_carr))",
              poisson_mixture_test(segments.n_X_birth, mu, clusters), alpha,
              theory=float(mu.mean()), estimate=float(segments.n_X_birth.mean()))


def collect_digests(config: ExperimentConfig, workers: int | None = None,
                    results: list[TessellationResult] | None = None) -> list[ReplicationDigest]:
    """Simulate ``config.replications`` tessellations (or take ``results``)
    and reduce each to a :class:`ReplicationDigest`."""
    lo, hi = (np.asarray(v, float) for v in config.window)
    sim_seed, line_seed, _ = np.random.SeedSequence(config.seed).spawn(3)
    digester = Digester(config.margin_length, config.lines_per_replication, config.model,
                        line_seed)
    if results is not None:
        return [digester(r, i) for i, r in enumerate(results)]
    return replicate((lo, hi), config.t, config.model, sim_seed, config.replications,
                     workers=workers, method=config.method, reducer=digester)


def run_experiment(config: ExperimentConfig, out_dir=None, workers: int | None = None,
                   results: list[TessellationResult] | None = None) -> ComparisonReport:
    """Replicated simulation, matched-censoring oracle and the full report.

    Writes ``report.json``, ``report.txt`` and ``histograms.csv`` to
    ``out_dir`` when given.  Deterministic given ``config.seed``.
    """
    try:
        digests = collect_digests(config, workers, results)
    except RuntimeError as exc:     # includes the event cap
        report = ComparisonReport(config=config.to_dict())
        report.failure = f"simulation aborted: {exc}"
        _write(report, out_dir, None)
        return report
    return report_from_digests(config, digests, out_dir)


def report_from_digests(config: ExperimentConfig, digests: list[ReplicationDigest],
                        out_dir=None) -> ComparisonReport:
    """Assemble the comparison report from per-replication digests."""
    report = ComparisonReport(config=config.to_dict())
    lo, hi = (np.asarray(v, float) for v in config.window)
    t, model, tol = config.t, config.model, config.tolerances
    _, _, oracle_seed = np.random.SeedSequence(config.seed).spawn(3)

    z2, z3 = model.zeta_constants()
    est = intensities_from_counts([d.counts for d in digests])
    _rel_row(report, "S_V", "surface density equals t", t, est["S_V"], tol["S_V"])
    _rel_row(report, "L_V", "edge length density zeta2 t^2", z2 * t * t, est["L_V"], tol["L_V"])
    _rel_row(report, "segment_intensity", "L_V over mean segment length",
             2 / 3 * z3 * t ** 3, est["segment_intensity"], tol["segment_intensity"])
    _rel_row(report, "TX_ratio", "T- to X-vertex intensity ratio 2:1", 2.0,
             est["TX_ratio"], tol["TX_ratio"])

    lines, line_cl = [], []
    for i, d in enumerate(digests):
        lines.extend(d.lines)
        line_cl.extend([i] * len(d.lines))
    ls = linear_section_statistics(lines, t, model, line_cl)
    _rel_row(report, "line_intensity", "hits per unit length of random lines, t Λ([d])",
             ls["theory"], ls["intensity"], tol["line_intensity"])
    if len(ls["pit"]) > 1:
        uniform = (np.arange(UNIFORM_REFERENCE_SIZE) + 0.5) / UNIFORM_REFERENCE_SIZE
        _test_row(report, "line_gaps_exponential",
                  "KS, cluster bootstrap: truncated-exponential gap PIT vs uniform",
                  cluster_ks_two_sample(ls["pit"], ls["pit_clusters"], uniform,
                                        seed=config.seed), config.alpha)

    sim = concat_marks(d.segments for d in digests)
    clusters = np.concatenate([np.full(len(d.segments), i, dtype=int)
                               for i, d in enumerate(digests)])
    ctx = AnalyticContext(t, model)
    oracle = matched_oracle_sample(ctx, lo, hi, config.margin_length, config.oracle_size,
                                   np.random.default_rng(oracle_seed))
    if len(sim) < 50:
        report.failure = f"too few complete segments ({len(sim)})"
    else:
        try:
            compare_to_oracle(sim, clusters, oracle, model, config.max_count, config.alpha,
                              report, seed=config.seed)
        except ValueError as exc:   # too few replications for the cluster-robust tests
            report.failure = str(exc)
    _write(report, out_dir, (sim, oracle, config.max_count) if len(sim) else None)
    return report


def _write(report: ComparisonReport, out_dir, hist):
    if out_dir is None:
        return
    files = {"report.json": report.to_json() + "\n", "report.txt": report.to_table() + "\n"}
    if hist is not None:
        sim, oracle, K = hist
        hs, ho = empirical_vertex_histogram(sim, K), empirical_vertex_histogram(oracle, K)
        p = eval_pn(np.arange(K + 1))
        p = np.append(p, 1 - p.sum())
        rows = ["n_total,simulation_count,simulation_freq,oracle_count,oracle_freq,uncensored_theory"]
        for k in range(K + 2):
            label = str(k) if k <= K else f">{K}"
            rows.append(f"{label},{hs.total[k]},{hs.total_freq[k]:.8g},"
                        f"{ho.total[k]},{ho.total_freq[k]:.8g},{p[k]:.8g}")
        files["histograms.csv"] = "\n".join(rows) + "\n"
    write_files(out_dir, files)
