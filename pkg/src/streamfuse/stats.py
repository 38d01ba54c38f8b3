"""Decision-tree statistical comparison of method metric distributions:
Shapiro-Wilk normality gating, paired t / Wilcoxon signed-rank pairwise
tests, one-way ANOVA / Kruskal-Wallis omnibus tests, Dunn's post-hoc with
Bonferroni correction, and mean-score ranking.

Statistics are computed in-module (Shapiro-Wilk via Royston's AS R94
approximation, Wilcoxon with an exact conditional distribution for n <= 25
and the tie-corrected normal approximation above); only the distribution
CDFs come from scipy. All tests are two-sided; significance means p < alpha
with alpha = 0.01 by default, and the same alpha gates normality.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import chi2 as chi2_dist
from scipy.stats import f as f_dist
from scipy.stats import norm as norm_dist
from scipy.stats import t as t_dist

ALPHA = 0.01


class StatError(ValueError):
    """Raised when a test's preconditions (sample size, variance) fail."""


def _midranks(values: np.ndarray) -> np.ndarray:
    order = np.argsort(values, kind="mergesort")
    ranks = np.empty(len(values), dtype=np.float64)
    sorted_vals = values[order]
    i = 0
    while i < len(values):
        j = i
        while j + 1 < len(values) and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        ranks[order[i : j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def _tie_term(values: np.ndarray) -> float:
    """sum(t^3 - t) over groups of tied values."""
    _, counts = np.unique(values, return_counts=True)
    return float(np.sum(counts.astype(np.float64) ** 3 - counts))


# ---------------------------------------------------------------------------
# Shapiro-Wilk (Royston 1995, AS R94)


def shapiro_wilk(x):
    """W statistic and p-value for the null of normality, 3 <= n <= 5000."""
    x = np.sort(np.asarray(x, dtype=np.float64))
    n = len(x)
    if n < 3 or n > 5000:
        raise StatError(f"Shapiro-Wilk requires 3 <= n <= 5000, got {n}")
    if x[0] == x[-1]:
        raise StatError("Shapiro-Wilk is undefined for a zero-variance sample")

    m = norm_dist.ppf((np.arange(1, n + 1) - 0.375) / (n + 0.25))
    m_sq = float(np.sum(m * m))
    c = m / np.sqrt(m_sq)
    u = 1.0 / np.sqrt(n)
    a = np.empty(n)
    if n > 5:
        a_n = c[-1] + 0.221157 * u - 0.147981 * u**2 - 2.071190 * u**3 + 4.434685 * u**4 - 2.706056 * u**5
        a_n1 = c[-2] + 0.042981 * u - 0.293762 * u**2 - 1.752461 * u**3 + 5.682633 * u**4 - 3.582633 * u**5
        phi = (m_sq - 2 * m[-1] ** 2 - 2 * m[-2] ** 2) / (1 - 2 * a_n**2 - 2 * a_n1**2)
        a[2:-2] = m[2:-2] / np.sqrt(phi)
        a[-1], a[-2] = a_n, a_n1
        a[0], a[1] = -a_n, -a_n1
    elif n > 3:
        a_n = c[-1] + 0.221157 * u - 0.147981 * u**2 - 2.071190 * u**3 + 4.434685 * u**4 - 2.706056 * u**5
        phi = (m_sq - 2 * m[-1] ** 2) / (1 - 2 * a_n**2)
        a[1:-1] = m[1:-1] / np.sqrt(phi)
        a[-1] = a_n
        a[0] = -a_n
    else:  # n == 3
        a[:] = (-np.sqrt(0.5), 0.0, np.sqrt(0.5))

    sse = float(np.sum((x - x.mean()) ** 2))
    w = float(np.dot(a, x) ** 2 / sse)
    w = min(w, 1.0)

    if n == 3:
        p = (6.0 / np.pi) * (np.arcsin(np.sqrt(w)) - np.arcsin(np.sqrt(0.75)))
        return w, float(np.clip(p, 0.0, 1.0))
    one_minus_w = max(1.0 - w, 1e-15)
    if n <= 11:
        gamma = -2.273 + 0.459 * n
        lw = -np.log(gamma - np.log(one_minus_w))
        mu = 0.5440 - 0.39978 * n + 0.025054 * n**2 - 0.0006714 * n**3
        sigma = np.exp(1.3822 - 0.77857 * n + 0.062767 * n**2 - 0.0020322 * n**3)
    else:
        ln_n = np.log(n)
        lw = np.log(one_minus_w)
        mu = -1.5861 - 0.31082 * ln_n - 0.083751 * ln_n**2 + 0.0038915 * ln_n**3
        sigma = np.exp(-0.4803 - 0.082676 * ln_n + 0.0030302 * ln_n**2)
    z = (lw - mu) / sigma
    return w, float(norm_dist.sf(z))


def _is_normal(x, alpha: float) -> bool:
    """Normality gate; zero-variance samples cannot be tested and route to
    the nonparametric branch."""
    x = np.asarray(x, dtype=np.float64)
    if x.min() == x.max():
        return False
    return shapiro_wilk(x)[1] > alpha


# ---------------------------------------------------------------------------
# pairwise tests


def paired_ttest(d):
    d = np.asarray(d, dtype=np.float64)
    n = len(d)
    sd = d.std(ddof=1)
    t = d.mean() / (sd / np.sqrt(n))
    return float(t), float(2.0 * t_dist.sf(abs(t), n - 1))


def _wilcoxon_exact_p(ranks2: np.ndarray, w2: int) -> float:
    """Exact two-sided p for the signed-rank statistic, conditional on the
    observed ranks (doubled to integers so midranks from ties stay exact)."""
    total = int(ranks2.sum())
    counts = np.zeros(total + 1, dtype=np.float64)
    counts[0] = 1.0
    for r in ranks2.astype(np.int64):
        counts[r:] += counts[: total + 1 - r].copy()
    counts /= 2.0 ** len(ranks2)
    cdf = float(counts[: w2 + 1].sum())
    sf = float(counts[w2:].sum())
    return min(1.0, 2.0 * min(cdf, sf))


def wilcoxon_signed_rank(d, exact_max_n: int = 25):
    """Signed-rank test on differences: zeros dropped, exact conditional
    distribution for n <= exact_max_n, else the normal approximation with
    tie correction (no continuity correction)."""
    d = np.asarray(d, dtype=np.float64)
    d = d[d != 0.0]
    n = len(d)
    if n == 0:
        return 0.0, 1.0
    ranks = _midranks(np.abs(d))
    w_plus = float(ranks[d > 0].sum())
    if n <= exact_max_n:
        ranks2 = np.rint(2.0 * ranks)
        p = _wilcoxon_exact_p(ranks2, int(round(2.0 * w_plus)))
        return w_plus, p
    mu = n * (n + 1) / 4.0
    var = n * (n + 1) * (2 * n + 1) / 24.0 - _tie_term(np.abs(d)) / 48.0
    z = (w_plus - mu) / np.sqrt(var)
    return w_plus, float(min(1.0, 2.0 * norm_dist.sf(abs(z))))


def pairwise_compare(a, b, alpha: float = ALPHA):
    """Compare two paired sample vectors: Shapiro-Wilk on the differences
    routes to a paired t-test (normal) or Wilcoxon signed-rank test."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1 or len(a) < 3:
        raise StatError(f"paired comparison needs equal-length vectors of n >= 3, got {a.shape} / {b.shape}")
    d = a - b
    if np.all(d == 0.0):
        return {"test_name": "degenerate", "statistic": 0.0, "p": 1.0, "normality_p": None}
    if d.min() == d.max():
        normal, norm_p = False, None
    else:
        _, norm_p = shapiro_wilk(d)
        normal = norm_p > alpha
    if normal:
        stat, p = paired_ttest(d)
        name = "paired_t"
    else:
        stat, p = wilcoxon_signed_rank(d)
        name = "wilcoxon"
    return {"test_name": name, "statistic": stat, "p": p, "normality_p": norm_p}


# ---------------------------------------------------------------------------
# group-wise tests


def one_way_anova(groups):
    groups = [np.asarray(g, dtype=np.float64) for g in groups]
    k = len(groups)
    ns = np.array([len(g) for g in groups])
    n_total = int(ns.sum())
    grand = np.concatenate(groups).mean()
    ss_between = float(sum(len(g) * (g.mean() - grand) ** 2 for g in groups))
    ss_within = float(sum(((g - g.mean()) ** 2).sum() for g in groups))
    df_b, df_w = k - 1, n_total - k
    if ss_within == 0.0:
        return (0.0, 1.0) if ss_between == 0.0 else (float("inf"), 0.0)
    f = (ss_between / df_b) / (ss_within / df_w)
    return float(f), float(f_dist.sf(f, df_b, df_w))


def kruskal_wallis(groups):
    """H statistic with tie correction; identically-valued pooled data yields
    H = 0, p = 1 by convention (no rank separation is possible)."""
    groups = [np.asarray(g, dtype=np.float64) for g in groups]
    pooled = np.concatenate(groups)
    n_total = len(pooled)
    if pooled.min() == pooled.max():
        return 0.0, 1.0
    ranks = _midranks(pooled)
    h = 0.0
    offset = 0
    for g in groups:
        r = ranks[offset : offset + len(g)]
        h += r.sum() ** 2 / len(g)
        offset += len(g)
    h = 12.0 / (n_total * (n_total + 1)) * h - 3.0 * (n_total + 1)
    correction = 1.0 - _tie_term(pooled) / (n_total**3 - n_total)
    h /= correction
    return float(h), float(chi2_dist.sf(h, len(groups) - 1))


def groupwise_test(groups, alpha: float = ALPHA):
    """One-way ANOVA when every group passes the normality gate, otherwise
    Kruskal-Wallis."""
    groups = [np.asarray(g, dtype=np.float64) for g in groups]
    if len(groups) < 2 or any(len(g) < 3 for g in groups):
        raise StatError("group test needs >= 2 groups of n >= 3")
    if all(_is_normal(g, alpha) for g in groups):
        stat, p = one_way_anova(groups)
        name = "anova"
    else:
        stat, p = kruskal_wallis(groups)
        name = "kruskal_wallis"
    return {"test_name": name, "statistic": stat, "p": p}


def dunn_bonferroni(groups):
    """Dunn's pairwise z tests on pooled ranks (tie-corrected), Bonferroni
    adjusted by the k(k-1)/2 comparisons and clipped to 1. Returns a
    symmetric k x k matrix with unit diagonal."""
    groups = [np.asarray(g, dtype=np.float64) for g in groups]
    k = len(groups)
    pooled = np.concatenate(groups)
    n_total = len(pooled)
    ranks = _midranks(pooled)
    mean_ranks, sizes = [], []
    offset = 0
    for g in groups:
        mean_ranks.append(ranks[offset : offset + len(g)].mean())
        sizes.append(len(g))
        offset += len(g)
    var_base = n_total * (n_total + 1) / 12.0 - _tie_term(pooled) / (12.0 * (n_total - 1))
    m = k * (k - 1) / 2.0
    out = np.ones((k, k), dtype=np.float64)
    for i in range(k):
        for j in range(i + 1, k):
            denom = np.sqrt(var_base * (1.0 / sizes[i] + 1.0 / sizes[j]))
            z = 0.0 if denom == 0.0 else (mean_ranks[i] - mean_ranks[j]) / denom
            p = min(1.0, 2.0 * norm_dist.sf(abs(z)) * m)
            out[i, j] = out[j, i] = p
    return out


def rank_methods(records, metric: str):
    """Rank methods by descending mean of the named metric attribute
    ('psnr_db' / 'ssim' / 'dice', or 'psnr'/'ssim' aliases); ties broken
    lexicographically."""
    attr = {"psnr": "psnr_db"}.get(metric, metric)
    by_method: dict[str, list[float]] = {}
    for r in records:
        value = getattr(r, attr)
        if value is None:
            continue
        by_method.setdefault(r.method, []).append(float(value))
    if not by_method:
        raise StatError(f"no records carry metric {metric!r}")
    means = [(method, float(np.mean(vals))) for method, vals in by_method.items()]
    return sorted(means, key=lambda mv: (-mv[1], mv[0]))


# ---------------------------------------------------------------------------
# report assembly


@dataclass
class StatReport:
    metric: str
    methods: list
    alpha: float
    normality: dict  # method -> {"W":, "p":} or None when inapplicable
    omnibus: dict  # {"test_name", "statistic", "p", "significant"}
    pairwise: list  # [{"pair", "test_name", "statistic", "p", "significant"}]
    posthoc: list | None  # adjusted-p matrix (row-major, in `methods` order)
    ranking: list  # [(method, mean)] descending
    reference: str

    def to_json(self) -> str:
        return json.dumps(
            {
                "metric": self.metric,
                "methods": self.methods,
                "alpha": self.alpha,
                "normality": self.normality,
                "omnibus": self.omnibus,
                "pairwise": self.pairwise,
                "posthoc": self.posthoc,
                "ranking": self.ranking,
                "reference": self.reference,
            },
            indent=2,
        )


def build_stat_report(groups: dict, metric: str, reference: str | None = None, alpha: float = ALPHA) -> StatReport:
    """Run the full decision tree for one metric over method -> sample-vector
    groups (vectors must be sample-aligned across methods). Pairwise tests
    compare every method against the designated reference (default: 'ta' when
    present, else the lexicographically first method). The post-hoc matrix is
    emitted only when the omnibus test is significant."""
    methods = sorted(groups)
    vectors = [np.asarray(groups[m], dtype=np.float64) for m in methods]
    lengths = {len(v) for v in vectors}
    if len(lengths) != 1:
        raise StatError(f"groups must be sample-aligned; got lengths {sorted(lengths)}")
    if reference is None:
        reference = "ta" if "ta" in methods else methods[0]
    if reference not in methods:
        raise StatError(f"reference {reference!r} not among methods {methods}")

    normality = {}
    for m, v in zip(methods, vectors):
        if v.min() == v.max():
            normality[m] = None
        else:
            w, p = shapiro_wilk(v)
            normality[m] = {"W": w, "p": p}

    omnibus = groupwise_test(vectors, alpha)
    omnibus["significant"] = bool(omnibus["p"] < alpha)

    pairwise = []
    for m in methods:
        if m == reference:
            continue
        res = pairwise_compare(groups[m], groups[reference], alpha)
        res["pair"] = f"{m} vs {reference}"
        res["significant"] = bool(res["p"] < alpha)
        pairwise.append(res)

    posthoc = dunn_bonferroni(vectors).tolist() if omnibus["significant"] else None

    class _Row:
        def __init__(self, method, value):
            self.method = method
            self.value = value

    rows = [_Row(m, x) for m, v in zip(methods, vectors) for x in v]
    ranking = rank_methods(rows, "value")
    return StatReport(
        metric=metric,
        methods=methods,
        alpha=alpha,
        normality=normality,
        omnibus=omnibus,
        pairwise=pairwise,
        posthoc=posthoc,
        ranking=ranking,
        reference=reference,
    )


def render_table(report: StatReport) -> str:
    """Plain-text summary table: Section / Comparison /
    Metric / Test used / p-value / Significant?, followed by mean scores."""

    def row(section, comparison, test, p, significant):
        sig = {True: "Yes", False: "No", None: "--"}[significant]
        p_text = "--" if p is None else f"{p:.3g}"
        return f"{section:<18} {comparison:<14} {report.metric:<8} {test:<18} {p_text:<10} {sig}"

    lines = [
        f"{'Section':<18} {'Comparison':<14} {'Metric':<8} {'Test used':<18} {'p-value':<10} Significant?",
        "-" * 80,
        row("Group-wise", "All Methods", report.omnibus["test_name"], report.omnibus["p"], report.omnibus["significant"]),
    ]
    for res in report.pairwise:
        lines.append(row("Pairwise", res["pair"], res["test_name"], res["p"], res["significant"]))
    if report.posthoc is not None:
        for i, mi in enumerate(report.methods):
            for j in range(i + 1, len(report.methods)):
                lines.append(
                    row("Dunn's", f"{mi} vs {report.methods[j]}", "Dunn (Bonferroni)", report.posthoc[i][j], report.posthoc[i][j] < report.alpha)
                )
    lines.append("-" * 80)
    lines.append(f"{'Rank':<6} {'Method':<10} Mean {report.metric}")
    for idx, (method, mean) in enumerate(report.ranking, start=1):
        lines.append(f"{idx:<6} {method:<10} {mean:.4f}")
    return "\n".join(lines)
