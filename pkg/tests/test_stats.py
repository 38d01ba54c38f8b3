import json
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from streamfuse.metrics import MetricRecord
from streamfuse.stats import (
    ALPHA,
    StatError,
    build_stat_report,
    dunn_bonferroni,
    groupwise_test,
    kruskal_wallis,
    pairwise_compare,
    rank_methods,
    render_table,
    shapiro_wilk,
    wilcoxon_signed_rank,
)

FIXTURES = json.loads((Path(__file__).parent / "fixtures" / "stats_oracle.json").read_text())


# ---------------------------------------------------------------------------
# shapiro-wilk


def test_shapiro_preconditions():
    with pytest.raises(StatError):
        shapiro_wilk([1.0, 2.0])
    with pytest.raises(StatError):
        shapiro_wilk([3.0] * 10)


def test_shapiro_matches_reference_fixture():
    fx = FIXTURES["shapiro_20"]
    w, p = shapiro_wilk(fx["x"])
    assert w == pytest.approx(fx["W"], abs=1e-6)
    assert p == pytest.approx(fx["p"], abs=1e-6)
    fx = FIXTURES["shapiro_nonnormal"]
    w, p = shapiro_wilk(fx["x"])
    assert w == pytest.approx(fx["W"], abs=1e-6)
    assert p == pytest.approx(fx["p"], abs=1e-6)


# ---------------------------------------------------------------------------
# pairwise


def test_pairwise_degenerate_identical():
    a = np.arange(10.0)
    out = pairwise_compare(a, a.copy())
    assert out["test_name"] == "degenerate"
    assert out["p"] == 1.0


def test_pairwise_routes_to_t_and_matches_oracle():
    fx = FIXTURES["paired_normal"]
    out = pairwise_compare(fx["a"], fx["b"])
    assert out["test_name"] == fx["expected_test"] == "paired_t"
    assert out["p"] == pytest.approx(fx["p"], abs=1e-6)


def test_pairwise_routes_to_wilcoxon_exact_and_matches_oracle():
    fx = FIXTURES["paired_nonnormal_small"]
    out = pairwise_compare(fx["a"], fx["b"])
    assert out["test_name"] == fx["expected_test"] == "wilcoxon"
    assert out["p"] == pytest.approx(fx["p"], abs=1e-6)


def test_pairwise_wilcoxon_large_sample_matches_oracle():
    fx = FIXTURES["paired_nonnormal_large"]
    out = pairwise_compare(fx["a"], fx["b"])
    assert out["test_name"] == "wilcoxon"
    assert out["p"] == pytest.approx(fx["p"], abs=1e-6)


def test_pairwise_preconditions():
    with pytest.raises(StatError):
        pairwise_compare([1.0, 2.0], [1.0, 3.0])
    with pytest.raises(StatError):
        pairwise_compare([1.0, 2.0, 3.0], [1.0, 2.0])


def test_wilcoxon_zero_drop_and_constant_shift():
    # constant nonzero differences: Shapiro is inapplicable, routed nonparametric
    a = np.arange(12.0) + 0.5
    b = np.arange(12.0)
    out = pairwise_compare(a, b)
    assert out["test_name"] == "wilcoxon"
    assert out["normality_p"] is None
    # zeros dropped entirely
    stat, p = wilcoxon_signed_rank(np.array([0.0, 0.0, 0.0]))
    assert (stat, p) == (0.0, 1.0)


# ---------------------------------------------------------------------------
# group-wise


def test_groupwise_identical_groups():
    groups = [[1.0, 1.0, 1.0]] * 5
    h, p = kruskal_wallis(groups)
    assert h == 0.0 and p == 1.0
    out = groupwise_test(groups)
    assert out["test_name"] == "kruskal_wallis"
    assert out["p"] == 1.0


def test_groupwise_routes_to_anova_and_matches_oracle():
    fx = FIXTURES["group_normal"]
    out = groupwise_test(fx["groups"])
    assert out["test_name"] == fx["expected_test"] == "anova"
    assert out["p"] == pytest.approx(fx["p"], abs=1e-6)


def test_groupwise_routes_to_kruskal_and_matches_oracle():
    fx = FIXTURES["group_nonnormal"]
    out = groupwise_test(list(fx["groups"].values()))
    assert out["test_name"] == fx["expected_test"] == "kruskal_wallis"
    assert out["statistic"] == pytest.approx(fx["H"], abs=1e-6)
    assert out["p"] == pytest.approx(fx["p"], abs=1e-6)
    assert out["p"] < 0.01  # separated groups are significant at alpha


def test_routing_follows_normality_gate():
    rng = np.random.default_rng(1)
    gaussian = [rng.normal(m, 1.0, size=20) for m in (0.0, 0.2, 0.4)]
    assert groupwise_test(gaussian)["test_name"] == "anova"
    skewed = [np.exp(g) for g in gaussian]  # breaks normality
    assert groupwise_test(skewed)["test_name"] == "kruskal_wallis"


def test_groupwise_preconditions():
    with pytest.raises(StatError):
        groupwise_test([[1.0, 2.0, 3.0]])
    with pytest.raises(StatError):
        groupwise_test([[1.0, 2.0], [1.0, 2.0, 3.0]])


# ---------------------------------------------------------------------------
# dunn


def test_dunn_two_groups_matches_mannwhitney_oracle():
    fx = FIXTURES["dunn_two_groups"]
    mat = dunn_bonferroni(fx["groups"])
    # k = 2: one comparison, Bonferroni factor 1, so adjusted == raw == MWU
    assert mat[0, 1] == pytest.approx(fx["p"], abs=1e-6)


def test_dunn_matrix_shape_properties():
    rng = np.random.default_rng(2)
    groups = [rng.normal(m, 1.0, size=12) for m in (0.0, 0.5, 3.0)]
    mat = dunn_bonferroni(groups)
    assert mat.shape == (3, 3)
    np.testing.assert_array_equal(np.diag(mat), 1.0)
    np.testing.assert_array_equal(mat, mat.T)
    assert ((mat >= 0) & (mat <= 1)).all()


def test_dunn_identical_pair_is_clipped_to_one():
    g = [1.0, 2.0, 3.0, 4.0]
    mat = dunn_bonferroni([g, list(g), [10.0, 11.0, 12.0, 13.0]])
    assert mat[0, 1] == 1.0


def test_dunn_relabeling_equivariance():
    rng = np.random.default_rng(3)
    groups = [rng.normal(m, 1.0, size=10) for m in (0.0, 1.0, 2.5, 4.0)]
    mat = dunn_bonferroni(groups)
    perm = [2, 0, 3, 1]
    permuted = dunn_bonferroni([groups[i] for i in perm])
    np.testing.assert_allclose(permuted, mat[np.ix_(perm, perm)], atol=1e-12)


@given(st.lists(st.floats(-100, 100), min_size=4, max_size=30, unique=True), st.floats(-5, 5))
@settings(max_examples=25, deadline=None)
def test_bonferroni_never_below_raw_p(values, shift):
    g1 = np.array(values[: len(values) // 2])
    g2 = np.array(values[len(values) // 2 :]) + shift
    if len(g1) < 2 or len(g2) < 2:
        return
    mat3 = dunn_bonferroni([g1, g2, g2 + 0.1])
    mat2 = dunn_bonferroni([g1, g2])
    # same z for the (0,1) pair; three groups multiply the raw p by 3
    assert mat3[0, 1] >= min(1.0, mat2[0, 1]) - 1e-12


# ---------------------------------------------------------------------------
# ranking


def _records(means):
    records = []
    for method, mean in means.items():
        for i in range(3):
            records.append(MetricRecord(f"s{i}", method, "none", "unseen", mean, mean / 30, None))
    return records


def test_rank_methods_published_order():
    means = {"bd": 23.03, "cc": 22.41, "fl": 22.38, "na": 22.32, "ta": 19.48}
    ranking = rank_methods(_records(means), "psnr")
    assert [m for m, _ in ranking] == ["bd", "cc", "fl", "na", "ta"]


def test_rank_methods_singleton_and_ties():
    assert rank_methods(_records({"bd": 1.0}), "psnr") == [("bd", 1.0)]
    ranking = rank_methods(_records({"b": 2.0, "a": 2.0}), "psnr")
    assert [m for m, _ in ranking] == ["a", "b"]


# ---------------------------------------------------------------------------
# report assembly


def _aligned_groups(seed=4, separated=True):
    rng = np.random.default_rng(seed)
    base = rng.normal(22.0, 0.8, size=12)
    shift = {"bd": 3.0, "na": 0.0, "ta": -2.5} if separated else {"bd": 0, "na": 0, "ta": 0}
    return {m: base + s + rng.normal(0, 0.3, size=12) for m, s in shift.items()}


def test_report_structure_and_flags():
    report = build_stat_report(_aligned_groups(), "psnr")
    assert report.reference == "ta"
    assert report.omnibus["significant"] == (report.omnibus["p"] < ALPHA)
    for res in report.pairwise:
        assert res["significant"] == (res["p"] < ALPHA)
    assert (report.posthoc is not None) == report.omnibus["significant"]
    assert [m for m, _ in report.ranking][0] == "bd"
    parsed = json.loads(report.to_json())
    assert parsed["metric"] == "psnr"
    table = render_table(report)
    assert "All Methods" in table and "bd vs ta" in table


def test_report_identical_groups_no_posthoc():
    groups = {m: np.full(10, 5.0) for m in ("a", "b", "c")}
    report = build_stat_report(groups, "ssim")
    assert report.omnibus["p"] == 1.0
    assert report.posthoc is None
    assert all(v is None for v in report.normality.values())
    assert all(r["test_name"] == "degenerate" for r in report.pairwise)


def test_report_misaligned_groups_error():
    with pytest.raises(StatError):
        build_stat_report({"a": np.zeros(5), "b": np.zeros(6)}, "psnr")
