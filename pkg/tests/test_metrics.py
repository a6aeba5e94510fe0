import json
import math

import numpy as np
import pytest
from scipy import stats

from conftest import make_record
from decode_lab.errors import UndefinedMetricError, UsageError
from decode_lab.metrics import (
    auprc,
    auroc,
    bootstrap_ci,
    code_prevalence,
    confusion_metrics,
    daop_report,
    jaccard,
    metric_with_ci,
    operating_table,
    paired_bootstrap_test,
    paired_jaccard_test,
    pearson_r,
    prevalence_gain,
    stratum_value,
    task_report,
    write_report,
)
from decode_lab.schemas import EvalReport, Prediction, StratumValue


def brute_auroc(scores, labels):
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y == 0]
    wins = sum(1.0 if p > n else 0.5 if p == n else 0.0 for p in pos for n in neg)
    return wins / (len(pos) * len(neg))


def brute_auprc(scores, labels):
    order = sorted(range(len(scores)), key=lambda i: (-scores[i], i))
    hits, total = 0, 0.0
    for rank, i in enumerate(order, start=1):
        if labels[i] == 1:
            hits += 1
            total += hits / rank
    return total / sum(labels)


def test_ranking_metrics_on_a_known_example():
    scores, labels = [0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1]
    assert auroc(scores, labels) == pytest.approx(0.75)
    assert auprc(scores, labels) == pytest.approx(5 / 6)
    assert auprc([0.9, 0.8, 0.7], [1, 0, 1]) == pytest.approx(0.8333, abs=1e-4)


def test_ranking_metrics_match_brute_force_with_ties(rng):
    for _ in range(1000):
        n = int(rng.integers(2, 15))
        scores = (rng.integers(0, 5, size=n) / 4.0).tolist()
        labels = rng.integers(0, 2, size=n).tolist()
        if 0 < sum(labels) < n:
            assert auroc(scores, labels) == pytest.approx(brute_auroc(scores, labels), abs=1e-12)
        if sum(labels) > 0:
            assert auprc(scores, labels) == pytest.approx(brute_auprc(scores, labels), abs=1e-12)


def test_undefined_ranking_metrics():
    with pytest.raises(UndefinedMetricError) as info:
        auroc([0.2, 0.3], [1, 1])
    assert info.value.exit_code == 3
    with pytest.raises(UndefinedMetricError):
        auprc([0.2, 0.3], [0, 0])
    with pytest.raises(UsageError):
        auroc([0.2, 0.3], [0, 2])


def test_jaccard():
    assert jaccard({"A", "B"}, {"B", "C"}) == pytest.approx(1 / 3)
    assert jaccard([], []) == 1.0
    assert jaccard(["A"], []) == 0.0


def test_confusion_metrics_without_flagged_patients():
    result = confusion_metrics([0.1, 0.2, 0.3], [0, 1, 1], threshold=0.5)
    assert result["ppv"] == 0.0 and result["f1"] == 0.0
    assert result["no_predicted_positives"] is True
    assert result["sensitivity"] == 0.0 and result["specificity"] == 1.0


def test_confusion_metrics_values():
    result = confusion_metrics([0.9, 0.6, 0.4, 0.7], [1, 0, 1, 0], threshold=0.5)
    assert result["ppv"] == pytest.approx(1 / 3)
    assert result["sensitivity"] == pytest.approx(0.5)
    assert result["specificity"] == pytest.approx(0.0)
    assert result["f1"] == pytest.approx(0.4)


def test_pearson_matches_scipy(rng):
    x, y = rng.normal(size=50), rng.normal(size=50)
    assert pearson_r(x, y) == pytest.approx(stats.pearsonr(x, y)[0], abs=1e-12)
    with pytest.raises(UndefinedMetricError):
        pearson_r([1.0, 1.0, 1.0], [1.0, 2.0, 3.0])


def test_operating_table_identities(rng):
    scores = rng.random(200)
    labels = (rng.random(200) < 0.2).astype(int)
    positives = labels.sum()
    points = operating_table(scores, labels, fractions=(0.01, 0.05, 0.1, 1.0))
    assert [p.n_flagged for p in points] == [2, 10, 20, 200]
    for point in points:
        assert point.sensitivity * positives == pytest.approx(point.ppv * point.n_flagged)
    assert points[-1].ppv == pytest.approx(labels.mean())
    assert points[-1].sensitivity == 1.0 and points[-1].specificity == 0.0


def test_operating_table_flags_at_least_one_patient():
    (point,) = operating_table([0.9, 0.1, 0.2], [1, 0, 0], fractions=(0.01,))
    assert point.n_flagged == 1 and point.ppv == 1.0
    with pytest.raises(UsageError):
        operating_table([0.9, 0.1], [1, 0], fractions=(0.0,))


def test_bootstrap_is_deterministic_and_contains_the_estimate(rng):
    scores = rng.random(80)
    labels = (scores + rng.normal(scale=0.3, size=80) > 0.5).astype(int)
    first = bootstrap_ci(auroc, scores, labels, n_boot=200, seed=11)
    assert first == bootstrap_ci(auroc, scores, labels, n_boot=200, seed=11)
    value = metric_with_ci(auroc, scores, labels, n_boot=200, seed=11)
    assert value.ci_low <= value.value <= value.ci_high
    assert value.ci_low < value.ci_high


def test_bootstrap_raises_when_undefined_on_full_sample():
    with pytest.raises(UndefinedMetricError):
        bootstrap_ci(auroc, [0.1, 0.2, 0.3], [1, 1, 1], n_boot=10)


def test_paired_test_on_identical_scores(rng):
    scores = rng.random(40)
    labels = np.arange(40) % 2
    difference, p_value = paired_bootstrap_test(auroc, scores, scores, labels, n_boot=100)
    assert difference == 0.0 and p_value == 1.0


def test_paired_test_detects_a_better_scorer(rng):
    labels = np.arange(200) % 2
    noise = rng.normal(size=200)
    weak, strong = labels + 2.0 * noise, labels + 0.2 * noise
    difference, p_value = paired_bootstrap_test(auroc, weak, strong, labels, n_boot=200)
    assert difference > 0.1 and p_value < 0.05


def test_paired_jaccard_test_on_a_clear_gain():
    gold = [Prediction(patient_id=f"P{i}", visit_idx=2, predicted=[], gold=["A", "B"]) for i in range(30)]
    improved = [p.model_copy(update={"predicted": ["A", "B"]}) for p in gold]
    gain, p_value = paired_jaccard_test(gold, improved, n_boot=50)
    assert gain == pytest.approx(1.0)
    assert p_value == 0.0


def test_paired_jaccard_test_needs_the_same_pairs():
    baseline = [Prediction(patient_id="P1", visit_idx=1, predicted=["A"], gold=["A"])]
    improved = [Prediction(patient_id="P1", visit_idx=2, predicted=["A"], gold=["A"])]
    with pytest.raises(UsageError):
        paired_jaccard_test(baseline, improved, n_boot=10)


def test_auprc_of_random_scores_is_the_prevalence(rng):
    labels = (rng.random(100_000) < 0.1).astype(int)
    assert auprc(rng.random(100_000), labels) == pytest.approx(labels.mean(), abs=0.02)


@pytest.mark.slow
def test_auroc_interval_coverage():
    # binormal scores with unit separation: true AUROC is Phi(1/sqrt(2))
    truth = stats.norm.cdf(1.0 / math.sqrt(2.0))
    covered = 0
    for replicate in range(100):
        sample = np.random.default_rng([17, replicate])
        labels = (np.arange(500) % 5 == 0).astype(int)
        scores = sample.normal(size=500) + labels
        low, high = bootstrap_ci(auroc, scores, labels, n_boot=500, seed=replicate)
        covered += low <= truth <= high
    assert covered >= 90


def test_task_report(tmp_path, rng):
    scores = rng.random(60)
    labels = (np.arange(60) % 3 == 0).astype(int)
    report = task_report(scores, labels, n_boot=50, seed=2)
    assert set(report.metrics) == {"auroc", "auprc", "ppv", "f1", "sensitivity", "specificity"}
    assert [p.top_fraction for p in report.operating_points] == [0.01, 0.05, 0.10, 0.20]
    assert report.n == 60 and report.prevalence == pytest.approx(1 / 3)
    paths = write_report(report, tmp_path)
    assert json.loads(paths["json"].read_text())["task"] == "binary"
    assert paths["csv"].read_text().startswith("task,metric,value")


def daop_example():
    cohort = [
        make_record("P1", [["A"], ["A"], ["A", "B"]]),
        make_record("P2", [["C"], ["A", "C"]]),
    ]
    predictions = [
        Prediction(patient_id="P1", visit_idx=2, predicted=["A"], gold=["A", "B"]),
        Prediction(patient_id="P2", visit_idx=1, predicted=["A", "C"], gold=["A", "C"]),
    ]
    return cohort, predictions


def test_daop_report_strata():
    cohort, predictions = daop_example()
    report = daop_report(predictions, cohort, {"common": ["A"], "rare": ["B"]}, n_boot=20)
    assert report.metrics["jaccard"].value == pytest.approx(0.75)
    assert stratum_value(report, "common", "H") == pytest.approx(0.5)
    assert stratum_value(report, "common", "Zero") == pytest.approx(1.0)
    assert stratum_value(report, "rare", "Zero") == pytest.approx(0.5)
    assert stratum_value(report, "all", "Zero") == pytest.approx(0.75)
    assert stratum_value(report, "common", "all", "A") == pytest.approx(0.75)
    # no tracked code fell in the low-recurrence stratum
    assert stratum_value(report, "common", "L") is None
    row = next(r for r in report.strata if r.code == "A" and r.stratum == "all")
    assert row.n == 2 and row.prevalence == pytest.approx(0.8)


def test_daop_report_rejects_unknown_patients():
    cohort, predictions = daop_example()
    stray = Prediction(patient_id="P9", visit_idx=1, predicted=["A"], gold=["A"])
    with pytest.raises(UsageError):
        daop_report(predictions + [stray], cohort, {"common": ["A"]}, n_boot=10)
    with pytest.raises(UsageError):
        daop_report([], cohort, {"common": ["A"]})


def test_code_prevalence_counts_visits():
    cohort, _ = daop_example()
    assert code_prevalence(cohort) == {"A": 0.8, "B": 0.2, "C": 0.4}


def code_row(code, value, prevalence):
    return StratumValue(group="common", stratum="all", code=code, value=value, n=5, prevalence=prevalence)


def test_prevalence_gain_correlation():
    baseline = EvalReport(task="daop", n=10, strata=[code_row("A", 0.5, 0.8), code_row("B", 0.4, 0.2), code_row("C", 0.3, 0.5)])
    improved = EvalReport(task="daop", n=10, strata=[code_row("A", 0.7, 0.8), code_row("B", 0.3, 0.2), code_row("C", 0.35, 0.5)])
    gain = prevalence_gain(baseline, improved)
    assert gain.codes == ["A", "B", "C"]
    assert gain.gain == pytest.approx([0.2, -0.1, 0.05])
    assert gain.r == pytest.approx(stats.pearsonr([0.8, 0.2, 0.5], [0.2, -0.1, 0.05])[0])
    assert gain.p_value is not None and 0.0 <= gain.p_value <= 1.0
    with pytest.raises(UndefinedMetricError):
        prevalence_gain(baseline, EvalReport(task="daop", n=1, strata=[code_row("A", 0.7, 0.8)]))


def test_ci_bounds_are_finite(rng):
    scores = rng.random(30)
    labels = np.arange(30) % 2
    low, high = bootstrap_ci(auprc, scores, labels, n_boot=50)
    assert math.isfinite(low) and math.isfinite(high) and 0.0 <= low <= high <= 1.0
