"""Evaluation metrics, bootstrap intervals and report assembly."""

import json
import logging
import math
from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
from scipy import stats

from decode_lab.corpus import Cohort, recurrence_stratum
from decode_lab.errors import UndefinedMetricError, UsageError
from decode_lab.files import PathLike, write_text_atomic
from decode_lab.schemas import EvalReport, MetricValue, OperatingPoint, Prediction, StratumValue

logger = logging.getLogger("decode_lab.metrics")

MetricFn = Callable[[np.ndarray, np.ndarray], float]

DEFAULT_FRACTIONS = (0.01, 0.05, 0.10, 0.20)


def _arrays(scores, labels) -> Tuple[np.ndarray, np.ndarray]:
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise UsageError(f"scores {scores.shape} and labels {labels.shape} must be 1-D and aligned")
    if scores.size == 0:
        raise UsageError("cannot evaluate an empty sample")
    if not np.isin(labels, (0, 1)).all():
        raise UsageError("labels must be 0 or 1")
    return scores, labels


# --- Set and threshold metrics ---

def jaccard(predicted: Iterable[str], gold: Iterable[str], empty_value: float = 1.0) -> float:
    predicted, gold = set(predicted), set(gold)
    union = predicted | gold
    if not union:
        return empty_value
    return len(predicted & gold) / len(union)


def confusion_metrics(scores, labels, threshold: float = 0.5) -> Dict[str, Optional[float]]:
    """ppv/f1 are 0 (with `no_predicted_positives` set) when nothing is flagged;
    sensitivity/specificity are None when the sample lacks that class."""
    scores, labels = _arrays(scores, labels)
    flagged = scores >= threshold
    tp = int((flagged & (labels == 1)).sum())
    fp = int((flagged & (labels == 0)).sum())
    positives = int(labels.sum())
    negatives = labels.size - positives
    sensitivity = tp / positives if positives else None
    specificity = (negatives - fp) / negatives if negatives else None
    no_flags = tp + fp == 0
    ppv = 0.0 if no_flags else tp / (tp + fp)
    if no_flags or not sensitivity or ppv == 0.0:
        f1 = 0.0
    else:
        f1 = 2 * ppv * sensitivity / (ppv + sensitivity)
    return {
        "ppv": ppv,
        "sensitivity": sensitivity,
        "specificity": specificity,
        "f1": f1,
        "no_predicted_positives": no_flags,
    }


# --- Ranking metrics ---

def auroc(scores, labels) -> float:
    """Mann-Whitney concordance with ties counted 1/2."""
    scores, labels = _arrays(scores, labels)
    positives = int(labels.sum())
    negatives = labels.size - positives
    if positives == 0 or negatives == 0:
        raise UndefinedMetricError("AUROC is undefined: only one class present")
    ranks = stats.rankdata(scores)
    return float((ranks[labels == 1].sum() - positives * (positives + 1) / 2.0) / (positives * negatives))


def auprc(scores, labels) -> float:
    """Average precision; tied scores keep their input order."""
    scores, labels = _arrays(scores, labels)
    positives = int(labels.sum())
    if positives == 0:
        raise UndefinedMetricError("AUPRC is undefined: no positive labels")
    ranked = labels[np.argsort(-scores, kind="stable")]
    hits = np.cumsum(ranked)
    at_positive = np.nonzero(ranked == 1)[0]
    return float((hits[at_positive] / (at_positive + 1)).sum() / positives)


def pearson_r(x: Sequence[float], y: Sequence[float]) -> float:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.size < 2:
        raise UsageError("pearson_r needs two aligned samples of length at least 2")
    dx, dy = x - x.mean(), y - y.mean()
    sx, sy = float(np.sqrt((dx * dx).sum())), float(np.sqrt((dy * dy).sum()))
    if sx == 0.0 or sy == 0.0:
        raise UndefinedMetricError("Pearson correlation is undefined: zero variance")
    return float(np.clip((dx * dy).sum() / (sx * sy), -1.0, 1.0))


# --- Bootstrap ---

def _resample(unique: np.ndarray, members: Dict, rng: np.random.Generator) -> np.ndarray:
    drawn = unique[rng.integers(0, unique.size, size=unique.size)]
    return np.concatenate([members[g] for g in drawn])


def bootstrap_replicates(
    metric_fn: MetricFn,
    scores,
    labels,
    n_boot: int = 1000,
    seed: int = 0,
    groups: Optional[Sequence] = None,
) -> Tuple[np.ndarray, int]:
    """Metric values on `n_boot` patient-level resamples, plus how many undefined resamples were redrawn.

    Replicate b, attempt a uses the generator seeded by (seed, b, a).
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    groups = np.arange(scores.size) if groups is None else np.asarray(groups)
    unique = np.unique(groups)
    members = {g: np.nonzero(groups == g)[0] for g in unique}
    values = np.empty(n_boot)
    redrawn = 0
    for b in range(n_boot):
        for attempt in range(1000):
            index = _resample(unique, members, np.random.default_rng([seed, b, attempt]))
            try:
                values[b] = metric_fn(scores[index], labels[index])
                break
            except UndefinedMetricError:
                redrawn += 1
        else:
            raise UndefinedMetricError("metric stayed undefined across 1000 redraws of one bootstrap replicate")
    if redrawn:
        logger.info(f"bootstrap: redrew {redrawn} resamples where the metric was undefined")
    return values, redrawn


def bootstrap_ci(
    metric_fn: MetricFn,
    scores,
    labels,
    n_boot: int = 1000,
    level: float = 0.95,
    seed: int = 0,
    groups: Optional[Sequence] = None,
) -> Tuple[float, float]:
    """Percentile interval; raises when the metric is undefined on the full sample."""
    if not 0.0 < level < 1.0:
        raise UsageError("level must lie strictly between 0 and 1")
    metric_fn(np.asarray(scores, dtype=np.float64), np.asarray(labels))
    values, _ = bootstrap_replicates(metric_fn, scores, labels, n_boot, seed, groups)
    tail = (1.0 - level) / 2.0
    low, high = np.quantile(values, [tail, 1.0 - tail])
    return float(low), float(high)


def metric_with_ci(metric_fn: MetricFn, scores, labels, n_boot: int, seed: int, groups=None) -> MetricValue:
    value = metric_fn(np.asarray(scores, dtype=np.float64), np.asarray(labels))
    low, high = bootstrap_ci(metric_fn, scores, labels, n_boot=n_boot, seed=seed, groups=groups)
    # percentile intervals can miss a skewed point estimate; widen to contain it
    return MetricValue(value=value, ci_low=min(low, value), ci_high=max(high, value))


def paired_bootstrap_test(
    metric_fn: MetricFn,
    scores_a,
    scores_b,
    labels,
    n_boot: int = 1000,
    seed: int = 0,
    groups: Optional[Sequence] = None,
) -> Tuple[float, float]:
    """(metric(b) - metric(a), two-sided bootstrap p-value) on shared resamples."""
    scores_a, labels_arr = _arrays(scores_a, labels)
    scores_b, _ = _arrays(scores_b, labels)
    stacked = np.stack([scores_a, scores_b], axis=1)
    difference = metric_fn(scores_b, labels_arr) - metric_fn(scores_a, labels_arr)

    def paired(sample: np.ndarray, sample_labels: np.ndarray) -> float:
        return metric_fn(sample[:, 1], sample_labels) - metric_fn(sample[:, 0], sample_labels)

    groups = np.arange(labels_arr.size) if groups is None else np.asarray(groups)
    unique = np.unique(groups)
    members = {g: np.nonzero(groups == g)[0] for g in unique}
    diffs = []
    for b in range(n_boot):
        for attempt in range(1000):
            index = _resample(unique, members, np.random.default_rng([seed, b, attempt]))
            try:
                diffs.append(paired(stacked[index], labels_arr[index]))
                break
            except UndefinedMetricError:
                continue
    diffs = np.asarray(diffs)
    if diffs.size == 0:
        raise UndefinedMetricError("paired comparison is undefined on every bootstrap resample")
    p_value = min(1.0, 2.0 * min(float((diffs <= 0).mean()), float((diffs >= 0).mean())))
    return float(difference), p_value


def paired_jaccard_test(
    baseline: Sequence[Prediction], improved: Sequence[Prediction], n_boot: int = 1000, seed: int = 0
) -> Tuple[float, float]:
    """(mean Jaccard gain of `improved`, p-value), resampling patients over the shared (patient, visit) pairs."""
    before = {(p.patient_id, p.visit_idx): jaccard(p.predicted, p.gold) for p in baseline}
    after = {(p.patient_id, p.visit_idx): jaccard(p.predicted, p.gold) for p in improved}
    if set(before) != set(after):
        raise UsageError("paired Jaccard comparison needs predictions for the same (patient, visit) pairs")
    if not before:
        raise UsageError("paired Jaccard comparison needs at least one prediction")
    pairs = sorted(before)

    def mean_metric(sample: np.ndarray, _labels: np.ndarray) -> float:
        return float(sample.mean())

    return paired_bootstrap_test(
        mean_metric,
        [before[pair] for pair in pairs],
        [after[pair] for pair in pairs],
        np.zeros(len(pairs), dtype=np.int64),
        n_boot=n_boot,
        seed=seed,
        groups=[patient_id for patient_id, _ in pairs],
    )


# --- Operating characteristics ---

def operating_table(scores, labels, fractions: Sequence[float] = DEFAULT_FRACTIONS) -> List[OperatingPoint]:
    scores, labels = _arrays(scores, labels)
    positives = int(labels.sum())
    negatives = labels.size - positives
    if positives == 0 or negatives == 0:
        raise UndefinedMetricError("operating table is undefined: only one class present")
    ranked = labels[np.argsort(-scores, kind="stable")]
    points = []
    for fraction in fractions:
        if not 0.0 < fraction <= 1.0:
            raise UsageError(f"top fraction must lie in (0, 1], got {fraction}")
        n_flagged = max(1, math.ceil(fraction * labels.size - 1e-9))
        tp = int(ranked[:n_flagged].sum())
        fp = n_flagged - tp
        points.append(
            OperatingPoint(
                top_fraction=fraction,
                sensitivity=tp / positives,
                specificity=(negatives - fp) / negatives,
                ppv=tp / n_flagged,
                n_flagged=n_flagged,
                true_positives=tp,
            )
        )
    return points


# --- Reports ---

def _defined(name: str, fn: Callable[[np.ndarray, np.ndarray], Optional[float]]) -> MetricFn:
    def metric(scores: np.ndarray, labels: np.ndarray) -> float:
        value = fn(scores, labels)
        if value is None:
            raise UndefinedMetricError(f"{name} is undefined on this sample")
        return value

    return metric


def task_report(
    scores,
    labels,
    task: str = "binary",
    threshold: float = 0.5,
    fractions: Sequence[float] = DEFAULT_FRACTIONS,
    n_boot: int = 1000,
    seed: int = 0,
    groups: Optional[Sequence] = None,
) -> EvalReport:
    scores, labels = _arrays(scores, labels)
    metric_fns: Dict[str, MetricFn] = {"auroc": auroc, "auprc": auprc}
    for name in ("ppv", "f1", "sensitivity", "specificity"):
        metric_fns[name] = _defined(name, lambda s, y, name=name: confusion_metrics(s, y, threshold)[name])
    metrics = {
        name: metric_with_ci(fn, scores, labels, n_boot, seed, groups) for name, fn in metric_fns.items()
    }
    confusion = confusion_metrics(scores, labels, threshold)
    return EvalReport(
        task=task,
        metrics=metrics,
        operating_points=operating_table(scores, labels, fractions),
        n=int(labels.size),
        prevalence=float(labels.mean()),
        notes={"threshold": threshold, "no_predicted_positives": confusion["no_predicted_positives"], "n_boot": n_boot},
    )


def code_prevalence(cohort: Cohort) -> Dict[str, float]:
    """Fraction of all visits in the cohort that contain each code."""
    counts: Dict[str, int] = defaultdict(int)
    n_visits = 0
    for record in cohort:
        for visit in record.visits:
            n_visits += 1
            for code in visit.codes:
                counts[code] += 1
    return {code: count / n_visits for code, count in counts.items()}


def daop_report(
    predictions: Sequence[Prediction],
    cohort: Cohort,
    code_sets: Dict[str, Sequence[str]],
    task: str = "daop",
    n_boot: int = 1000,
    seed: int = 0,
) -> EvalReport:
    """Next-visit Jaccard overall and by tracked-code recurrence stratum.

    The headline is the mean over (patient, visit) pairs. For a tracked code c,
    every pair whose gold visit contains c contributes its full-set Jaccard to
    the stratum c had in that patient's prior visits. Empty strata are absent.
    """
    if not predictions:
        raise UsageError("daop_report needs at least one prediction")
    records = {record.patient_id: record for record in cohort}
    values = np.array([jaccard(p.predicted, p.gold) for p in predictions])
    patient_groups = [p.patient_id for p in predictions]

    def mean_metric(sample: np.ndarray, _labels: np.ndarray) -> float:
        return float(sample.mean())

    metrics = {"jaccard": metric_with_ci(mean_metric, values, np.zeros(values.size, dtype=np.int64), n_boot, seed, patient_groups)}

    pooled: Dict[Tuple[str, str, Optional[str]], List[float]] = defaultdict(list)
    for prediction, value in zip(predictions, values):
        record = records.get(prediction.patient_id)
        if record is None:
            raise UsageError(f"prediction for unknown patient {prediction.patient_id}")
        gold = set(prediction.gold)
        for group, codes in code_sets.items():
            for code in codes:
                if code not in gold:
                    continue
                stratum = recurrence_stratum(record, prediction.visit_idx, code).value
                for key in ((group, stratum, None), ("all", stratum, None), (group, stratum, code), (group, "all", code)):
                    pooled[key].append(float(value))

    prevalence = code_prevalence(cohort)
    strata = [
        StratumValue(
            group=group,
            stratum=stratum,
            code=code,
            value=float(np.mean(pool)),
            n=len(pool),
            prevalence=prevalence.get(code) if code else None,
        )
        for (group, stratum, code), pool in sorted(pooled.items(), key=lambda item: (item[0][0], item[0][1], item[0][2] or ""))
    ]
    return EvalReport(task=task, metrics=metrics, strata=strata, n=len(predictions), notes={"aggregation": "mean over pairs"})


def stratum_value(report: EvalReport, group: str, stratum: str, code: Optional[str] = None) -> Optional[float]:
    for row in report.strata:
        if row.group == group and row.stratum == stratum and row.code == code:
            return row.value
    return None


@dataclass
class PrevalenceGain:
    codes: List[str]
    prevalence: List[float]
    gain: List[float]
    r: float
    p_value: Optional[float]


def prevalence_gain(baseline: EvalReport, improved: EvalReport) -> PrevalenceGain:
    """Correlate per-code prevalence with the per-code Jaccard gain of `improved` over `baseline`."""
    before = {row.code: row for row in baseline.strata if row.code and row.stratum == "all"}
    after = {row.code: row for row in improved.strata if row.code and row.stratum == "all"}
    codes = sorted(set(before) & set(after))
    if len(codes) < 2:
        raise UndefinedMetricError("prevalence-gain correlation needs at least two shared tracked codes")
    prevalence = [after[code].prevalence or 0.0 for code in codes]
    gain = [after[code].value - before[code].value for code in codes]
    r = pearson_r(prevalence, gain)
    p_value = float(stats.pearsonr(prevalence, gain)[1]) if len(codes) > 2 else None
    return PrevalenceGain(codes, prevalence, gain, r, p_value)


def write_report(report: EvalReport, out_dir: PathLike, stem: str = "report") -> Dict[str, Path]:
    out_dir = Path(out_dir)
    return {
        "json": write_text_atomic(out_dir / f"{stem}.json", json.dumps(report.model_dump(), indent=2)),
        "csv": write_text_atomic(out_dir / f"{stem}.csv", report.to_csv()),
    }
