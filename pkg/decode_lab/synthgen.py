"""Synthetic longitudinal cohorts with planted, oracle-computable signal."""

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import optimize, stats

from decode_lab.corpus import Cohort
from decode_lab.errors import ConfigError, UndefinedMetricError, UsageError
from decode_lab.files import PathLike, write_text_atomic
from decode_lab.metrics import auroc
from decode_lab.schemas import (
    CohortSummary,
    ComorbidityCluster,
    Demographics,
    GenConfig,
    LabelRow,
    PatientRecord,
    PlantedRule,
    Visit,
)
from decode_lab.settings import get_settings

logger = logging.getLogger("decode_lab.synthgen")

# rule name -> patient_id -> 0/1
LabelMap = Dict[str, Dict[str, int]]


def common_code_name(index: int) -> str:
    return f"A{index // 10:02d}.{index % 10}"


def rare_code_name(index: int) -> str:
    return f"R{index // 10:02d}.{index % 10}"


def default_gen_config(n_patients: int = 1000, seed: int = 0) -> GenConfig:
    return GenConfig(
        n_patients=n_patients,
        seed=seed,
        comorbidity_clusters=[ComorbidityCluster(codes=["A00.1", "A00.4", "A01.2"], boost=5.0)],
        planted_rules=[
            PlantedRule(
                name="ptsd_onset",
                precursors=("M54.50", "G47.00"),
                target="F43.12",
                kind="next_visit_code",
                precursor_rate=0.15,
                distractor_rate=0.15,
            ),
            PlantedRule(
                name="self_harm",
                precursors=("F43.10", "F32.9"),
                target="X71.0",
                kind="binary_outcome",
                base_prob=0.005,
                distractor_rate=0.2,
            ),
        ],
    )


def calibrated_location(mean: float, sd: float, low: int, high: int) -> float:
    """Location of a normal whose rounded, clamped draws have the requested mean."""
    if not low < mean < high:
        raise ConfigError(f"mean {mean} must lie strictly inside [{low}, {high}]")
    support = np.arange(low, high + 1)

    def clamped_mean(loc: float) -> float:
        upper = stats.norm.cdf((support + 0.5 - loc) / sd)
        lower = stats.norm.cdf((support - 0.5 - loc) / sd)
        mass = upper - lower
        mass[0] = upper[0]
        mass[-1] = 1.0 - lower[-1]
        return float(np.dot(support, mass)) - mean

    return optimize.brentq(clamped_mean, low - 10 * sd, high + 10 * sd, xtol=1e-12)


def ordered_pair_present(visits: Sequence[Sequence[str]], first: str, second: str) -> bool:
    """True when `first` occurs in a strictly earlier visit than some visit holding `second`."""
    for i, codes in enumerate(visits):
        if first in codes:
            return any(second in later for later in visits[i + 1:])
    return False


class CohortGenerator:
    """Draws patients independently; patient i uses the stream seeded by (seed, i)."""

    def __init__(self, config: GenConfig):
        self.config = config
        self.rules = list(config.planted_rules)
        self._visit_loc = calibrated_location(config.mean_visits, config.sd_visits, config.min_visits, config.max_visits)
        self._codes_loc = calibrated_location(
            config.mean_codes_per_visit, config.sd_codes, config.min_codes, config.max_codes
        )
        self._build_code_table()
        self._precursor_rates = {rule.name: self._precursor_rate(rule) for rule in self.rules}

    # --- Setup ---

    def _build_code_table(self):
        config = self.config
        if config.rare_weight >= 1.0:
            raise ConfigError("rare_weight must be below 1 so rare codes stay rarer than common codes")
        planted = {code for rule in self.rules for code in (*rule.precursors, rule.target)}
        common = [common_code_name(i) for i in range(config.n_common_codes)]
        rare = [rare_code_name(i) for i in range(config.n_rare_codes)]
        common_weights = 1.0 / np.arange(1, len(common) + 1) ** config.common_zipf_exponent
        rare_weights = np.full(len(rare), config.rare_weight * common_weights.min())

        names, weights = [], []
        for name, weight in zip(common + rare, np.concatenate([common_weights, rare_weights])):
            if name not in planted:
                names.append(name)
                weights.append(weight)
        if config.max_codes > len(names):
            raise ConfigError(
                f"max_codes {config.max_codes} exceeds the {len(names)} background codes available per visit"
            )
        self.code_names = names
        self.common_codes = [name for name in common if name not in planted]
        self.rare_codes = [name for name in rare if name not in planted]
        self._weights = np.asarray(weights)
        self._index = {name: i for i, name in enumerate(names)}
        n_chronic = int(np.ceil(config.chronic_fraction * len(self.common_codes)))
        self.chronic_codes = set(self.common_codes[:n_chronic])

        self._clusters: Dict[int, List[Tuple[np.ndarray, float]]] = {}
        for cluster in config.comorbidity_clusters:
            missing = [code for code in cluster.codes if code not in self._index]
            if missing:
                raise ConfigError(f"comorbidity cluster references unknown codes {missing}")
            members = np.array([self._index[code] for code in cluster.codes])
            for member in members:
                self._clusters.setdefault(int(member), []).append((members, cluster.boost))

    def _precursor_rate(self, rule: PlantedRule) -> float:
        if rule.precursor_rate is not None:
            rate = rule.precursor_rate
        elif rule.kind == "binary_outcome":
            target = self.config.outcome_prevalence_target
            if not rule.base_prob < target < rule.hit_prob:
                raise ConfigError(
                    f"rule {rule.name}: prevalence target {target} is unreachable with "
                    f"base_prob {rule.base_prob} and hit_prob {rule.hit_prob}"
                )
            rate = (target - rule.base_prob) / (rule.hit_prob - rule.base_prob)
        else:
            rate = 0.1
        if rate + rule.distractor_rate > 1.0:
            raise ConfigError(f"rule {rule.name}: precursor_rate + distractor_rate exceeds 1")
        return rate

    # --- Sampling ---

    def _rounded(self, rng: np.random.Generator, loc: float, sd: float, low: int, high: int) -> int:
        return int(np.clip(np.rint(rng.normal(loc, sd)), low, high))

    def _draw_codes(self, rng: np.random.Generator, k: int, exclude: Sequence[str]) -> List[str]:
        weights = self._weights.copy()
        for code in exclude:
            if code in self._index:
                weights[self._index[code]] = 0.0
        drawn = []
        for _ in range(k):
            cumulative = np.cumsum(weights)
            if cumulative[-1] <= 0:
                break
            i = int(np.searchsorted(cumulative, rng.random() * cumulative[-1], side="right"))
            i = min(i, len(weights) - 1)
            drawn.append(self.code_names[i])
            weights[i] = 0.0
            for members, boost in self._clusters.get(i, []):
                weights[members] *= boost
        return drawn

    def _schedule_injections(self, rng: np.random.Generator, n_visits: int) -> Dict[int, List[str]]:
        schedule: Dict[int, List[str]] = {}
        for rule in self.rules:
            u = rng.random()
            q = self._precursor_rates[rule.name]
            if u >= q + rule.distractor_rate:
                continue
            # next-visit rules need a visit after the second precursor
            last = n_visits - 2 if rule.kind == "next_visit_code" else n_visits - 1
            if last < 1:
                continue
            a = int(rng.integers(0, last))
            b = int(rng.integers(a + 1, last + 1))
            first, second = rule.precursors if u < q else rule.precursors[::-1]
            schedule.setdefault(a, []).append(first)
            schedule.setdefault(b, []).append(second)
        return schedule

    def generate_patient(self, index: int) -> Tuple[PatientRecord, Dict[str, int]]:
        config = self.config
        rng = np.random.default_rng([config.seed, index])
        n_visits = self._rounded(rng, self._visit_loc, config.sd_visits, config.min_visits, config.max_visits)
        age = int(rng.integers(config.min_age, config.max_age + 1))
        sex = "U" if rng.random() < config.p_sex_unknown else ("M" if rng.random() < 0.5 else "F")
        injections = self._schedule_injections(rng, n_visits)

        visits: List[List[str]] = []
        previous: List[str] = []
        for v in range(n_visits):
            size = self._rounded(rng, self._codes_loc, config.sd_codes, config.min_codes, config.max_codes)
            carried = [c for c in previous if c in self.chronic_codes and rng.random() < config.p_chronic][:size]
            fresh = self._draw_codes(rng, size - len(carried), carried)
            placed: List[str] = []

            def place(code: str):
                # planted codes replace a fresh draw so visit sizes keep their distribution
                if code in carried or code in fresh or code in placed:
                    return
                if fresh:
                    fresh.pop()
                placed.append(code)

            for code in injections.get(v, []):
                place(code)
            for rule in self.rules:
                if rule.kind != "next_visit_code":
                    continue
                fired = ordered_pair_present(visits, *rule.precursors)
                if rng.random() < (rule.hit_prob if fired else rule.base_prob):
                    place(rule.target)
            codes = carried + fresh + placed
            visits.append(codes)
            previous = codes

        labels = {}
        for rule in self.rules:
            if rule.kind == "binary_outcome":
                fired = ordered_pair_present(visits, *rule.precursors)
                labels[rule.name] = int(rng.random() < (rule.hit_prob if fired else rule.base_prob))

        record = PatientRecord(
            patient_id=f"P{index:06d}",
            demographics=Demographics(age_years=age, sex=sex),
            visits=[Visit(codes=codes) for codes in visits],
        )
        return record, labels


def generate_cohort(config: GenConfig, threads: Optional[int] = None) -> Tuple[Cohort, LabelMap]:
    generator = CohortGenerator(config)
    workers = threads or get_settings().threads
    with ThreadPoolExecutor(max_workers=workers) as pool:
        patients = list(pool.map(generator.generate_patient, range(config.n_patients)))

    cohort = [record for record, _ in patients]
    label_map: LabelMap = {rule.name: {} for rule in config.planted_rules if rule.kind == "binary_outcome"}
    for record, labels in patients:
        for name, label in labels.items():
            label_map[name][record.patient_id] = label
    return cohort, label_map


def _find_rule(config: GenConfig, rule: Union[str, PlantedRule]) -> PlantedRule:
    name = rule if isinstance(rule, str) else rule.name
    for candidate in config.planted_rules:
        if candidate.name == name and (isinstance(rule, str) or candidate == rule):
            return candidate
    raise UsageError(f"rule {name!r} is not part of this generator config")


def oracle_posterior(
    config: GenConfig, record: PatientRecord, rule: Union[str, PlantedRule], upto_visit: Optional[int] = None
) -> float:
    """The generator's exact conditional probability that the rule fires."""
    rule = _find_rule(config, rule)
    visits = [visit.codes for visit in record.visits[:upto_visit]]
    return rule.hit_prob if ordered_pair_present(visits, *rule.precursors) else rule.base_prob


def oracle_auroc(config: GenConfig, cohort: Cohort, labels: Dict[str, int], rule: Union[str, PlantedRule]) -> float:
    scores = [oracle_posterior(config, record, rule) for record in cohort]
    return auroc(scores, [labels[record.patient_id] for record in cohort])


def summarize_cohort(config: GenConfig, cohort: Cohort, label_map: LabelMap) -> CohortSummary:
    generator = CohortGenerator(config)
    n_visits = sum(len(record.visits) for record in cohort)
    visit_sets = [set(visit.codes) for record in cohort for visit in record.visits]

    def mean_prevalence(codes: Sequence[str]) -> float:
        if not codes:
            return 0.0
        return float(np.mean([sum(code in visit for visit in visit_sets) / n_visits for code in codes]))

    oracle = {}
    for name, labels in label_map.items():
        try:
            oracle[name] = oracle_auroc(config, cohort, labels, name)
        except UndefinedMetricError:
            oracle[name] = None
    return CohortSummary(
        n_patients=len(cohort),
        mean_visits=n_visits / len(cohort),
        mean_codes_per_visit=sum(len(v) for v in visit_sets) / n_visits,
        common_code_prevalence=mean_prevalence(generator.common_codes),
        rare_code_prevalence=mean_prevalence(generator.rare_codes),
        label_prevalence={name: float(np.mean(list(labels.values()))) for name, labels in label_map.items()},
        oracle_auroc=oracle,
    )


# --- Files ---

def load_gen_config(path: PathLike) -> GenConfig:
    path = Path(path)
    if not path.is_file():
        raise UsageError(f"generator config not found: {path}")
    try:
        return GenConfig.model_validate_json(path.read_text(encoding="utf-8"))
    except ValueError as e:
        raise ConfigError(f"invalid generator config {path}: {e}") from e


def save_labels(path: PathLike, label_map: LabelMap) -> Path:
    lines = [
        LabelRow(patient_id=pid, label=label, rule=rule).model_dump_json()
        for rule, labels in label_map.items()
        for pid, label in labels.items()
    ]
    return write_text_atomic(path, "\n".join(lines) + "\n")


def load_labels(path: PathLike) -> LabelMap:
    path = Path(path)
    if not path.is_file():
        raise UsageError(f"labels file not found: {path}")
    label_map: LabelMap = {}
    with open(path, encoding="utf-8") as handle:
        for line_number, line in enumerate(handle, start=1):
            if not line.strip():
                continue
            try:
                row = LabelRow.model_validate(json.loads(line))
            except ValueError as e:
                raise UsageError(f"{path}, line {line_number}: {e}") from e
            label_map.setdefault(row.rule, {})[row.patient_id] = row.label
    return label_map
