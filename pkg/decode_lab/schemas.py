from enum import Enum
from typing import Any, Dict, List, Literal, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, computed_field, field_validator, model_validator


# --- Patient records (external JSONL format) ---

class Demographics(BaseModel):
    model_config = ConfigDict(frozen=True, populate_by_name=True)

    age_years: int = Field(alias="age", ge=0)
    sex: Literal["M", "F", "U"] = "U"

    @field_validator("sex", mode="before")
    @classmethod
    def _unknown_sex(cls, value):
        if isinstance(value, str) and value.upper() in ("M", "F"):
            return value.upper()
        return "U"


class Visit(BaseModel):
    model_config = ConfigDict(frozen=True)

    codes: List[str]

    @field_validator("codes")
    @classmethod
    def _codes_are_a_set(cls, codes):
        if not codes:
            raise ValueError("visit has no codes")
        if len(set(codes)) != len(codes):
            dupes = sorted({c for c in codes if codes.count(c) > 1})
            raise ValueError(f"duplicate codes within a visit: {dupes}")
        return codes


class PatientRecord(BaseModel):
    model_config = ConfigDict(frozen=True, populate_by_name=True)

    patient_id: str
    demographics: Demographics
    visits: List[Visit]

    @field_validator("visits")
    @classmethod
    def _at_least_two_visits(cls, visits):
        if len(visits) < 2:
            raise ValueError(f"patients need at least 2 visits, got {len(visits)}")
        return visits

    def to_json_dict(self) -> Dict[str, Any]:
        return self.model_dump(by_alias=True)


class LabelRow(BaseModel):
    patient_id: str
    label: Literal[0, 1]
    rule: str


# --- Generator configuration ---

class PlantedRule(BaseModel):
    model_config = ConfigDict(extra="forbid")

    name: str
    precursors: Tuple[str, str]
    target: str
    hit_prob: float = Field(default=0.9, ge=0.0, le=1.0)
    base_prob: float = Field(default=0.02, ge=0.0, le=1.0)
    kind: Literal["next_visit_code", "binary_outcome"] = "next_visit_code"
    # share of patients receiving the ordered precursor pair; binary rules
    # leave it unset and let the generator calibrate it to the prevalence target
    precursor_rate: Optional[float] = Field(default=None, ge=0.0, le=1.0)
    distractor_rate: float = Field(default=0.0, ge=0.0, le=1.0)
    # a null rule fires at the same rate with or without the precursors
    null_rule: bool = False

    @model_validator(mode="after")
    def _check(self):
        first, second = self.precursors
        if len({first, second, self.target}) != 3:
            raise ValueError(f"rule {self.name}: precursors and target must be distinct codes")
        if self.null_rule and self.hit_prob != self.base_prob:
            raise ValueError(f"rule {self.name}: a null rule needs hit_prob == base_prob")
        if not self.null_rule and self.hit_prob <= self.base_prob:
            raise ValueError(f"rule {self.name}: hit_prob must exceed base_prob (set null_rule for equal rates)")
        return self


class ComorbidityCluster(BaseModel):
    model_config = ConfigDict(extra="forbid")

    codes: List[str] = Field(min_length=2)
    boost: float = Field(default=5.0, ge=1.0)


class GenConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    n_patients: int = Field(default=1000, ge=1)
    mean_visits: float = 10.1
    sd_visits: float = Field(default=3.3, gt=0)
    min_visits: int = Field(default=2, ge=2)
    max_visits: int = 40
    mean_codes_per_visit: float = 5.18
    sd_codes: float = Field(default=3.79, gt=0)
    min_codes: int = Field(default=1, ge=1)
    max_codes: int = 25
    n_common_codes: int = Field(default=60, ge=1)
    n_rare_codes: int = Field(default=120, ge=0)
    common_zipf_exponent: float = Field(default=1.0, ge=0.0)
    rare_weight: float = Field(default=0.05, gt=0.0)
    chronic_fraction: float = Field(default=0.3, ge=0.0, le=1.0)
    p_chronic: float = Field(default=0.7, ge=0.0, le=1.0)
    comorbidity_clusters: List[ComorbidityCluster] = []
    planted_rules: List[PlantedRule] = []
    outcome_prevalence_target: float = Field(default=0.019, ge=0.0, le=1.0)
    min_age: int = Field(default=18, ge=0)
    max_age: int = 95
    p_sex_unknown: float = Field(default=0.01, ge=0.0, le=1.0)
    seed: int = 0

    @model_validator(mode="after")
    def _check(self):
        if self.max_visits < self.min_visits:
            raise ValueError("max_visits must be at least min_visits")
        if self.max_codes < self.min_codes:
            raise ValueError("max_codes must be at least min_codes")
        if self.max_age < self.min_age:
            raise ValueError("max_age must be at least min_age")
        names = [rule.name for rule in self.planted_rules]
        if len(set(names)) != len(names):
            raise ValueError("planted rule names must be unique")
        return self


class CohortSummary(BaseModel):
    n_patients: int
    mean_visits: float
    mean_codes_per_visit: float
    common_code_prevalence: float
    rare_code_prevalence: float
    label_prevalence: Dict[str, float] = {}
    oracle_auroc: Dict[str, Optional[float]] = {}


# --- Noising, model and training configuration ---

class Scheme(str, Enum):
    CODE = "code"
    SPAN = "span"
    VISIT = "visit"
    PERMUTE = "permute"
    NONE = "none"


class NoiseParams(BaseModel):
    model_config = ConfigDict(extra="forbid")

    scheme: Scheme = Scheme.VISIT
    mask_rate: float = Field(default=0.15, ge=0.0, le=1.0)
    mean_span: float = Field(default=3.0, ge=1.0)
    visit_rate: float = Field(default=0.15, ge=0.0, le=1.0)
    random_replace: bool = False


class ModelConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    vocab_size: int = Field(ge=1)
    d_model: int = Field(default=64, ge=1)
    n_heads: int = Field(default=4, ge=1)
    n_encoder_layers: int = Field(default=2, ge=1)
    n_decoder_layers: int = Field(default=2, ge=1)
    d_ff: int = Field(default=128, ge=1)
    max_seq_len: int = Field(default=256, ge=1)
    dropout_prob: float = Field(default=0.1, ge=0.0, lt=1.0)

    @model_validator(mode="after")
    def _heads_divide_width(self):
        if self.d_model % self.n_heads != 0:
            raise ValueError(f"d_model {self.d_model} is not divisible by n_heads {self.n_heads}")
        return self


Objective = Literal["seq2seq_denoise", "encoder_mlm", "binary_finetune"]


class TrainConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    batch_size: int = Field(default=16, ge=1)
    max_steps: int = Field(default=1000, ge=1)
    lr: float = Field(default=3e-4, gt=0.0)
    warmup_steps: int = Field(default=100, ge=0)
    clip_norm: float = Field(default=1.0, gt=0.0)
    seed: int = 0
    eval_every: int = Field(default=100, ge=1)
    objective: Objective = "seq2seq_denoise"
    noise: NoiseParams = NoiseParams()
    history: Literal["full", "last-k"] = "full"
    k: int = Field(default=5, ge=2)


class TraceEntry(BaseModel):
    step: int
    loss: float
    objective: str
    seconds: Optional[float] = None


class LossTrace(BaseModel):
    entries: List[TraceEntry] = []
    validation: List[TraceEntry] = []

    @field_validator("entries")
    @classmethod
    def _steps_increase(cls, entries):
        steps = [entry.step for entry in entries]
        if any(b <= a for a, b in zip(steps, steps[1:])):
            raise ValueError("loss trace steps must be strictly increasing")
        return entries

    def to_csv(self, validation: bool = False) -> str:
        rows = self.validation if validation else self.entries
        lines = ["step,loss"] + [f"{row.step},{row.loss!r}" for row in rows]
        return "\n".join(lines) + "\n"


# --- Inference and evaluation ---

class Prediction(BaseModel):
    patient_id: str
    visit_idx: int
    predicted: List[str]
    gold: List[str]

    @field_validator("predicted", "gold")
    @classmethod
    def _as_sorted_set(cls, codes):
        return sorted(set(codes))


class LogRegModel(BaseModel):
    codes: List[str]
    weights: List[float]
    bias: float
    l2: float = 0.0

    @model_validator(mode="after")
    def _feature_dimension(self):
        # bag-of-codes + 10 age buckets + 3 sex indicators
        expected = len(self.codes) + 13
        if len(self.weights) != expected:
            raise ValueError(f"expected {expected} weights, got {len(self.weights)}")
        return self


class MetricValue(BaseModel):
    value: float
    ci_low: float
    ci_high: float

    @model_validator(mode="after")
    def _ordered(self):
        if not self.ci_low <= self.value <= self.ci_high:
            raise ValueError(f"interval [{self.ci_low}, {self.ci_high}] excludes {self.value}")
        return self


class StratumValue(BaseModel):
    group: str
    stratum: str
    code: Optional[str] = None
    value: float
    n: int
    prevalence: Optional[float] = None


class OperatingPoint(BaseModel):
    top_fraction: float
    sensitivity: float = Field(ge=0.0, le=1.0)
    specificity: float = Field(ge=0.0, le=1.0)
    ppv: float = Field(ge=0.0, le=1.0)
    n_flagged: int
    true_positives: int


class EvalReport(BaseModel):
    task: str
    metrics: Dict[str, MetricValue] = {}
    strata: List[StratumValue] = []
    operating_points: List[OperatingPoint] = []
    n: int
    prevalence: Optional[float] = None
    notes: Dict[str, Any] = {}

    def to_csv(self) -> str:
        lines = ["task,metric,value,ci_low,ci_high,stratum,n"]
        for name, metric in self.metrics.items():
            lines.append(f"{self.task},{name},{metric.value!r},{metric.ci_low!r},{metric.ci_high!r},,{self.n}")
        for row in self.strata:
            label = f"{row.group}:{row.code}" if row.code else row.group
            lines.append(f"{self.task},jaccard[{label}],{row.value!r},,,{row.stratum},{row.n}")
        for point in self.operating_points:
            stratum = f"top{point.top_fraction:g}"
            for name in ("sensitivity", "specificity", "ppv"):
                lines.append(f"{self.task},{name},{getattr(point, name)!r},,,{stratum},{point.n_flagged}")
        return "\n".join(lines) + "\n"


class AttentionRecord(BaseModel):
    side: Literal["encoder-self", "decoder-self", "cross"]
    layer: int
    head: int
    weights: List[List[float]]
    query_labels: List[str]
    key_labels: List[str]


# --- Run bookkeeping ---

class RunManifest(BaseModel):
    subcommand: str
    config: Dict[str, Any] = {}
    seed: Optional[int] = None
    inputs: Dict[str, str] = {}
    outputs: Dict[str, str] = {}
    duration_seconds: float = 0.0


class SeedOutcome(BaseModel):
    seed: int
    values: Dict[str, Optional[float]]
    passed: bool


class ExperimentSummary(BaseModel):
    name: str
    seeds: List[SeedOutcome] = []
    required: int
    config: Dict[str, Any] = {}

    @computed_field
    @property
    def n_passed(self) -> int:
        return sum(outcome.passed for outcome in self.seeds)

    @computed_field
    @property
    def passed(self) -> bool:
        return self.n_passed >= self.required
