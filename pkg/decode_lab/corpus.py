"""Patient records, the code vocabulary and visit-delimited token sequences."""

import json
import logging
from collections import Counter
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Any, Dict, Iterable, List, Sequence, Tuple

import numpy as np
from pydantic import ValidationError

from decode_lab.errors import RecordParseError, RecordValidationError, UsageError
from decode_lab.files import PathLike, write_text_atomic
from decode_lab.schemas import PatientRecord

logger = logging.getLogger("decode_lab.corpus")

Cohort = List[PatientRecord]

PAD, BOS, EOS, SEP, MASK, UNK = 0, 1, 2, 3, 4, 5
SPECIAL_TOKENS = ["[PAD]", "[BOS]", "[EOS]", "[SEP]", "[MASK]", "[UNK]"]
AGE_TOKENS = [f"AGE_{decade}" for decade in range(10)]
SEX_TOKENS = ["SEX_M", "SEX_F", "SEX_U"]
FIRST_AGE_ID = len(SPECIAL_TOKENS)
FIRST_SEX_ID = FIRST_AGE_ID + len(AGE_TOKENS)
FIRST_CODE_ID = FIRST_SEX_ID + len(SEX_TOKENS)
PREFIX_LEN = 2
DEFAULT_MAX_SEQ_LEN = 256


class Stratum(str, Enum):
    H = "H"
    L = "L"
    ZERO = "Zero"


class Vocabulary:
    """Dense token ids: specials, then demographic tokens, then codes by frequency."""

    def __init__(self, codes: Sequence[str], min_count: int = 1):
        self.codes = list(codes)
        self.min_count = min_count
        self._tokens = SPECIAL_TOKENS + AGE_TOKENS + SEX_TOKENS + self.codes
        self._code_ids = {code: FIRST_CODE_ID + i for i, code in enumerate(self.codes)}
        if len(self._code_ids) != len(self.codes):
            raise UsageError("vocabulary codes must be unique")

    def __len__(self) -> int:
        return len(self._tokens)

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocabulary) and self.codes == other.codes

    def __contains__(self, code: str) -> bool:
        return code in self._code_ids

    def code_to_id(self, code: str) -> int:
        return self._code_ids.get(code, UNK)

    def id_to_token(self, token_id: int) -> str:
        return self._tokens[token_id]

    def decode(self, token_ids: Iterable[int]) -> List[str]:
        return [self._tokens[int(t)] for t in token_ids]

    @property
    def code_ids(self) -> np.ndarray:
        return np.arange(FIRST_CODE_ID, len(self), dtype=np.int64)

    @staticmethod
    def age_token(age_years: int) -> int:
        return FIRST_AGE_ID + min(age_years // 10, 9)

    @staticmethod
    def sex_token(sex: str) -> int:
        return FIRST_SEX_ID + {"M": 0, "F": 1}.get(sex, 2)

    def to_dict(self) -> Dict[str, Any]:
        return {"codes": self.codes, "min_count": self.min_count}

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "Vocabulary":
        return cls(data["codes"], data.get("min_count", 1))


@dataclass(frozen=True)
class TokenSequence:
    token_ids: Tuple[int, ...]
    visit_index: Tuple[int, ...]

    def __post_init__(self):
        if len(self.token_ids) != len(self.visit_index):
            raise UsageError("token_ids and visit_index differ in length")

    def __len__(self) -> int:
        return len(self.token_ids)

    def visit_segments(self) -> List[List[int]]:
        """Token ids of each visit (codes only, [SEP] stripped), oldest first."""
        segments, current = [], []
        for token in self.token_ids[PREFIX_LEN:]:
            if token == SEP:
                segments.append(current)
                current = []
            else:
                current.append(token)
        return segments


# --- File I/O ---

def load_jsonl(path: PathLike) -> Cohort:
    path = Path(path)
    if not path.is_file():
        raise UsageError(f"patient file not found: {path}")
    cohort = []
    with open(path, encoding="utf-8") as handle:
        for line_number, line in enumerate(handle, start=1):
            if not line.strip():
                continue
            try:
                raw = json.loads(line)
            except json.JSONDecodeError as e:
                raise RecordParseError(str(e), line_number) from e
            if not isinstance(raw, dict):
                raise RecordParseError("expected a JSON object", line_number)
            try:
                cohort.append(PatientRecord.model_validate(raw))
            except ValidationError as e:
                first = e.errors()[0]
                where = ".".join(str(part) for part in first["loc"])
                raise RecordValidationError(
                    f"{where}: {first['msg']}", patient_id=raw.get("patient_id"), line_number=line_number
                ) from e
    logger.info(f"Loaded {len(cohort)} patients from {path}")
    return cohort


def save_jsonl(path: PathLike, cohort: Cohort) -> Path:
    lines = [json.dumps(record.to_json_dict(), ensure_ascii=False, separators=(",", ":")) for record in cohort]
    return write_text_atomic(path, "\n".join(lines) + "\n")


# --- Vocabulary and sequences ---

def build_vocab(cohort: Cohort, min_count: int = 1) -> Vocabulary:
    if not cohort:
        raise UsageError("cannot build a vocabulary from an empty cohort")
    if min_count < 1:
        raise UsageError("min_count must be at least 1")
    counts = Counter(code for record in cohort for visit in record.visits for code in visit.codes)
    ranked = sorted(counts.items(), key=lambda item: (-item[1], item[0]))
    return Vocabulary([code for code, count in ranked if count >= min_count], min_count)


def flatten_history(
    record: PatientRecord, upto_visit: int, vocab: Vocabulary, max_seq_len: int = DEFAULT_MAX_SEQ_LEN
) -> TokenSequence:
    """[AGE, SEX, codes(v1), SEP, ..., codes(v_upto), SEP], oldest visits dropped to fit."""
    n_visits = len(record.visits)
    if not 1 <= upto_visit <= n_visits:
        raise UsageError(f"upto_visit {upto_visit} outside 1..{n_visits} for patient {record.patient_id}")

    segments = [[vocab.code_to_id(code) for code in visit.codes] + [SEP] for visit in record.visits[:upto_visit]]
    total = PREFIX_LEN + sum(len(segment) for segment in segments)
    start = 0
    while total > max_seq_len and start < len(segments) - 1:
        total -= len(segments[start])
        start += 1
    if total > max_seq_len:
        raise UsageError(f"patient {record.patient_id}: most recent visit alone exceeds max_seq_len {max_seq_len}")

    demographics = record.demographics
    tokens = [vocab.age_token(demographics.age_years), vocab.sex_token(demographics.sex)]
    visit_index = [0, 0]
    for number, segment in enumerate(segments[start:], start=1):
        tokens.extend(segment)
        visit_index.extend([number] * len(segment))
    return TokenSequence(tuple(tokens), tuple(visit_index))


def target_visit(record: PatientRecord, visit_idx: int, vocab: Vocabulary) -> List[int]:
    if not 0 <= visit_idx < len(record.visits):
        raise UsageError(f"visit_idx {visit_idx} outside 0..{len(record.visits) - 1}")
    return [vocab.code_to_id(code) for code in sorted(record.visits[visit_idx].codes)] + [EOS]


def recurrence_stratum(record: PatientRecord, visit_idx: int, code: str) -> Stratum:
    if visit_idx < 1:
        raise UsageError("recurrence strata need at least one prior visit")
    prior = record.visits[:visit_idx]
    fraction = sum(code in visit.codes for visit in prior) / len(prior)
    if fraction == 0:
        return Stratum.ZERO
    return Stratum.H if fraction > 0.5 else Stratum.L


def truncate_history(record: PatientRecord, k: int) -> PatientRecord:
    if k < 2:
        raise UsageError("truncated histories keep at least 2 visits")
    return PatientRecord(patient_id=record.patient_id, demographics=record.demographics, visits=record.visits[-k:])


# --- Cohort helpers ---

def select_tracked_codes(cohort: Cohort, n: int = 10, min_count: int = 5) -> Dict[str, List[str]]:
    """Most and least prevalent codes (by number of visits containing them)."""
    counts = Counter(code for record in cohort for visit in record.visits for code in visit.codes)
    common = [code for code, _ in sorted(counts.items(), key=lambda item: (-item[1], item[0]))[:n]]
    eligible = [(count, code) for code, count in counts.items() if count >= min_count and code not in common]
    rare = [code for _, code in sorted(eligible)[:n]]
    return {"common": common, "rare": rare}


def evaluation_pairs(cohort: Cohort, mode: str = "last") -> List[Tuple[int, int]]:
    if mode == "last":
        return [(i, len(record.visits) - 1) for i, record in enumerate(cohort)]
    if mode == "all":
        return [(i, v) for i, record in enumerate(cohort) for v in range(1, len(record.visits))]
    raise UsageError(f"unknown evaluation pair mode {mode!r}")


def split_cohort(cohort: Cohort, test_fraction: float, seed: int) -> Tuple[Cohort, Cohort]:
    if not 0.0 < test_fraction < 1.0:
        raise UsageError("test_fraction must lie strictly between 0 and 1")
    order = np.random.default_rng([seed, len(cohort)]).permutation(len(cohort))
    n_test = int(round(test_fraction * len(cohort)))
    test_idx = set(order[:n_test].tolist())
    train = [record for i, record in enumerate(cohort) if i not in test_idx]
    test = [record for i, record in enumerate(cohort) if i in test_idx]
    return train, test


def history_window(record: PatientRecord, visit_idx: int, history: str = "full", k: int = 5) -> Tuple[PatientRecord, int]:
    """Record and visit count to flatten for target `visit_idx`, keeping only the last k prior visits under "last-k"."""
    if history not in ("full", "last-k"):
        raise UsageError(f"unknown history mode {history!r}")
    if history == "full" or visit_idx <= k:
        return record, visit_idx
    return record.model_copy(update={"visits": record.visits[visit_idx - k : visit_idx + 1]}), k
