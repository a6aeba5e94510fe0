"""Next-visit generation, batch risk scoring and the two baselines."""

import csv
import io
import logging
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Set, Tuple, Union

import numpy as np
from pydantic import ValidationError
from scipy import optimize
from scipy.special import expit

from decode_lab import autodiff as ad
from decode_lab.corpus import (
    BOS,
    EOS,
    Cohort,
    TokenSequence,
    Vocabulary,
    flatten_history,
    history_window,
    truncate_history,
)
from decode_lab.errors import UsageError
from decode_lab.files import PathLike, write_text_atomic
from decode_lab.model import DecodeModel
from decode_lab.schemas import LogRegModel, PatientRecord, Prediction, TrainConfig
from decode_lab.settings import get_settings

logger = logging.getLogger("decode_lab.inference")

DEFAULT_MAX_CODES = 25
N_AGE_BUCKETS = 10
SEX_LEVELS = ("M", "F", "U")

Scorer = Union[DecodeModel, LogRegModel]


def _pool_map(fn, items: Sequence, threads: Optional[int] = None) -> list:
    workers = threads or get_settings().threads
    if workers <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def _vocab(model: DecodeModel) -> Vocabulary:
    if model.vocab is None:
        raise UsageError("model carries no vocabulary; load it from a checkpoint")
    return model.vocab


# --- Next-visit generation ---

def generate_next_visit(model: DecodeModel, history: TokenSequence, max_codes: int = DEFAULT_MAX_CODES) -> Set[str]:
    """Greedy decoding from [BOS] over code tokens and [EOS]; repeated codes collapse into one."""
    vocab = _vocab(model)
    allowed = np.concatenate([[EOS], vocab.code_ids])
    prefix = [BOS]
    emitted: Set[str] = set()
    with ad.no_grad():
        encoded = model.encode(history)
        for _ in range(max_codes):
            logits = model.decode_logits(prefix, encoded).data[-1]
            token = int(allowed[np.argmax(logits[allowed])])
            if token == EOS:
                break
            emitted.add(vocab.id_to_token(token))
            prefix.append(token)
    return emitted


def copy_predict(record: PatientRecord, visit_idx: int) -> Set[str]:
    if not 1 <= visit_idx < len(record.visits):
        raise UsageError(f"copy_predict needs 1 <= visit_idx < {len(record.visits)}, got {visit_idx}")
    return set(record.visits[visit_idx - 1].codes)


def predict_cohort(
    model: Optional[DecodeModel],
    cohort: Cohort,
    pairs: Sequence[Tuple[int, int]],
    max_codes: int = DEFAULT_MAX_CODES,
    history: str = "full",
    k: int = 5,
    threads: Optional[int] = None,
) -> List[Prediction]:
    """Predictions for (patient index, visit_idx) pairs in input order; `model=None` runs the copy baseline."""

    def predict(pair: Tuple[int, int]) -> Prediction:
        i, visit_idx = pair
        record = cohort[i]
        if model is None:
            predicted = copy_predict(record, visit_idx)
        else:
            window, upto = history_window(record, visit_idx, history, k)
            tokens = flatten_history(window, upto, _vocab(model), model.config.max_seq_len)
            predicted = generate_next_visit(model, tokens, max_codes)
        return Prediction(
            patient_id=record.patient_id,
            visit_idx=visit_idx,
            predicted=sorted(predicted),
            gold=record.visits[visit_idx].codes,
        )

    return _pool_map(predict, list(pairs), threads)


def save_predictions(path: PathLike, predictions: Sequence[Prediction]) -> Path:
    return write_text_atomic(path, "".join(p.model_dump_json() + "\n" for p in predictions))


def load_predictions(path: PathLike) -> List[Prediction]:
    path = Path(path)
    if not path.is_file():
        raise UsageError(f"predictions file not found: {path}")
    predictions = []
    for line_number, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        if line.strip():
            try:
                predictions.append(Prediction.model_validate_json(line))
            except ValidationError as e:
                raise UsageError(f"{path}, line {line_number}: {e}") from e
    return predictions


# --- Logistic-regression baseline ---

def featurize(record: PatientRecord, code_index: Dict[str, int]) -> np.ndarray:
    """Binary bag of codes over every visit, then age-decade and sex one-hots."""
    n_codes = len(code_index)
    features = np.zeros(n_codes + N_AGE_BUCKETS + len(SEX_LEVELS))
    for visit in record.visits:
        for code in visit.codes:
            if code in code_index:
                features[code_index[code]] = 1.0
    features[n_codes + min(record.demographics.age_years // 10, N_AGE_BUCKETS - 1)] = 1.0
    features[n_codes + N_AGE_BUCKETS + SEX_LEVELS.index(record.demographics.sex)] = 1.0
    return features


def logreg_train(
    cohort: Cohort,
    labels: Dict[str, int],
    l2: float = 1.0,
    train_config: Optional[TrainConfig] = None,
    max_iter: int = 1000,
) -> LogRegModel:
    """Mean log-loss plus (l2/2)·|w|² (bias unpenalised), minimised with L-BFGS-B.

    With a `train_config` its `max_steps` caps the L-BFGS-B iterations in place
    of `max_iter`; the other training fields do not apply to this solver.
    """
    if train_config is not None:
        max_iter = train_config.max_steps
    if l2 < 0:
        raise UsageError("l2 must be non-negative")
    missing = [record.patient_id for record in cohort if record.patient_id not in labels]
    if missing:
        raise UsageError(f"{len(missing)} patients have no label, e.g. {missing[0]}")
    y = np.array([labels[record.patient_id] for record in cohort], dtype=np.float64)
    if len(np.unique(y)) < 2:
        raise UsageError("logistic regression needs both classes in the training labels")
    codes = sorted({code for record in cohort for visit in record.visits for code in visit.codes})
    code_index = {code: i for i, code in enumerate(codes)}
    x = np.stack([featurize(record, code_index) for record in cohort])
    n, dim = x.shape

    def objective(theta: np.ndarray) -> Tuple[float, np.ndarray]:
        w, b = theta[:dim], theta[dim]
        z = x @ w + b
        loss = float(np.mean(np.logaddexp(0.0, z) - y * z)) + 0.5 * l2 * float(w @ w)
        residual = (expit(z) - y) / n
        return loss, np.concatenate([x.T @ residual + l2 * w, [residual.sum()]])

    result = optimize.minimize(
        objective, np.zeros(dim + 1), jac=True, method="L-BFGS-B", options={"maxiter": max_iter, "gtol": 1e-6}
    )
    logger.info(f"logistic regression: {result.nit} iterations, converged={result.success}")
    return LogRegModel(codes=codes, weights=result.x[:dim].tolist(), bias=float(result.x[dim]), l2=l2)


def logreg_score(model: LogRegModel, record: PatientRecord) -> float:
    code_index = {code: i for i, code in enumerate(model.codes)}
    z = float(featurize(record, code_index) @ np.asarray(model.weights) + model.bias)
    return float(np.clip(expit(z), np.nextafter(0.0, 1.0), np.nextafter(1.0, 0.0)))


def save_logreg(path: PathLike, model: LogRegModel) -> Path:
    return write_text_atomic(path, model.model_dump_json(indent=2))


def load_logreg(path: PathLike) -> LogRegModel:
    path = Path(path)
    if not path.is_file():
        raise UsageError(f"logistic-regression model not found: {path}")
    try:
        return LogRegModel.model_validate_json(path.read_text(encoding="utf-8"))
    except ValidationError as e:
        raise UsageError(f"invalid logistic-regression model {path}: {e}") from e


# --- Batch scoring ---

def batch_score(
    model: Scorer, cohort: Cohort, history: str = "full", k: int = 5, threads: Optional[int] = None
) -> List[Tuple[str, float]]:
    """One risk score per patient in cohort order, over the full or last-k history."""
    if history not in ("full", "last-k"):
        raise UsageError(f"unknown history mode {history!r}")

    def score(record: PatientRecord) -> Tuple[str, float]:
        if history == "last-k" and len(record.visits) > k:
            record = truncate_history(record, k)
        if isinstance(model, LogRegModel):
            return record.patient_id, logreg_score(model, record)
        tokens = flatten_history(record, len(record.visits), _vocab(model), model.config.max_seq_len)
        return record.patient_id, model.risk_score(tokens)

    return _pool_map(score, list(cohort), threads)


def save_scores(path: PathLike, scores: Sequence[Tuple[str, float]], labels: Optional[Dict[str, int]] = None) -> Path:
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(["patient_id", "score", "label"])
    for patient_id, score in scores:
        label = "" if labels is None or patient_id not in labels else labels[patient_id]
        writer.writerow([patient_id, repr(float(score)), label])
    return write_text_atomic(path, buffer.getvalue())


def load_scores(path: PathLike) -> Tuple[List[str], List[float], Optional[List[int]]]:
    path = Path(path)
    if not path.is_file():
        raise UsageError(f"scores file not found: {path}")
    ids, scores, labels = [], [], []
    with open(path, encoding="utf-8", newline="") as handle:
        reader = csv.DictReader(handle)
        if reader.fieldnames is None or not {"patient_id", "score"} <= set(reader.fieldnames):
            raise UsageError(f"{path}: expected columns patient_id,score[,label]")
        for row in reader:
            try:
                ids.append(row["patient_id"])
                scores.append(float(row["score"]))
                label = (row.get("label") or "").strip()
                labels.append(int(label) if label else None)
            except ValueError as e:
                raise UsageError(f"{path}, line {reader.line_num}: {e}") from e
    if any(label is None for label in labels):
        return ids, scores, None
    return ids, scores, labels


def attach_labels(ids: Sequence[str], label_map: Dict[str, int]) -> List[int]:
    missing = [pid for pid in ids if pid not in label_map]
    if missing:
        raise UsageError(f"{len(missing)} scored patients have no label, e.g. {missing[0]}")
    return [label_map[pid] for pid in ids]
