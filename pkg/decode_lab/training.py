"""Pretraining and fine-tuning loops.

Every step draws `batch_size` items with the sampler seeded by
`TrainConfig.seed`; example j of step s uses its own generator seeded by
(seed, s, j), so a run is fully determined by its inputs and configs.
"""

import logging
import time
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np

from decode_lab import autodiff as ad
from decode_lab.checkpoint import Checkpoint
from decode_lab.corpus import Cohort, Vocabulary, flatten_history, history_window, truncate_history
from decode_lab.errors import ConfigError, UsageError
from decode_lab.model import DecodeModel, Parameters, init_parameters
from decode_lab.noising import make_mlm_example, make_pretrain_example
from decode_lab.schemas import LossTrace, ModelConfig, PatientRecord, Scheme, TraceEntry, TrainConfig

logger = logging.getLogger("decode_lab.training")

# validation sets are capped so periodic evaluation stays cheap
MAX_VALIDATION_ITEMS = 128


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    trace: LossTrace


def learning_rate(step: int, config: TrainConfig) -> float:
    """Linear warmup over `warmup_steps`, constant afterwards (steps count from 1)."""
    if config.warmup_steps <= 0:
        return config.lr
    return config.lr * min(1.0, step / config.warmup_steps)


def eligible_pairs(cohort: Cohort) -> List[Tuple[int, int]]:
    return [(i, v) for i, record in enumerate(cohort) for v in range(1, len(record.visits))]


def full_history(record: PatientRecord, vocab: Vocabulary, config: TrainConfig, max_seq_len: int):
    if config.history == "last-k" and len(record.visits) > config.k:
        record = truncate_history(record, config.k)
    return flatten_history(record, len(record.visits), vocab, max_seq_len)


def copy_parameters(params: Parameters) -> Parameters:
    return {name: ad.Tensor(t.data.copy(), requires_grad=True, name=name) for name, t in params.items()}


def _starting_model(
    model_config: ModelConfig, vocab: Vocabulary, seed: int, base: Optional[Checkpoint]
) -> DecodeModel:
    if model_config.vocab_size != len(vocab):
        raise ConfigError(f"model vocab_size {model_config.vocab_size} differs from vocabulary size {len(vocab)}")
    if base is None:
        return DecodeModel(model_config, init_parameters(model_config, seed), vocab)
    if base.config != model_config:
        raise ConfigError("base checkpoint was trained with a different model config")
    if base.vocab is not None and base.vocab != vocab:
        raise ConfigError("base checkpoint was trained with a different vocabulary")
    return DecodeModel(model_config, copy_parameters(base.params), vocab)


def _train(
    model: DecodeModel,
    config: TrainConfig,
    n_items: int,
    example_loss: Callable[[int, np.random.Generator], ad.Tensor],
    validate: Optional[Callable[[], float]],
) -> LossTrace:
    params = model.parameters()
    state = ad.AdamState.for_params(params, config.lr)
    sampler = np.random.default_rng(config.seed)
    trace = LossTrace()
    for step in range(1, config.max_steps + 1):
        started = time.perf_counter()
        picks = sampler.integers(0, n_items, size=config.batch_size)
        ad.zero_grad(params)
        batch_loss = 0.0
        for j, item in enumerate(picks):
            rng = np.random.default_rng([config.seed, step, j])
            loss = ad.scale(example_loss(int(item), rng), 1.0 / config.batch_size)
            ad.backward(loss)
            batch_loss += loss.item()
        norm = ad.clip_grad_norm(params, config.clip_norm)
        grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in params]
        lr = learning_rate(step, config)
        ad.adam_step(params, grads, state, lr)
        trace.entries.append(
            TraceEntry(step=step, loss=batch_loss, objective=config.objective, seconds=time.perf_counter() - started)
        )
        if step % config.eval_every == 0 or step == config.max_steps:
            logger.info(f"step {step}: loss {batch_loss:.4f} lr {lr:.2e} grad_norm {norm:.3f}")
            if validate is not None:
                value = validate()
                trace.validation.append(TraceEntry(step=step, loss=value, objective=config.objective))
                logger.info(f"step {step}: validation loss {value:.4f}")
    return trace


def pretrain(
    cohort: Cohort,
    vocab: Vocabulary,
    model_config: ModelConfig,
    train_config: TrainConfig,
    base: Optional[Checkpoint] = None,
    validation: Optional[Cohort] = None,
) -> TrainResult:
    objective = train_config.objective
    if objective not in ("seq2seq_denoise", "encoder_mlm"):
        raise ConfigError(f"pretrain does not support objective {objective!r}")
    if not cohort:
        raise UsageError("cannot pretrain on an empty cohort")
    pairs = eligible_pairs(cohort)
    if not pairs:
        raise UsageError("cohort has no (patient, visit) pair with a prior visit")
    model = _starting_model(model_config, vocab, train_config.seed, base)
    noise = train_config.noise
    max_len = model_config.max_seq_len

    def loss_for(record: PatientRecord, visit_idx: int, rng, train: bool, scheme: Scheme) -> ad.Tensor:
        record, visit_idx = history_window(record, visit_idx, train_config.history, train_config.k)
        if objective == "seq2seq_denoise":
            example = make_pretrain_example(record, visit_idx, scheme, noise, vocab, rng, max_len)
            return model.seq2seq_loss(example, train, rng)
        example = make_mlm_example(record, visit_idx, noise.mask_rate, vocab, rng, noise.random_replace, max_len)
        return model.encoder_only_mlm_loss(example.corrupted, example.positions, example.original_ids, train, rng)

    def example_loss(item: int, rng) -> ad.Tensor:
        i, v = pairs[item]
        return loss_for(cohort[i], v, rng, True, Scheme(noise.scheme))

    validate = None
    if validation:
        held_out = [(record, len(record.visits) - 1) for record in validation][:MAX_VALIDATION_ITEMS]

        def validate() -> float:
            losses = []
            with ad.no_grad():
                for j, (record, v) in enumerate(held_out):
                    rng = np.random.default_rng([train_config.seed, 0, j])
                    losses.append(loss_for(record, v, rng, False, Scheme.NONE).item())
            return float(np.mean(losses))

    logger.info(f"Pretraining ({objective}, scheme {Scheme(noise.scheme).value}) on {len(pairs)} pairs")
    trace = _train(model, train_config, len(pairs), example_loss, validate)
    meta = {"objective": objective, "steps": train_config.max_steps, "scheme": Scheme(noise.scheme).value}
    return TrainResult(Checkpoint(model.params, model_config, vocab, meta), trace)


def finetune(
    cohort: Cohort,
    labels: Dict[str, int],
    vocab: Vocabulary,
    model_config: ModelConfig,
    train_config: TrainConfig,
    base: Optional[Checkpoint] = None,
    validation: Optional[Cohort] = None,
    validation_labels: Optional[Dict[str, int]] = None,
) -> TrainResult:
    """Binary cross-entropy on the risk head over full histories; no class rebalancing."""
    if train_config.objective != "binary_finetune":
        raise ConfigError(f"finetune needs objective 'binary_finetune', got {train_config.objective!r}")
    if not cohort:
        raise UsageError("cannot fine-tune on an empty cohort")
    missing = [record.patient_id for record in cohort if record.patient_id not in labels]
    if missing:
        raise UsageError(f"{len(missing)} patients have no label, e.g. {missing[0]}")
    y = [int(labels[record.patient_id]) for record in cohort]
    if len(set(y)) < 2:
        raise UsageError(f"fine-tuning labels are all {y[0]}; both classes are required")
    model = _starting_model(model_config, vocab, train_config.seed, base)
    max_len = model_config.max_seq_len
    histories = [full_history(record, vocab, train_config, max_len) for record in cohort]

    def example_loss(item: int, rng) -> ad.Tensor:
        return model.binary_loss(histories[item], y[item], True, rng)

    validate = None
    if validation:
        if validation_labels is None:
            raise UsageError("validation cohort given without validation labels")
        held_out = [
            (full_history(record, vocab, train_config, max_len), int(validation_labels[record.patient_id]))
            for record in validation[:MAX_VALIDATION_ITEMS]
        ]

        def validate() -> float:
            with ad.no_grad():
                return float(np.mean([model.binary_loss(history, label).item() for history, label in held_out]))

    logger.info(f"Fine-tuning on {len(cohort)} patients (prevalence {np.mean(y):.3f})")
    trace = _train(model, train_config, len(cohort), example_loss, validate)
    meta = {"objective": "binary_finetune", "steps": train_config.max_steps, "pretrained": base is not None}
    return TrainResult(Checkpoint(model.params, model_config, vocab, meta), trace)
