"""Direction-of-effect experiments repeated over seeds on generated cohorts."""

import logging
import math
from typing import Dict, List, Optional, Sequence

import numpy as np

from decode_lab import autodiff as ad
from decode_lab.corpus import build_vocab, evaluation_pairs, flatten_history, select_tracked_codes, split_cohort
from decode_lab.errors import ConfigError, UndefinedMetricError
from decode_lab.inference import batch_score, logreg_train, predict_cohort
from decode_lab.metrics import (
    auprc,
    auroc,
    daop_report,
    paired_bootstrap_test,
    paired_jaccard_test,
    prevalence_gain,
    stratum_value,
)
from decode_lab.model import DecodeModel, init_parameters
from decode_lab.noising import make_mlm_example, make_pretrain_example
from decode_lab.schemas import (
    ExperimentSummary,
    GenConfig,
    ModelConfig,
    NoiseParams,
    Scheme,
    SeedOutcome,
    TrainConfig,
)
from decode_lab.synthgen import generate_cohort, oracle_auroc
from decode_lab.training import finetune, pretrain

logger = logging.getLogger("decode_lab.experiments")


def required_wins(n_seeds: int, share: float = 0.8) -> int:
    return math.ceil(share * n_seeds - 1e-9)


def _points(value: Optional[float]) -> Optional[float]:
    return None if value is None else 100.0 * value


def daop_direction(
    gen_config: GenConfig,
    model_config: ModelConfig,
    train_config: TrainConfig,
    seeds: Sequence[int],
    test_fraction: float = 0.2,
    n_tracked: int = 10,
    n_boot: int = 200,
    min_overall_gain: float = 5.0,
    min_zero_gain: float = 10.0,
) -> ExperimentSummary:
    """Visit-masking pretrained model against the copy baseline on next-visit Jaccard (in points)."""
    summary = ExperimentSummary(
        name="daop",
        required=required_wins(len(seeds)),
        config={"gen": gen_config.model_dump(), "model": model_config.model_dump(), "train": train_config.model_dump()},
    )
    for seed in seeds:
        cohort, _ = generate_cohort(gen_config.model_copy(update={"seed": seed}))
        train, test = split_cohort(cohort, test_fraction, seed)
        vocab = build_vocab(train)
        config = train_config.model_copy(
            update={"seed": seed, "objective": "seq2seq_denoise", "noise": train_config.noise.model_copy(update={"scheme": Scheme.VISIT})}
        )
        model = pretrain(train, vocab, model_config.model_copy(update={"vocab_size": len(vocab)}), config).checkpoint.model()
        pairs = evaluation_pairs(test, "last")
        tracked = select_tracked_codes(train, n_tracked)
        model_predictions = predict_cohort(model, test, pairs)
        copy_predictions = predict_cohort(None, test, pairs)
        decoded = daop_report(model_predictions, test, tracked, n_boot=n_boot, seed=seed)
        copied = daop_report(copy_predictions, test, tracked, n_boot=n_boot, seed=seed)
        _, gain_p_value = paired_jaccard_test(copy_predictions, model_predictions, n_boot=n_boot, seed=seed)
        try:
            correlation = prevalence_gain(copied, decoded)
            gain_r, gain_r_p_value = correlation.r, correlation.p_value
        except UndefinedMetricError:
            gain_r, gain_r_p_value = None, None

        overall_gain = _points(decoded.metrics["jaccard"].value - copied.metrics["jaccard"].value)
        zero_model = stratum_value(decoded, "all", "Zero")
        zero_copy = stratum_value(copied, "all", "Zero")
        zero_gain = _points(zero_model - zero_copy) if zero_model is not None and zero_copy is not None else None
        passed = overall_gain >= min_overall_gain and zero_gain is not None and zero_gain >= min_zero_gain
        summary.seeds.append(
            SeedOutcome(
                seed=seed,
                values={
                    "model_jaccard": decoded.metrics["jaccard"].value,
                    "copy_jaccard": copied.metrics["jaccard"].value,
                    "overall_gain_points": overall_gain,
                    "zero_gain_points": zero_gain,
                    "gain_p_value": gain_p_value,
                    "prevalence_gain_r": gain_r,
                    "prevalence_gain_p_value": gain_r_p_value,
                },
                passed=passed,
            )
        )
        logger.info(f"daop seed {seed}: overall gain {overall_gain:.2f} points, zero-stratum gain {zero_gain}")
    return summary


def _safe(metric, scores, labels) -> Optional[float]:
    try:
        return metric(scores, labels)
    except UndefinedMetricError:
        return None


def pretrain_benefit(
    gen_config: GenConfig,
    model_config: ModelConfig,
    pretrain_config: TrainConfig,
    finetune_config: TrainConfig,
    seeds: Sequence[int],
    rule: Optional[str] = None,
    test_fraction: float = 1.0 / 3.0,
    l2: float = 1.0,
    min_oracle_gap: float = 5.0,
    n_boot: int = 200,
) -> ExperimentSummary:
    """Fine-tuning from a pretrained checkpoint against random init and logistic regression (AUPRC)."""
    binary_rules = [r.name for r in gen_config.planted_rules if r.kind == "binary_outcome"]
    if not binary_rules:
        raise ConfigError("pretrain-benefit needs a binary_outcome planted rule")
    rule = rule or binary_rules[0]
    if rule not in binary_rules:
        raise ConfigError(f"{rule!r} is not a binary_outcome rule of this config")
    summary = ExperimentSummary(
        name="pretrain-benefit",
        required=required_wins(len(seeds)),
        config={"gen": gen_config.model_dump(), "model": model_config.model_dump(), "rule": rule},
    )
    for seed in seeds:
        config = gen_config.model_copy(update={"seed": seed})
        cohort, label_map = generate_cohort(config)
        labels = label_map[rule]
        train, test = split_cohort(cohort, test_fraction, seed)
        vocab = build_vocab(train)
        sized = model_config.model_copy(update={"vocab_size": len(vocab)})
        base = pretrain(train, vocab, sized, pretrain_config.model_copy(update={"seed": seed})).checkpoint
        tuned = finetune_config.model_copy(update={"seed": seed, "objective": "binary_finetune"})
        from_pretrained = finetune(train, labels, vocab, sized, tuned, base=base).checkpoint.model()
        from_scratch = finetune(train, labels, vocab, sized, tuned, base=None).checkpoint.model()
        logreg = logreg_train(train, labels, l2=l2)

        y = [labels[record.patient_id] for record in test]
        values: Dict[str, Optional[float]] = {}
        scored: Dict[str, List[float]] = {}
        for name, scorer in (("pretrained", from_pretrained), ("random_init", from_scratch), ("logreg", logreg)):
            scores = scored[name] = [score for _, score in batch_score(scorer, test)]
            values[f"{name}_auprc"] = _safe(auprc, scores, y)
            values[f"{name}_auroc"] = _safe(auroc, scores, y)
        for baseline in ("random_init", "logreg"):
            try:
                _, p_value = paired_bootstrap_test(auprc, scored[baseline], scored["pretrained"], y, n_boot=n_boot, seed=seed)
            except UndefinedMetricError:
                p_value = None
            values[f"pretrained_vs_{baseline}_p_value"] = p_value
        try:
            values["oracle_auroc"] = oracle_auroc(config, test, labels, rule)
        except UndefinedMetricError:
            values["oracle_auroc"] = None
        if values["oracle_auroc"] is not None and values["logreg_auroc"] is not None:
            values["logreg_oracle_gap_points"] = _points(values["oracle_auroc"] - values["logreg_auroc"])
        else:
            values["logreg_oracle_gap_points"] = None

        pre, rand, lr = values["pretrained_auprc"], values["random_init_auprc"], values["logreg_auprc"]
        gap = values["logreg_oracle_gap_points"]
        passed = (
            None not in (pre, rand, lr, gap)
            and pre > rand
            and pre > lr
            and rand > lr
            and gap >= min_oracle_gap
        )
        summary.seeds.append(SeedOutcome(seed=seed, values=values, passed=passed))
        logger.info(f"pretrain-benefit seed {seed}: AUPRC pretrained {pre} random {rand} logreg {lr}")
    return summary


def gradient_check(
    n_layers: int = 2,
    n_heads: int = 4,
    d_model: int = 64,
    batch: int = 4,
    seed: int = 0,
    objective: str = "seq2seq_denoise",
    coords_per_tensor: int = 64,
) -> float:
    """Finite-difference check of a full model loss on a small generated batch (dropout off)."""
    gen = GenConfig(
        n_patients=batch,
        mean_visits=4.0,
        sd_visits=1.0,
        max_visits=6,
        mean_codes_per_visit=3.0,
        sd_codes=1.0,
        max_codes=6,
        n_common_codes=30,
        n_rare_codes=10,
        seed=seed,
    )
    cohort, _ = generate_cohort(gen)
    vocab = build_vocab(cohort)
    config = ModelConfig(
        vocab_size=len(vocab),
        d_model=d_model,
        n_heads=n_heads,
        n_encoder_layers=n_layers,
        n_decoder_layers=n_layers,
        d_ff=2 * d_model,
        max_seq_len=64,
        dropout_prob=0.0,
    )
    model = DecodeModel(config, init_parameters(config, seed), vocab)
    noise = NoiseParams(scheme=Scheme.VISIT, visit_rate=0.3)
    losses = []
    for j, record in enumerate(cohort):
        rng = np.random.default_rng([seed, j])
        visit_idx = len(record.visits) - 1
        if objective == "seq2seq_denoise":
            example = make_pretrain_example(record, visit_idx, Scheme.VISIT, noise, vocab, rng, config.max_seq_len)
            losses.append(lambda example=example: model.seq2seq_loss(example))
        elif objective == "encoder_mlm":
            masked = make_mlm_example(record, visit_idx, 0.3, vocab, rng, max_seq_len=config.max_seq_len)
            losses.append(lambda m=masked: model.encoder_only_mlm_loss(m.corrupted, m.positions, m.original_ids))
        elif objective == "binary_finetune":
            history = flatten_history(record, len(record.visits), vocab, config.max_seq_len)
            losses.append(lambda history=history, label=j % 2: model.binary_loss(history, label))
        else:
            raise ConfigError(f"unknown objective {objective!r}")

    def batch_loss() -> ad.Tensor:
        total = losses[0]()
        for loss in losses[1:]:
            total = ad.add(total, loss())
        return ad.scale(total, 1.0 / len(losses))

    return ad.finite_diff_check(batch_loss, model.params, coords_per_tensor=coords_per_tensor)
