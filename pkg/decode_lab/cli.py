"""Command-line interface: one subcommand per pipeline stage.

Exit codes: 0 ok, 2 usage, 3 undefined metric, 4 invariant breach.
"""

import argparse
import json
import logging
import sys
import time
from pathlib import Path
from typing import Any, Dict, List, Optional, Type, TypeVar

import numpy as np
from pydantic import BaseModel, ValidationError

from decode_lab import __version__
from decode_lab.attention_export import AttentionExporter
from decode_lab.checkpoint import load_checkpoint, save_checkpoint
from decode_lab.corpus import BOS, build_vocab, evaluation_pairs, flatten_history, load_jsonl, save_jsonl, select_tracked_codes
from decode_lab.errors import ConfigError, DecodeLabError, InvariantError, UsageError
from decode_lab.experiments import daop_direction, gradient_check, pretrain_benefit
from decode_lab.files import sha256_file, write_text_atomic
from decode_lab.inference import (
    attach_labels,
    batch_score,
    load_logreg,
    load_scores,
    logreg_train,
    predict_cohort,
    save_logreg,
    save_predictions,
    save_scores,
)
from decode_lab.metrics import daop_report, task_report, write_report
from decode_lab.noising import scheme_names
from decode_lab.schemas import GenConfig, ModelConfig, RunManifest, Scheme, TrainConfig
from decode_lab.settings import get_settings
from decode_lab.synthgen import default_gen_config, generate_cohort, load_gen_config, load_labels, save_labels, summarize_cohort
from decode_lab.training import finetune, pretrain

logger = logging.getLogger("decode_lab.cli")

GRADCHECK_TOLERANCE = 1e-6

M = TypeVar("M", bound=BaseModel)


# --- Run bookkeeping ---

class Run:
    """Collects inputs and outputs of one subcommand and writes its manifest.json."""

    def __init__(self, args: argparse.Namespace):
        self.args = args
        self.out = Path(args.out)
        self.started = time.perf_counter()
        self.config: Dict[str, Any] = {}
        self.inputs: Dict[str, str] = {}
        self.outputs: Dict[str, str] = {}

    def input(self, path: Optional[str]):
        if path and Path(path).is_file():
            self.inputs[str(path)] = sha256_file(path)

    def output(self, path: Path) -> Path:
        self.outputs[str(path)] = sha256_file(path)
        return path

    def write_manifest(self) -> Path:
        manifest = RunManifest(
            subcommand=self.args.command,
            config=self.config,
            seed=getattr(self.args, "seed", None),
            inputs=self.inputs,
            outputs=self.outputs,
            duration_seconds=time.perf_counter() - self.started,
        )
        return write_text_atomic(self.out / "manifest.json", manifest.model_dump_json(indent=2))


def _load_model(cls: Type[M], path: Optional[str], overrides: Optional[Dict[str, Any]] = None) -> M:
    data: Dict[str, Any] = {}
    if path:
        if not Path(path).is_file():
            raise UsageError(f"config file not found: {path}")
        try:
            data = json.loads(Path(path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: {e}") from e
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: expected a JSON object, got {type(data).__name__}")
    data.update({key: value for key, value in (overrides or {}).items() if value is not None})
    try:
        return cls.model_validate(data)
    except ValidationError as e:
        raise ConfigError(f"invalid {cls.__name__}: {e}") from e


def _train_config(args: argparse.Namespace, objective: str) -> TrainConfig:
    config = _load_model(
        TrainConfig,
        args.config,
        {"seed": args.seed, "max_steps": args.steps, "history": args.history, "k": args.k, "objective": objective},
    )
    noise = {"scheme": getattr(args, "scheme", None), "mask_rate": getattr(args, "mask_rate", None),
             "mean_span": getattr(args, "mean_span", None), "visit_rate": getattr(args, "visit_rate", None)}
    noise = {key: value for key, value in noise.items() if value is not None}
    if noise:
        try:
            config = TrainConfig.model_validate({**config.model_dump(), "noise": {**config.noise.model_dump(), **noise}})
        except ValidationError as e:
            raise ConfigError(f"invalid noise settings: {e}") from e
    return config


def _rule_labels(path: str, rule: Optional[str]) -> Dict[str, int]:
    label_map = load_labels(path)
    if rule is None:
        if len(label_map) != 1:
            raise UsageError(f"{path} holds labels for rules {sorted(label_map)}; choose one with --rule")
        rule = next(iter(label_map))
    if rule not in label_map:
        raise UsageError(f"no labels for rule {rule!r} in {path}")
    return label_map[rule]


def _write_trace(run: Run, trace) -> None:
    run.output(write_text_atomic(run.out / "trace.csv", trace.to_csv()))
    if trace.validation:
        run.output(write_text_atomic(run.out / "validation_trace.csv", trace.to_csv(validation=True)))


def _tracked_codes(args: argparse.Namespace, cohort) -> Dict[str, List[str]]:
    if args.codes:
        run_codes = _load_json(args.codes)
        if not isinstance(run_codes, dict) or not {"common", "rare"} <= set(run_codes):
            raise UsageError(f"{args.codes} must hold {{\"common\": [...], \"rare\": [...]}}")
        return {"common": list(run_codes["common"]), "rare": list(run_codes["rare"])}
    return select_tracked_codes(cohort, args.n_tracked)


def _load_json(path: str) -> Any:
    if not Path(path).is_file():
        raise UsageError(f"file not found: {path}")
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise UsageError(f"{path}: {e}") from e


# --- Subcommands ---

def cmd_gen_data(args, run: Run) -> int:
    config = load_gen_config(args.config) if args.config else default_gen_config()
    overrides = {key: value for key, value in {"seed": args.seed, "n_patients": args.n_patients}.items() if value is not None}
    if overrides:
        config = _load_model(GenConfig, None, {**config.model_dump(), **overrides})
    run.input(args.config)
    run.config = config.model_dump()
    cohort, label_map = generate_cohort(config)
    summary = summarize_cohort(config, cohort, label_map)
    run.output(save_jsonl(run.out / "cohort.jsonl", cohort))
    run.output(save_labels(run.out / "labels.jsonl", label_map))
    run.output(write_text_atomic(run.out / "summary.json", summary.model_dump_json(indent=2)))
    print(f"[gen-data] {summary.n_patients} patients, {summary.mean_visits:.2f} visits/patient, "
          f"{summary.mean_codes_per_visit:.2f} codes/visit")
    for rule, prevalence in summary.label_prevalence.items():
        print(f"[gen-data] {rule}: prevalence {prevalence:.4f}, oracle AUROC {summary.oracle_auroc.get(rule)}")
    return 0


def cmd_pretrain(args, run: Run) -> int:
    cohort = load_jsonl(args.data)
    run.input(args.data)
    run.input(args.config)
    run.input(args.model_config)
    base = None
    if args.init:
        base = load_checkpoint(args.init)
        run.input(args.init)
    vocab = base.vocab if base is not None and base.vocab is not None else build_vocab(cohort, args.min_count)
    model_config = base.config if base is not None else _load_model(ModelConfig, args.model_config, {"vocab_size": len(vocab)})
    train_config = _train_config(args, args.objective)
    validation = load_jsonl(args.validation) if args.validation else None
    run.input(args.validation)
    run.config = {"model": model_config.model_dump(), "train": train_config.model_dump(mode="json")}
    result = pretrain(cohort, vocab, model_config, train_config, base=base, validation=validation)
    run.output(save_checkpoint(run.out / "checkpoint.bin", result.checkpoint.params, model_config, vocab, result.checkpoint.meta))
    _write_trace(run, result.trace)
    print(f"[pretrain] final loss {result.trace.entries[-1].loss:.4f} after {train_config.max_steps} steps")
    return 0


def cmd_finetune(args, run: Run) -> int:
    cohort = load_jsonl(args.data)
    labels = _rule_labels(args.labels, args.rule)
    run.input(args.data)
    run.input(args.labels)
    run.input(args.config)
    run.input(args.model_config)
    base = None
    if args.checkpoint:
        base = load_checkpoint(args.checkpoint)
        run.input(args.checkpoint)
    vocab = base.vocab if base is not None and base.vocab is not None else build_vocab(cohort, args.min_count)
    model_config = base.config if base is not None else _load_model(ModelConfig, args.model_config, {"vocab_size": len(vocab)})
    train_config = _train_config(args, "binary_finetune")
    validation = validation_labels = None
    if args.validation:
        validation = load_jsonl(args.validation)
        validation_labels = _rule_labels(args.validation_labels or args.labels, args.rule)
        run.input(args.validation)
    run.config = {"model": model_config.model_dump(), "train": train_config.model_dump(mode="json"), "rule": args.rule}
    result = finetune(cohort, labels, vocab, model_config, train_config, base, validation, validation_labels)
    run.output(save_checkpoint(run.out / "checkpoint.bin", result.checkpoint.params, model_config, vocab, result.checkpoint.meta))
    _write_trace(run, result.trace)
    print(f"[finetune] final loss {result.trace.entries[-1].loss:.4f} ({'pretrained' if base else 'random init'})")
    return 0


def _daop(args, run: Run, model) -> int:
    cohort = load_jsonl(args.data)
    run.input(args.data)
    pairs = evaluation_pairs(cohort, args.pairs)
    tracked = _tracked_codes(args, cohort)
    run.input(args.codes)
    predictions = predict_cohort(model, cohort, pairs, args.max_codes, args.history, args.k)
    report = daop_report(predictions, cohort, tracked, task="daop" if model else "daop-copy", n_boot=args.n_boot, seed=args.seed or 0)
    run.config = {"pairs": args.pairs, "tracked": tracked, "history": args.history, "k": args.k, "n_boot": args.n_boot}
    run.output(save_predictions(run.out / "predictions.jsonl", predictions))
    for path in write_report(report, run.out).values():
        run.output(path)
    jaccard = report.metrics["jaccard"]
    print(f"[{args.command}] jaccard {jaccard.value:.4f} (95% CI {jaccard.ci_low:.4f}, {jaccard.ci_high:.4f})")
    return 0


def cmd_evaluate_daop(args, run: Run) -> int:
    checkpoint = load_checkpoint(args.checkpoint)
    run.input(args.checkpoint)
    return _daop(args, run, checkpoint.model())


def _task(args, run: Run, ids, scores, labels) -> int:
    report = task_report(scores, labels, task=args.task, threshold=args.threshold, n_boot=args.n_boot, seed=args.seed or 0, groups=ids)
    run.config = {"threshold": args.threshold, "n_boot": args.n_boot}
    for path in write_report(report, run.out).values():
        run.output(path)
    for name in ("auroc", "auprc"):
        metric = report.metrics[name]
        print(f"[{args.command}] {name} {metric.value:.4f} (95% CI {metric.ci_low:.4f}, {metric.ci_high:.4f})")
    return 0


def cmd_evaluate_task(args, run: Run) -> int:
    ids, scores, labels = load_scores(args.scores)
    run.input(args.scores)
    if args.labels:
        labels = attach_labels(ids, _rule_labels(args.labels, args.rule))
        run.input(args.labels)
    if labels is None:
        raise UsageError("scores file has no label column; pass --labels")
    return _task(args, run, ids, scores, labels)


def cmd_baseline(args, run: Run) -> int:
    if args.method == "copy":
        return _daop(args, run, None)
    train = load_jsonl(args.data)
    labels = _rule_labels(args.labels, args.rule)
    run.input(args.data)
    run.input(args.labels)
    model = logreg_train(train, labels, l2=args.l2)
    run.output(save_logreg(run.out / "logreg.json", model))
    test = load_jsonl(args.test) if args.test else train
    run.input(args.test)
    scored = batch_score(model, test, args.history, args.k)
    run.output(save_scores(run.out / "scores.csv", scored, labels))
    ids = [pid for pid, _ in scored]
    return _task(args, run, ids, [score for _, score in scored], attach_labels(ids, labels))


def cmd_gradcheck(args, run: Run) -> int:
    run.config = {"layers": args.layers, "heads": args.heads, "d_model": args.d_model, "batch": args.batch, "objective": args.objective}
    error = gradient_check(args.layers, args.heads, args.d_model, args.batch, args.seed or 0, args.objective, args.coords)
    run.output(write_text_atomic(run.out / "gradcheck.json", json.dumps({"max_relative_error": error, **run.config})))
    print(f"[gradcheck] max relative error: {error:.3e}")
    if not error < GRADCHECK_TOLERANCE:
        raise InvariantError(f"gradient check failed: {error:.3e} >= {GRADCHECK_TOLERANCE:g}")
    return 0


def cmd_attention_export(args, run: Run) -> int:
    checkpoint = load_checkpoint(args.checkpoint)
    cohort = load_jsonl(args.data)
    run.input(args.checkpoint)
    run.input(args.data)
    matches = [record for record in cohort if record.patient_id == args.patient]
    if not matches:
        raise UsageError(f"patient {args.patient!r} not found in {args.data}")
    record = matches[0]
    if checkpoint.vocab is None:
        raise UsageError(f"{args.checkpoint} carries no vocabulary")
    model = checkpoint.model()
    visit_idx = args.visit_idx if args.visit_idx is not None else len(record.visits) - 1
    if not 1 <= visit_idx < len(record.visits):
        raise UsageError(f"--visit-idx must lie in 1..{len(record.visits) - 1}")
    history = flatten_history(record, visit_idx, model.vocab, checkpoint.config.max_seq_len)
    target = [model.vocab.code_to_id(code) for code in sorted(record.visits[visit_idx].codes)]
    records = model.capture_attention(history, [BOS] + target)
    run.config = {"patient": args.patient, "visit_idx": visit_idx}
    run.output(write_text_atomic(run.out / "attention.json", AttentionExporter.to_json(records)))
    if args.mermaid:
        # last decoder layer, cross attention, first head
        cross = [record for record in records if record.side == "cross"][-checkpoint.config.n_heads]
        run.output(write_text_atomic(run.out / "attention.mmd", AttentionExporter.generate_mermaid(cross, args.top)))
    print(f"[attention-export] {len(records)} attention records for {args.patient}")
    return 0


def cmd_score(args, run: Run) -> int:
    if bool(args.checkpoint) == bool(args.logreg):
        raise UsageError("pass exactly one of --checkpoint or --logreg")
    if args.checkpoint:
        model = load_checkpoint(args.checkpoint).model()
    else:
        model = load_logreg(args.logreg)
    run.input(args.checkpoint or args.logreg)
    cohort = load_jsonl(args.data)
    run.input(args.data)
    labels = _rule_labels(args.labels, args.rule) if args.labels else None
    run.config = {"history": args.history, "k": args.k}
    run.output(save_scores(run.out / "scores.csv", batch_score(model, cohort, args.history, args.k), labels))
    print(f"[score] scored {len(cohort)} patients")
    return 0


def cmd_predict(args, run: Run) -> int:
    model = load_checkpoint(args.checkpoint).model()
    cohort = load_jsonl(args.data)
    run.input(args.checkpoint)
    run.input(args.data)
    predictions = predict_cohort(model, cohort, evaluation_pairs(cohort, args.pairs), args.max_codes, args.history, args.k)
    run.config = {"pairs": args.pairs, "max_codes": args.max_codes}
    run.output(save_predictions(run.out / "predictions.jsonl", predictions))
    print(f"[predict] wrote {len(predictions)} predictions")
    return 0


def cmd_experiment(args, run: Run) -> int:
    gen = load_gen_config(args.gen_config) if args.gen_config else default_gen_config()
    if args.n_patients:
        gen = gen.model_copy(update={"n_patients": args.n_patients})
    run.input(args.gen_config)
    model_config = _load_model(ModelConfig, args.model_config, {"vocab_size": 1})
    pretrain_config = _train_config(args, "seq2seq_denoise")
    seeds = list(range(args.first_seed, args.first_seed + args.seeds))
    if args.name == "daop":
        summary = daop_direction(gen, model_config, pretrain_config, seeds, n_boot=args.n_boot)
    else:
        finetune_config = _load_model(TrainConfig, args.finetune_config, {"objective": "binary_finetune", "max_steps": args.finetune_steps})
        summary = pretrain_benefit(gen, model_config, pretrain_config, finetune_config, seeds, rule=args.rule, n_boot=args.n_boot)
    run.config = summary.config
    run.output(write_text_atomic(run.out / "experiment.json", summary.model_dump_json(indent=2)))
    for outcome in summary.seeds:
        p_values = ", ".join(f"{key} {value:.3g}" for key, value in outcome.values.items() if key.endswith("p_value") and value is not None)
        print(f"[experiment] seed {outcome.seed}: {'passed' if outcome.passed else 'failed'} ({p_values or 'no p-values'})")
    print(f"[experiment] {args.name}: {summary.n_passed}/{len(seeds)} seeds passed (need {summary.required})")
    return 0


def cmd_serve(args, run: Run) -> int:
    import uvicorn

    try:
        import server
    except ImportError as e:
        raise UsageError("serve must run from the repository root (server.py not importable)") from e
    if args.checkpoint:
        server.state.load(args.checkpoint)
    run.input(args.checkpoint)
    run.write_manifest()
    uvicorn.run(server.app, host=args.host, port=args.port)
    return 0


COMMANDS = {
    "gen-data": cmd_gen_data,
    "pretrain": cmd_pretrain,
    "finetune": cmd_finetune,
    "evaluate-daop": cmd_evaluate_daop,
    "evaluate-task": cmd_evaluate_task,
    "baseline": cmd_baseline,
    "gradcheck": cmd_gradcheck,
    "attention-export": cmd_attention_export,
    "score": cmd_score,
    "predict": cmd_predict,
    "experiment": cmd_experiment,
    "serve": cmd_serve,
}


# --- Parser ---

def _training_flags(parser: argparse.ArgumentParser):
    parser.add_argument("--config", help="TrainConfig JSON")
    parser.add_argument("--model-config", help="ModelConfig JSON (vocab_size is filled in)")
    parser.add_argument("--steps", type=int, help="Override max_steps")
    parser.add_argument("--history", choices=["full", "last-k"])
    parser.add_argument("--k", type=int)
    parser.add_argument("--min-count", type=int, default=1, help="Vocabulary frequency floor")


def _noise_flags(parser: argparse.ArgumentParser):
    parser.add_argument("--scheme", choices=scheme_names())
    parser.add_argument("--mask-rate", type=float)
    parser.add_argument("--mean-span", type=float)
    parser.add_argument("--visit-rate", type=float)


def _daop_flags(parser: argparse.ArgumentParser):
    parser.add_argument("--data", required=True, help="Cohort JSONL")
    parser.add_argument("--pairs", choices=["last", "all"], default="last")
    parser.add_argument("--codes", help="JSON with tracked 'common' and 'rare' code lists")
    parser.add_argument("--n-tracked", type=int, default=10)
    parser.add_argument("--max-codes", type=int, default=25)
    parser.add_argument("--history", choices=["full", "last-k"], default="full")
    parser.add_argument("--k", type=int, default=5)
    parser.add_argument("--n-boot", type=int, default=1000)


def _task_flags(parser: argparse.ArgumentParser, n_boot: bool = True):
    parser.add_argument("--task", default="binary")
    parser.add_argument("--threshold", type=float, default=0.5)
    if n_boot:
        parser.add_argument("--n-boot", type=int, default=1000)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="decode-lab", description="Visit-history denoising pretraining lab")
    parser.add_argument("--version", action="version", version=f"decode_lab {__version__}")
    parser.add_argument("--log-level", help="Overrides DECODE_LAB_LOG_LEVEL")
    sub = parser.add_subparsers(dest="command", required=True)

    def command(name: str, help_text: str) -> argparse.ArgumentParser:
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--out", default=f"runs/{name}", help="Output directory")
        p.add_argument("--seed", type=int)
        return p

    p = command("gen-data", "Generate a synthetic cohort with planted rules")
    p.add_argument("--config", help="GenConfig JSON (default: built-in config)")
    p.add_argument("--n-patients", type=int)

    p = command("pretrain", "Pretrain on next-visit denoising or masked codes")
    p.add_argument("--data", required=True)
    p.add_argument("--objective", choices=["seq2seq_denoise", "encoder_mlm"], default="seq2seq_denoise")
    p.add_argument("--init", help="Checkpoint to continue from")
    p.add_argument("--validation", help="Held-out cohort JSONL")
    _training_flags(p)
    _noise_flags(p)

    p = command("finetune", "Fine-tune the risk head on binary labels")
    p.add_argument("--data", required=True)
    p.add_argument("--labels", required=True)
    p.add_argument("--rule")
    p.add_argument("--checkpoint", help="Pretrained base (random init when omitted)")
    p.add_argument("--validation")
    p.add_argument("--validation-labels")
    _training_flags(p)

    p = command("evaluate-daop", "Next-visit Jaccard report for a checkpoint")
    p.add_argument("--checkpoint", required=True)
    _daop_flags(p)

    p = command("evaluate-task", "Binary-task report from a scores CSV")
    p.add_argument("--scores", required=True)
    p.add_argument("--labels")
    p.add_argument("--rule")
    _task_flags(p)

    p = command("baseline", "Copy-forward or logistic-regression baseline")
    p.add_argument("method", choices=["copy", "logreg"])
    p.add_argument("--labels")
    p.add_argument("--rule")
    p.add_argument("--test", help="Cohort to score (logreg; defaults to --data)")
    p.add_argument("--l2", type=float, default=1.0)
    _daop_flags(p)
    _task_flags(p, n_boot=False)

    p = command("gradcheck", "Finite-difference check of the full model loss")
    p.add_argument("--layers", type=int, default=2)
    p.add_argument("--heads", type=int, default=4)
    p.add_argument("--d-model", type=int, default=64)
    p.add_argument("--batch", type=int, default=4)
    p.add_argument("--coords", type=int, default=64)
    p.add_argument("--objective", choices=["seq2seq_denoise", "encoder_mlm", "binary_finetune"], default="seq2seq_denoise")

    p = command("attention-export", "Dump every attention map for one patient")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--patient", required=True)
    p.add_argument("--visit-idx", type=int)
    p.add_argument("--mermaid", action="store_true", help="Also write the strongest cross-attention links as a Mermaid graph")
    p.add_argument("--top", type=int, default=5)

    p = command("score", "Batch risk scores to CSV")
    p.add_argument("--checkpoint")
    p.add_argument("--logreg")
    p.add_argument("--data", required=True)
    p.add_argument("--labels")
    p.add_argument("--rule")
    p.add_argument("--history", choices=["full", "last-k"], default="full")
    p.add_argument("--k", type=int, default=5)

    p = command("predict", "Next-visit predictions JSONL")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--pairs", choices=["last", "all"], default="last")
    p.add_argument("--max-codes", type=int, default=25)
    p.add_argument("--history", choices=["full", "last-k"], default="full")
    p.add_argument("--k", type=int, default=5)

    p = command("experiment", "Direction-of-effect runs over several seeds")
    p.add_argument("name", choices=["daop", "pretrain-benefit"])
    p.add_argument("--gen-config")
    p.add_argument("--n-patients", type=int)
    p.add_argument("--seeds", type=int, default=5)
    p.add_argument("--first-seed", type=int, default=0)
    p.add_argument("--finetune-config")
    p.add_argument("--finetune-steps", type=int)
    p.add_argument("--rule")
    p.add_argument("--n-boot", type=int, default=200, help="Resamples for the paired significance tests")
    _training_flags(p)
    _noise_flags(p)

    p = command("serve", "Serve risk scores and next-visit predictions over HTTP")
    p.add_argument("--checkpoint")
    p.add_argument("--host", default="0.0.0.0")
    p.add_argument("--port", type=int, default=8000)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    settings = get_settings()
    logging.basicConfig(level=(args.log_level or settings.log_level).upper(), format="%(asctime)s %(name)s %(levelname)s %(message)s")
    np.seterr(over="ignore", under="ignore")
    run = Run(args)
    try:
        code = COMMANDS[args.command](args, run)
        if args.command != "serve":
            run.write_manifest()
        return code
    except DecodeLabError as e:
        print(f"[error] {e}", file=sys.stderr)
        logger.debug("command failed", exc_info=True)
        if args.command != "serve":
            run.config.setdefault("error", str(e))
            run.write_manifest()
        return e.exit_code
