import json

import pytest

from conftest import small_gen_config
from decode_lab.cli import main


def read_json(path):
    return json.loads(path.read_text())


def output_digests(out_dir):
    """Output sha256 by file name, so runs written to different directories compare."""
    manifest = read_json(out_dir / "manifest.json")
    return {name.replace(str(out_dir), ""): digest for name, digest in manifest["outputs"].items()}


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """gen-data followed by a short pretrain, shared by the downstream command tests."""
    root = tmp_path_factory.mktemp("pipeline")
    gen_file = root / "gen.json"
    gen_file.write_text(small_gen_config(n_patients=24, seed=5).model_dump_json())
    model_file = root / "model.json"
    model_file.write_text(json.dumps({"d_model": 16, "n_heads": 2, "n_encoder_layers": 1, "n_decoder_layers": 1, "d_ff": 32, "dropout_prob": 0.0}))
    train_file = root / "train.json"
    train_file.write_text(json.dumps({"batch_size": 4, "max_steps": 3, "warmup_steps": 1, "lr": 1e-3}))

    assert main(["gen-data", "--config", str(gen_file), "--out", str(root / "data")]) == 0
    code = main([
        "pretrain", "--data", str(root / "data" / "cohort.jsonl"), "--config", str(train_file),
        "--model-config", str(model_file), "--scheme", "visit", "--out", str(root / "pretrain"),
    ])
    assert code == 0
    return {
        "root": root,
        "cohort": root / "data" / "cohort.jsonl",
        "labels": root / "data" / "labels.jsonl",
        "checkpoint": root / "pretrain" / "checkpoint.bin",
        "train": train_file,
        "model": model_file,
    }


def test_gen_data_writes_outputs_and_manifest(pipeline):
    data = pipeline["root"] / "data"
    for name in ("cohort.jsonl", "labels.jsonl", "summary.json", "manifest.json"):
        assert (data / name).is_file()
    manifest = read_json(data / "manifest.json")
    assert manifest["subcommand"] == "gen-data"
    assert all(len(digest) == 64 for digest in manifest["outputs"].values())
    assert read_json(data / "summary.json")["n_patients"] == 24


def test_gen_data_is_reproducible(tmp_path, gen_config_file):
    assert main(["gen-data", "--config", str(gen_config_file), "--out", str(tmp_path / "a")]) == 0
    assert main(["gen-data", "--config", str(gen_config_file), "--out", str(tmp_path / "b")]) == 0
    assert output_digests(tmp_path / "a") == output_digests(tmp_path / "b")


def test_gen_data_seed_override_changes_the_cohort(tmp_path, gen_config_file):
    main(["gen-data", "--config", str(gen_config_file), "--out", str(tmp_path / "a")])
    main(["gen-data", "--config", str(gen_config_file), "--seed", "99", "--out", str(tmp_path / "b")])
    assert (tmp_path / "a" / "cohort.jsonl").read_bytes() != (tmp_path / "b" / "cohort.jsonl").read_bytes()
    assert read_json(tmp_path / "b" / "manifest.json")["seed"] == 99


def test_missing_config_exits_with_usage_error(tmp_path, capsys):
    assert main(["gen-data", "--config", str(tmp_path / "absent.json"), "--out", str(tmp_path)]) == 2
    assert "[error]" in capsys.readouterr().err
    assert "error" in read_json(tmp_path / "manifest.json")["config"]


def test_invalid_config_exits_with_usage_error(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text('{"n_patients": -3}')
    assert main(["gen-data", "--config", str(bad), "--out", str(tmp_path / "run")]) == 2


def test_single_class_labels_exit_with_undefined_metric(tmp_path):
    scores = tmp_path / "scores.csv"
    scores.write_text("patient_id,score,label\nP1,0.2,0\nP2,0.7,0\nP3,0.4,0\n")
    assert main(["evaluate-task", "--scores", str(scores), "--n-boot", "10", "--out", str(tmp_path / "run")]) == 3


def test_evaluate_task_writes_report(tmp_path):
    scores = tmp_path / "scores.csv"
    rows = [f"P{i},{i / 20},{int(i % 4 == 0)}" for i in range(20)]
    scores.write_text("patient_id,score,label\n" + "\n".join(rows) + "\n")
    assert main(["evaluate-task", "--scores", str(scores), "--n-boot", "20", "--out", str(tmp_path / "run")]) == 0
    report = read_json(tmp_path / "run" / "report.json")
    assert report["n"] == 20 and "auroc" in report["metrics"]


def test_gradcheck_on_a_tiny_model(tmp_path, capsys):
    args = ["gradcheck", "--layers", "1", "--heads", "2", "--d-model", "8", "--batch", "2", "--coords", "8", "--out", str(tmp_path)]
    assert main(args) == 0
    assert "[gradcheck] max relative error" in capsys.readouterr().out
    assert read_json(tmp_path / "gradcheck.json")["max_relative_error"] < 1e-6


def test_pretrain_outputs(pipeline):
    run = pipeline["root"] / "pretrain"
    assert run.joinpath("trace.csv").read_text().splitlines()[0].startswith("step")
    assert len(run.joinpath("trace.csv").read_text().splitlines()) == 4
    manifest = read_json(run / "manifest.json")
    assert manifest["config"]["train"]["noise"]["scheme"] == "visit"
    assert str(pipeline["cohort"]) in manifest["inputs"]


def test_evaluate_daop(pipeline, tmp_path):
    out = tmp_path / "daop"
    code = main([
        "evaluate-daop", "--checkpoint", str(pipeline["checkpoint"]), "--data", str(pipeline["cohort"]),
        "--n-tracked", "3", "--max-codes", "5", "--n-boot", "20", "--out", str(out),
    ])
    assert code == 0
    report = read_json(out / "report.json")
    assert report["task"] == "daop"
    assert 0.0 <= report["metrics"]["jaccard"]["value"] <= 1.0
    assert len((out / "predictions.jsonl").read_text().splitlines()) == 24


def test_missing_checkpoint_exits_with_usage_error(pipeline, tmp_path):
    code = main(["predict", "--checkpoint", str(tmp_path / "absent.bin"), "--data", str(pipeline["cohort"]), "--out", str(tmp_path)])
    assert code == 2


def test_attention_export(pipeline, tmp_path):
    patient = json.loads(pipeline["cohort"].read_text().splitlines()[0])["patient_id"]
    out = tmp_path / "attention"
    code = main([
        "attention-export", "--checkpoint", str(pipeline["checkpoint"]), "--data", str(pipeline["cohort"]),
        "--patient", patient, "--mermaid", "--top", "3", "--out", str(out),
    ])
    assert code == 0
    exported = read_json(out / "attention.json")
    assert len(exported) == 6
    assert {key.split("/")[0] for key in exported} == {"encoder-self", "decoder-self", "cross"}
    graph = (out / "attention.mmd").read_text().splitlines()
    assert graph[0] == "graph LR" and len(graph) == 4


def test_attention_export_unknown_patient(pipeline, tmp_path):
    code = main([
        "attention-export", "--checkpoint", str(pipeline["checkpoint"]), "--data", str(pipeline["cohort"]),
        "--patient", "nobody", "--out", str(tmp_path),
    ])
    assert code == 2


def test_predict_and_score(pipeline, tmp_path):
    assert main([
        "predict", "--checkpoint", str(pipeline["checkpoint"]), "--data", str(pipeline["cohort"]),
        "--max-codes", "4", "--out", str(tmp_path / "predict"),
    ]) == 0
    predictions = [json.loads(line) for line in (tmp_path / "predict" / "predictions.jsonl").read_text().splitlines()]
    assert len(predictions) == 24 and all(len(p["predicted"]) <= 4 for p in predictions)

    assert main([
        "score", "--checkpoint", str(pipeline["checkpoint"]), "--data", str(pipeline["cohort"]),
        "--labels", str(pipeline["labels"]), "--rule", "outcome", "--out", str(tmp_path / "score"),
    ]) == 0
    rows = (tmp_path / "score" / "scores.csv").read_text().splitlines()
    assert rows[0] == "patient_id,score,label" and len(rows) == 25


def test_score_needs_exactly_one_model(pipeline, tmp_path):
    assert main(["score", "--data", str(pipeline["cohort"]), "--out", str(tmp_path)]) == 2


def test_labels_file_with_several_rules_needs_a_rule(tmp_path):
    scores = tmp_path / "scores.csv"
    scores.write_text("patient_id,score\nP1,0.2\nP2,0.7\n")
    labels = tmp_path / "labels.jsonl"
    rows = [{"patient_id": pid, "label": label, "rule": rule} for rule in ("a", "b") for pid, label in (("P1", 0), ("P2", 1))]
    labels.write_text("\n".join(json.dumps(row) for row in rows) + "\n")
    base = ["evaluate-task", "--scores", str(scores), "--labels", str(labels), "--n-boot", "10"]
    assert main(base + ["--out", str(tmp_path / "ambiguous")]) == 2
    assert main(base + ["--rule", "b", "--out", str(tmp_path / "chosen")]) == 0


def test_copy_baseline(pipeline, tmp_path):
    out = tmp_path / "copy"
    assert main(["baseline", "copy", "--data", str(pipeline["cohort"]), "--pairs", "all", "--n-boot", "20", "--out", str(out)]) == 0
    assert read_json(out / "report.json")["task"] == "daop-copy"


def test_logreg_baseline_then_evaluate(pipeline, tmp_path):
    out = tmp_path / "logreg"
    code = main([
        "baseline", "logreg", "--data", str(pipeline["cohort"]), "--labels", str(pipeline["labels"]),
        "--rule", "outcome", "--n-boot", "20", "--out", str(out),
    ])
    assert code == 0
    assert read_json(out / "logreg.json")["codes"]
    assert "auroc" in read_json(out / "report.json")["metrics"]

    code = main(["score", "--logreg", str(out / "logreg.json"), "--data", str(pipeline["cohort"]), "--out", str(tmp_path / "score")])
    assert code == 0


def test_finetune_from_checkpoint(pipeline, tmp_path):
    out = tmp_path / "finetune"
    code = main([
        "finetune", "--data", str(pipeline["cohort"]), "--labels", str(pipeline["labels"]), "--rule", "outcome",
        "--checkpoint", str(pipeline["checkpoint"]), "--config", str(pipeline["train"]), "--out", str(out),
    ])
    assert code == 0
    assert (out / "checkpoint.bin").is_file()
    assert read_json(out / "manifest.json")["config"]["train"]["objective"] == "binary_finetune"


def test_continue_pretraining_from_checkpoint(pipeline, tmp_path):
    code = main([
        "pretrain", "--data", str(pipeline["cohort"]), "--init", str(pipeline["checkpoint"]),
        "--config", str(pipeline["train"]), "--steps", "2", "--out", str(tmp_path / "more"),
    ])
    assert code == 0
    assert len((tmp_path / "more" / "trace.csv").read_text().splitlines()) == 3


def test_model_config_that_is_not_an_object_is_a_config_error(pipeline, tmp_path):
    model_file = tmp_path / "model.json"
    model_file.write_text("[16, 2]")
    code = main([
        "pretrain", "--data", str(pipeline["cohort"]), "--config", str(pipeline["train"]),
        "--model-config", str(model_file), "--out", str(tmp_path / "run"),
    ])
    assert code == 2


def test_experiment_reports_paired_significance(pipeline, tmp_path, capsys):
    out = tmp_path / "experiment"
    code = main([
        "experiment", "daop", "--gen-config", str(pipeline["root"] / "gen.json"), "--seeds", "1", "--n-boot", "10",
        "--config", str(pipeline["train"]), "--model-config", str(pipeline["model"]), "--steps", "2", "--out", str(out),
    ])
    assert code == 0
    (outcome,) = read_json(out / "experiment.json")["seeds"]
    assert 0.0 <= outcome["values"]["gain_p_value"] <= 1.0
    assert "gain_p_value" in capsys.readouterr().out
