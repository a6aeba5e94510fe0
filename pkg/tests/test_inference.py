import numpy as np
import pytest

from conftest import make_record
from decode_lab import autodiff as ad
from decode_lab.corpus import EOS, evaluation_pairs, flatten_history
from decode_lab.errors import UsageError
from decode_lab.schemas import TrainConfig
from decode_lab.inference import (
    attach_labels,
    batch_score,
    copy_predict,
    featurize,
    generate_next_visit,
    load_logreg,
    load_predictions,
    load_scores,
    logreg_score,
    logreg_train,
    predict_cohort,
    save_logreg,
    save_predictions,
    save_scores,
)


def test_copy_baseline_repeats_previous_visit(record):
    assert copy_predict(record, 2) == {"C"}
    assert copy_predict(record, 1) == {"A", "B"}
    with pytest.raises(UsageError):
        copy_predict(record, 0)


def test_predict_cohort_copy_keeps_pair_order(tiny_cohort):
    pairs = evaluation_pairs(tiny_cohort, "all")
    predictions = predict_cohort(None, tiny_cohort, pairs, threads=2)
    assert [(p.patient_id, p.visit_idx) for p in predictions] == [
        (tiny_cohort[i].patient_id, v) for i, v in pairs
    ]
    assert predictions[0].predicted == ["A", "B"]
    assert predictions[0].gold == ["C"]


def test_generated_visit_is_a_set_of_known_codes(tiny_model, generated):
    record = generated[0][0]
    history = flatten_history(record, len(record.visits), tiny_model.vocab)
    predicted = generate_next_visit(tiny_model, history, max_codes=6)
    assert len(predicted) <= 6
    assert predicted <= set(tiny_model.vocab.codes)
    assert generate_next_visit(tiny_model, history, max_codes=0) == set()


def scripted_decoder(model, tokens):
    """decode_logits stand-in whose step n puts all mass on tokens[n]."""

    def decode_logits(prefix, encoded):
        logits = np.zeros((len(prefix), len(model.vocab)))
        logits[-1, tokens[len(prefix) - 1]] = 10.0
        return ad.constant(logits)

    return decode_logits


def test_generation_stops_at_a_leading_eos(tiny_model, generated, monkeypatch):
    history = flatten_history(generated[0][0], len(generated[0][0].visits), tiny_model.vocab)
    monkeypatch.setattr(tiny_model, "decode_logits", scripted_decoder(tiny_model, [EOS]))
    assert generate_next_visit(tiny_model, history, max_codes=5) == set()


def test_generation_collapses_repeated_codes(tiny_model, generated, monkeypatch):
    history = flatten_history(generated[0][0], len(generated[0][0].visits), tiny_model.vocab)
    first, second = (int(c) for c in tiny_model.vocab.code_ids[:2])
    script = [first, first, second, first, EOS]
    monkeypatch.setattr(tiny_model, "decode_logits", scripted_decoder(tiny_model, script))
    expected = {tiny_model.vocab.id_to_token(first), tiny_model.vocab.id_to_token(second)}
    assert generate_next_visit(tiny_model, history, max_codes=10) == expected


def test_model_predictions_are_thread_independent(tiny_model, generated):
    cohort = generated[0][:6]
    pairs = evaluation_pairs(cohort, "last")
    serial = predict_cohort(tiny_model, cohort, pairs, max_codes=4, threads=1)
    threaded = predict_cohort(tiny_model, cohort, pairs, max_codes=4, threads=3)
    assert serial == threaded


def test_predictions_file_round_trip(tmp_path, tiny_cohort):
    predictions = predict_cohort(None, tiny_cohort, evaluation_pairs(tiny_cohort, "last"))
    path = save_predictions(tmp_path / "predictions.jsonl", predictions)
    assert load_predictions(path) == predictions


def test_featurize_layout():
    record = make_record("P1", [["A"], ["B", "A"]], age=47, sex="M")
    features = featurize(record, {"A": 0, "B": 1, "C": 2})
    np.testing.assert_array_equal(features[:3], [1.0, 1.0, 0.0])
    assert features[3 + 4] == 1.0 and features[3:13].sum() == 1.0
    np.testing.assert_array_equal(features[13:], [1.0, 0.0, 0.0])


def separable_cohort():
    cohort, labels = [], {}
    for i in range(30):
        positive = i % 3 == 0
        visits = [["A", "X"], ["B"]] if positive else [["A"], ["C"]]
        cohort.append(make_record(f"P{i}", visits, age=20 + i))
        labels[f"P{i}"] = int(positive)
    return cohort, labels


def test_logreg_ranks_the_marker_code_first():
    cohort, labels = separable_cohort()
    model = logreg_train(cohort, labels, l2=0.01)
    assert len(model.weights) == len(model.codes) + 13
    scores = dict(batch_score(model, cohort))
    assert min(scores[p] for p, y in labels.items() if y) > max(scores[p] for p, y in labels.items() if not y)
    assert all(0.0 < s < 1.0 for s in scores.values())


def test_logreg_needs_both_classes_and_all_labels():
    cohort, labels = separable_cohort()
    with pytest.raises(UsageError):
        logreg_train(cohort, {pid: 0 for pid in labels})
    with pytest.raises(UsageError):
        logreg_train(cohort, {"P0": 1})


def test_heavy_l2_collapses_logreg_scores_to_the_prior():
    cohort, labels = separable_cohort()
    model = logreg_train(cohort, labels, l2=1e6)
    prior = np.mean(list(labels.values()))
    assert np.abs(model.weights).max() < 1e-4
    assert [logreg_score(model, record) for record in cohort] == pytest.approx([prior] * len(cohort), abs=1e-3)


def test_logreg_iteration_cap_comes_from_train_config():
    cohort, labels = separable_cohort()
    capped = logreg_train(cohort, labels, l2=0.01, train_config=TrainConfig(max_steps=1))
    converged = logreg_train(cohort, labels, l2=0.01)
    assert len(capped.weights) == len(converged.weights)
    assert capped.weights != converged.weights


def test_logreg_file_round_trip(tmp_path):
    cohort, labels = separable_cohort()
    model = logreg_train(cohort, labels)
    loaded = load_logreg(save_logreg(tmp_path / "logreg.json", model))
    assert logreg_score(loaded, cohort[0]) == logreg_score(model, cohort[0])


def test_batch_score_with_model_and_short_history(tiny_model, generated):
    cohort = generated[0][:5]
    full = batch_score(tiny_model, cohort)
    short = batch_score(tiny_model, cohort, history="last-k", k=2)
    assert [pid for pid, _ in full] == [r.patient_id for r in cohort]
    assert all(0.0 < score < 1.0 for _, score in short)
    with pytest.raises(UsageError):
        batch_score(tiny_model, cohort, history="recent")


def test_scores_file_round_trip(tmp_path):
    scores = [("P1", 0.25), ("P2", 0.75)]
    path = save_scores(tmp_path / "scores.csv", scores, {"P1": 0, "P2": 1})
    assert load_scores(path) == (["P1", "P2"], [0.25, 0.75], [0, 1])
    partial = save_scores(tmp_path / "partial.csv", scores, {"P1": 0})
    assert load_scores(partial)[2] is None


def test_attach_labels_requires_every_patient():
    assert attach_labels(["P2", "P1"], {"P1": 0, "P2": 1}) == [1, 0]
    with pytest.raises(UsageError):
        attach_labels(["P3"], {"P1": 0})
