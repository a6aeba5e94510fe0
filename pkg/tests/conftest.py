import json

import numpy as np
import pytest

from decode_lab.corpus import build_vocab
from decode_lab.model import DecodeModel, init_parameters
from decode_lab.schemas import Demographics, GenConfig, ModelConfig, PatientRecord, PlantedRule, Visit
from decode_lab.synthgen import generate_cohort


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run long acceptance experiments")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


def make_record(patient_id, visits, age=45, sex="F"):
    return PatientRecord(
        patient_id=patient_id,
        demographics=Demographics(age_years=age, sex=sex),
        visits=[Visit(codes=list(codes)) for codes in visits],
    )


def small_gen_config(n_patients=40, seed=3):
    return GenConfig(
        n_patients=n_patients,
        mean_visits=4.0,
        sd_visits=1.5,
        max_visits=8,
        mean_codes_per_visit=3.0,
        sd_codes=1.5,
        max_codes=8,
        n_common_codes=30,
        n_rare_codes=20,
        planted_rules=[
            PlantedRule(name="onset", precursors=("M54.50", "G47.00"), target="F43.12", precursor_rate=0.3),
            PlantedRule(
                name="outcome",
                precursors=("F43.10", "F32.9"),
                target="X71.0",
                kind="binary_outcome",
                base_prob=0.05,
                hit_prob=0.9,
            ),
        ],
        outcome_prevalence_target=0.3,
        seed=seed,
    )


def tiny_model_config(vocab_size, **overrides):
    settings = dict(
        vocab_size=vocab_size,
        d_model=16,
        n_heads=2,
        n_encoder_layers=1,
        n_decoder_layers=1,
        d_ff=32,
        max_seq_len=128,
        dropout_prob=0.0,
    )
    settings.update(overrides)
    return ModelConfig(**settings)


@pytest.fixture
def record():
    return make_record("P1", [["A", "B"], ["C"], ["A", "D"]])


@pytest.fixture
def tiny_cohort():
    return [
        make_record("P1", [["A", "B"], ["C"], ["A", "D"]]),
        make_record("P2", [["B"], ["B", "C"]], age=71, sex="M"),
        make_record("P3", [["A"], ["A"], ["A", "B"], ["D"]], age=30, sex="U"),
    ]


@pytest.fixture(scope="session")
def generated():
    """A small generated cohort and its binary labels."""
    return generate_cohort(small_gen_config(), threads=1)


@pytest.fixture(scope="session")
def generated_vocab(generated):
    return build_vocab(generated[0])


@pytest.fixture
def tiny_model(generated_vocab):
    config = tiny_model_config(len(generated_vocab))
    return DecodeModel(config, init_parameters(config, 0), generated_vocab)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def gen_config_file(tmp_path):
    path = tmp_path / "gen.json"
    path.write_text(small_gen_config(n_patients=24, seed=5).model_dump_json())
    return path


@pytest.fixture
def model_config_file(tmp_path):
    path = tmp_path / "model.json"
    path.write_text(
        json.dumps(
            {"d_model": 16, "n_heads": 2, "n_encoder_layers": 1, "n_decoder_layers": 1, "d_ff": 32, "max_seq_len": 128, "dropout_prob": 0.0}
        )
    )
    return path
