import time

import numpy as np
import pytest

from canguard.ingest import ClassLabel, SynthConfig, synthesize
from canguard.model import ModelConfig, build
from canguard.preprocess import prepare
from canguard.training import TrainConfig, train

ACCEPTANCE_LINES: list[str] = []

# Desk-scale settings shared by the end-to-end fixtures.
A3_COUNTS = {ClassLabel.BENIGN: 20000, ClassLabel.DOS: 2000, ClassLabel.GAS: 1000, ClassLabel.RPM: 1000,
             ClassLabel.SPEED: 1000, ClassLabel.STEERING_WHEEL: 1000}
A3_SMOTE_TARGET = 2000
A3_TRAIN = dict(max_epochs=30, early_stop_patience=5)

SPOOF_COUNTS = {ClassLabel.BENIGN: 8000, ClassLabel.GAS: 500, ClassLabel.RPM: 500, ClassLabel.SPEED: 500,
                ClassLabel.STEERING_WHEEL: 500}


def record_acceptance(criterion: str, passed: bool, detail: str) -> None:
    ACCEPTANCE_LINES.append(f"{criterion} {'PASS' if passed else 'FAIL'}  {detail}")


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def a3_pipeline():
    """Full-architecture model trained on the desk-scale synthetic dataset."""
    t0 = time.perf_counter()
    cfg = SynthConfig(seed=11, counts=dict(A3_COUNTS))
    records = synthesize(cfg)
    data = prepare(records, T=16, test_fraction=0.2, seed=3,
                   target_counts={c: A3_SMOTE_TARGET for c in range(1, 6)})
    model = build(ModelConfig(T=16, seed=5))
    model.scaler = data.scaler
    model, history = train(model, data.train, TrainConfig(seed=7, **A3_TRAIN), data.weights)
    return {"records": records, "data": data, "model": model, "history": history,
            "seconds": time.perf_counter() - t0}


@pytest.fixture(scope="session")
def spoof_pipeline():
    """Model trained on benign traffic plus the four spoofing classes only."""
    records = synthesize(SynthConfig(seed=21, counts=dict(SPOOF_COUNTS)))
    data = prepare(records, T=16, test_fraction=0.2, seed=4, target_counts={c: 1500 for c in range(2, 6)})
    model = build(ModelConfig(T=16, seed=6))
    model.scaler = data.scaler
    model, history = train(model, data.train, TrainConfig(seed=8, max_epochs=15, early_stop_patience=3),
                           data.weights)
    return {"data": data, "model": model, "history": history}
