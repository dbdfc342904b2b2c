import io
import time

import numpy as np
import pytest

from canguard.ingest import CanRecord, ClassLabel, IngestError, SynthConfig, serialize_csv, synthesize
from canguard.model import ModelConfig, build, predict
from canguard.preprocess import Scaler, apply_scaler, make_windows
from canguard.ingest import select_features
from canguard.stream import (CLASSIFIED, MALFORMED, WARMING_UP, DetectorSession, MultiChannelDetector,
                             parse_stream, replay, threaded_source)
from canguard.training import evaluate

SMALL = dict(conv_filters=[4, 4, 4], gru_units=[4, 3], dense_units=[8, 6], T=8)


def small_model(seed=0, **kw):
    model = build(ModelConfig(seed=seed, **{**SMALL, **kw}))
    model.scaler = Scaler(np.full(8, 120.0), np.full(8, 70.0))
    return model


@pytest.fixture(scope="module")
def records():
    return synthesize(SynthConfig(seed=31, counts={ClassLabel.BENIGN: 300, ClassLabel.DOS: 40, ClassLabel.GAS: 30,
                                                   ClassLabel.RPM: 30, ClassLabel.SPEED: 30,
                                                   ClassLabel.STEERING_WHEEL: 30}))


def test_warm_up_exactly_t_minus_one(records):
    session = DetectorSession(small_model())
    statuses = [session.feed(r)[0].status for r in records[:12]]
    assert statuses[:7] == [WARMING_UP] * 7
    assert statuses[7:] == [CLASSIFIED] * 5
    assert len(session.buffer) == 8


def test_empty_stream_zero_summary():
    s = replay([], DetectorSession(small_model()))
    assert (s.frames, s.classified, s.warming_up, s.malformed, s.alerts_by_class) == (0, 0, 0, 0, {})
    assert s.windowed_accuracy is None and s.mean_latency_ms == 0.0
    assert list(parse_stream(io.StringIO(""))) == []


def test_malformed_records_counted_and_skipped(records):
    text = serialize_csv(records[:10])
    lines = text.splitlines(keepends=True)
    lines.insert(3, "1,2,3\n")
    lines.insert(6, "5,0,0,0,0,999,0,0,0,BENIGN\n")
    session = DetectorSession(small_model())
    verdicts = []
    s = replay(parse_stream(lines), session, on_verdict=lambda v, y: verdicts.append(v))
    assert s.malformed == 2 and s.frames == 12
    assert [v.status for v in verdicts].count(MALFORMED) == 2
    assert s.frames == s.classified + s.warming_up + s.malformed
    # malformed lines never enter the buffer: 10 valid frames -> 3 classifications
    assert s.classified == 3
    assert isinstance(session.feed(IngestError("bad"))[0].error, str)


def test_invalid_record_object_is_malformed():
    session = DetectorSession(small_model())
    v, a = session.feed(CanRecord(1, (0, 0, 0, 300, 0, 0, 0, 0), ClassLabel.BENIGN))
    assert v.status == MALFORMED and a is None and session.malformed == 1


@pytest.mark.parametrize("switches", [dict(), dict(use_attention=False), dict(use_cnn=False)])
def test_stream_matches_batch_bit_identically(records, switches):
    model = small_model(3, **switches)
    X, y = select_features(records)
    batch = apply_scaler(model.scaler, make_windows(X, y, 8))
    expected, _ = predict(model, batch.windows)
    session = DetectorSession(model)
    got = [v.probabilities for v, _ in (session.feed(r) for r in records) if v.status == CLASSIFIED]
    assert np.stack(got).tobytes() == expected.tobytes()


def test_scaler_shape_mismatch_is_fatal():
    model = small_model()
    model.scaler = Scaler(np.zeros(7), np.ones(7))
    with pytest.raises(ValueError):
        DetectorSession(model)
    model.scaler = None
    with pytest.raises(ValueError):
        DetectorSession(model)
    with pytest.raises(ValueError):
        DetectorSession(small_model(), threshold=0.0)


def test_alert_rule_and_monotone_indices(records):
    model = small_model(1)
    session = DetectorSession(model, threshold=0.2)
    alerts, verdicts = [], []
    for r in records:
        v, a = session.feed(r)
        verdicts.append(v)
        if a is not None:
            alerts.append(a)
            assert v.predicted != ClassLabel.BENIGN and v.probabilities[v.predicted] >= 0.2
            assert a.probability == v.probabilities[v.predicted] and a.frame == v.frame
            assert len(a.attention) == 2  # one weight per pooled step
    frames = [a.frame for a in alerts]
    assert frames == sorted(set(frames))
    expected = sum(v.status == CLASSIFIED and v.predicted != 0 and v.probabilities[v.predicted] >= 0.2
                   for v in verdicts)
    assert len(alerts) == expected
    d = alerts[0].to_json_dict() if alerts else {"frame": 0, "class": "", "prob": 0}
    assert {"frame", "class", "prob"} <= set(d)


def test_threshold_one_suppresses_uncertain_alerts(records):
    session = DetectorSession(small_model(1), threshold=1.0)
    assert all(session.feed(r)[1] is None for r in records)


def test_threaded_source_preserves_order_and_backpressure():
    items = list(range(5000))
    assert list(threaded_source(iter(items), maxsize=3)) == items

    def broken():
        yield 1
        raise RuntimeError("reader failed")

    got = []
    with pytest.raises(RuntimeError):
        for x in threaded_source(broken()):
            got.append(x)
    assert got == [1]


def test_multi_channel_sessions_are_independent(records):
    det = MultiChannelDetector(small_model())
    for r in records[:8]:
        det.feed("can0", r)
    v, _ = det.feed("can1", records[0])
    assert v.status == WARMING_UP
    assert det.sessions["can0"].frames_seen == 8 and det.sessions["can1"].frames_seen == 1


def test_replay_summary_accuracy_matches_evaluate(records):
    model = small_model(2)
    X, y = select_features(records)
    windows = apply_scaler(model.scaler, make_windows(X, y, 8))
    s = replay(parse_stream(io.StringIO(serialize_csv(records))), DetectorSession(model))
    assert s.labelled_windows == len(windows)
    assert s.windowed_accuracy == evaluate(model, windows).accuracy


def test_rate_limited_replay_wall_time(records):
    s = replay(records[:20], DetectorSession(small_model()), rate=200.0)
    assert s.wall_time_s >= 20 / 200.0


def test_trained_model_benign_then_dos_burst(a3_pipeline):
    model = a3_pipeline["model"]
    T = model.config.T
    benign = [r for r in synthesize(SynthConfig(seed=77, counts={ClassLabel.BENIGN: 400}))][:T]
    dos = synthesize(SynthConfig(seed=78, counts={ClassLabel.DOS: 2 * T}))
    session = DetectorSession(model)
    out = [session.feed(r) for r in benign]
    assert out[-1][0].status == CLASSIFIED and out[-1][0].predicted == ClassLabel.BENIGN and out[-1][1] is None
    alerts = [a for a in (session.feed(r)[1] for r in dos) if a is not None]
    assert any(a.predicted_class == "DOS" for a in alerts)
