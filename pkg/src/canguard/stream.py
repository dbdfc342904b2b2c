"""Online detection: a T-deep ring buffer per CAN channel, one classification
per arriving frame once the buffer is full."""

from __future__ import annotations

import collections
import io
import queue
import socket
import sys
import threading
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, Iterable, Iterator

import numpy as np

from .ingest import CLASS_NAMES, DEFAULT_COLUMN_MAP, ClassLabel, CanRecord, IngestError, _resolve_columns, _row_to_record
from .model import CANGuardModel, predict

WARMING_UP = "warming-up"
CLASSIFIED = "classified"
MALFORMED = "malformed"


@dataclass
class Alert:
    frame: int
    predicted_class: str
    probability: float
    probabilities: list[float]
    attention: list[float] | None
    timestamp: float

    def to_json_dict(self) -> dict:
        d = {"frame": self.frame, "class": self.predicted_class, "prob": self.probability,
             "probs": self.probabilities, "timestamp": self.timestamp}
        if self.attention is not None:
            d["attention"] = self.attention
        return d


@dataclass
class Verdict:
    frame: int
    status: str
    predicted: int | None = None
    probabilities: np.ndarray | None = None
    error: str | None = None


class DetectorSession:
    """Single-consumer detection state for one CAN channel."""

    def __init__(self, model: CANGuardModel, threshold: float = 0.5, channel: str = "can0"):
        if model.scaler is None:
            raise ValueError("checkpoint carries no scaler; cannot standardise frames")
        if not 0 < threshold <= 1:
            raise ValueError("threshold must lie in (0, 1]")
        F = model.config.F
        if model.scaler.mu.shape != (F,) or model.scaler.sigma.shape != (F,):
            raise ValueError(f"scaler has {model.scaler.mu.shape} features, model expects {F}")
        self.model = model
        self.threshold = threshold
        self.channel = channel
        self.T = model.config.T
        self.buffer: collections.deque[np.ndarray] = collections.deque(maxlen=self.T)
        self.frames_seen = 0
        self.malformed = 0
        self.last_alert_frame = -1

    @property
    def warming_up(self) -> bool:
        return len(self.buffer) < self.T

    def feed(self, record: CanRecord | Exception) -> tuple[Verdict, Alert | None]:
        frame = self.frames_seen
        self.frames_seen += 1
        if isinstance(record, Exception):
            self.malformed += 1
            return Verdict(frame, MALFORMED, error=str(record)), None
        try:
            record.validate()
        except ValueError as exc:
            self.malformed += 1
            return Verdict(frame, MALFORMED, error=str(exc)), None
        x = np.asarray(record.data, dtype=np.float64)
        self.buffer.append((x - self.model.scaler.mu) / self.model.scaler.sigma)
        if self.warming_up:
            return Verdict(frame, WARMING_UP), None
        window = np.stack(self.buffer)[None]
        probs, att = predict(self.model, window)
        p = probs[0]
        cls = int(np.argmax(p))
        verdict = Verdict(frame, CLASSIFIED, cls, p)
        alert = None
        if cls != ClassLabel.BENIGN and p[cls] >= self.threshold and frame > self.last_alert_frame:
            alert = Alert(frame, CLASS_NAMES[cls], float(p[cls]), p.tolist(),
                          att[0].tolist() if att is not None else None, time.monotonic())
            self.last_alert_frame = frame
        return verdict, alert


class MultiChannelDetector:
    """One session per channel id, created on first use."""

    def __init__(self, model: CANGuardModel, threshold: float = 0.5):
        self.model, self.threshold = model, threshold
        self.sessions: dict[str, DetectorSession] = {}

    def feed(self, channel: str, record):
        if channel not in self.sessions:
            self.sessions[channel] = DetectorSession(self.model, self.threshold, channel)
        return self.sessions[channel].feed(record)


def feed(session: DetectorSession, record) -> tuple[Verdict, Alert | None]:
    return session.feed(record)


# ---------------------------------------------------------------- sources

def parse_stream(lines: Iterable[str], header: bool = True) -> Iterator[tuple[CanRecord | IngestError, int | None]]:
    """Yield (record or error, label) per data line; malformed lines become errors."""
    import csv

    reader = csv.reader(lines)
    if header:
        try:
            head = next(reader)
        except StopIteration:
            return
        cols = _resolve_columns(head, DEFAULT_COLUMN_MAP)
        start = 2
    else:
        cols = {"ID": 0, **{f"DATA_{i}": i + 1 for i in range(8)}, "label": 9}
        start = 1
    for line, row in enumerate(reader, start=start):
        if not row:
            continue
        try:
            rec = _row_to_record(row, cols, line)
            yield rec, int(rec.label)
        except IngestError as exc:
            yield exc, None


def threaded_source(items: Iterable, maxsize: int = 1024) -> Iterator:
    """Read ``items`` on a worker thread through a bounded FIFO (blocking when full)."""
    q: queue.Queue = queue.Queue(maxsize=maxsize)
    done = object()
    failure: list[BaseException] = []

    def pump():
        try:
            for item in items:
                q.put(item)
        except BaseException as exc:  # surfaced to the consumer
            failure.append(exc)
        finally:
            q.put(done)

    threading.Thread(target=pump, daemon=True).start()
    while True:
        item = q.get()
        if item is done:
            break
        yield item
    if failure:
        raise failure[0]


def open_lines(spec: str) -> Iterable[str]:
    """'-' for stdin, 'tcp://host:port' for a socket byte stream, otherwise a file path."""
    if spec == "-":
        return sys.stdin
    if spec.startswith("tcp://"):
        host, _, port = spec[len("tcp://"):].rpartition(":")
        sock = socket.create_connection((host, int(port)))
        return io.TextIOWrapper(sock.makefile("rb"), encoding="utf-8", newline="")
    return open(spec, newline="", encoding="utf-8")


# ---------------------------------------------------------------- replay

@dataclass
class ReplaySummary:
    frames: int = 0
    classified: int = 0
    warming_up: int = 0
    malformed: int = 0
    alerts_by_class: dict[str, int] = field(default_factory=dict)
    mean_latency_ms: float = 0.0
    labelled_windows: int = 0
    windowed_accuracy: float | None = None
    wall_time_s: float = 0.0

    def to_dict(self) -> dict:
        return asdict(self)


def replay(source: Iterable, session: DetectorSession, rate: float | None = None,
           on_alert: Callable[[Alert], None] | None = None,
           on_verdict: Callable[[Verdict, int | None], None] | None = None) -> ReplaySummary:
    """Push every item of ``source`` through ``session``.

    Items are CanRecord objects, exceptions (malformed input) or
    ``(record, label)`` pairs as produced by :func:`parse_stream`. With
    ``rate`` set, frames are paced to at most ``rate`` per second.
    """
    summary = ReplaySummary()
    correct = 0
    latency = 0.0
    start = time.monotonic()
    for item in source:
        # CanRecord is itself a tuple; only bare (record, label) pairs are unpacked
        pair = isinstance(item, tuple) and not isinstance(item, CanRecord)
        record, label = item if pair else (item, None)
        if label is None and isinstance(record, CanRecord):
            label = int(record.label)
        if rate is not None:
            due = start + summary.frames / rate
            delay = due - time.monotonic()
            if delay > 0:
                time.sleep(delay)
        t0 = time.perf_counter()
        verdict, alert = session.feed(record)
        latency += time.perf_counter() - t0
        summary.frames += 1
        if verdict.status == CLASSIFIED:
            summary.classified += 1
            if label is not None:
                summary.labelled_windows += 1
                correct += int(verdict.predicted == label)
        elif verdict.status == WARMING_UP:
            summary.warming_up += 1
        else:
            summary.malformed += 1
        if on_verdict is not None:
            on_verdict(verdict, label)
        if alert is not None:
            summary.alerts_by_class[alert.predicted_class] = summary.alerts_by_class.get(alert.predicted_class, 0) + 1
            if on_alert is not None:
                on_alert(alert)
    if rate is not None and summary.frames:
        # the last frame is due at start + (frames - 1) / rate; hold until its slot closes
        remaining = start + summary.frames / rate - time.monotonic()
        if remaining > 0:
            time.sleep(remaining)
    summary.wall_time_s = time.monotonic() - start
    summary.mean_latency_ms = 1000.0 * latency / summary.frames if summary.frames else 0.0
    if summary.labelled_windows:
        summary.windowed_accuracy = correct / summary.labelled_windows
    return summary
