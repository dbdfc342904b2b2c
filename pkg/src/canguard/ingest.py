"""CAN log ingestion: CSV parsing, deduplication, feature selection and a
seeded traffic synthesizer producing DoS and spoofing bursts."""

from __future__ import annotations

import csv
import enum
import io
import os
from dataclasses import dataclass, field
from typing import IO, Iterable, Iterator, Mapping, NamedTuple, Sequence

import numpy as np

NUM_BYTES = 8
DATA_COLUMNS = tuple(f"DATA_{i}" for i in range(NUM_BYTES))


class IngestError(ValueError):
    """Malformed input data; ``line`` is the 1-based line number when known."""

    def __init__(self, message: str, line: int | None = None):
        super().__init__(f"line {line}: {message}" if line is not None else message)
        self.line = line


class ClassLabel(enum.IntEnum):
    BENIGN = 0
    DOS = 1
    GAS = 2
    RPM = 3
    SPEED = 4
    STEERING_WHEEL = 5

    @classmethod
    def parse(cls, text: str) -> "ClassLabel":
        key = text.strip().upper().replace(" ", "_").replace("-", "_")
        try:
            return cls[key]
        except KeyError:
            raise ValueError(f"unknown label {text!r}; expected one of {[c.name for c in cls]}") from None


NUM_CLASSES = len(ClassLabel)
CLASS_NAMES = [c.name for c in ClassLabel]


class CanRecord(NamedTuple):
    id: int
    data: tuple[int, ...]
    label: ClassLabel

    def validate(self) -> None:
        if self.id < 0:
            raise ValueError(f"negative arbitration id {self.id}")
        if len(self.data) != NUM_BYTES:
            raise ValueError(f"expected {NUM_BYTES} payload bytes, got {len(self.data)}")
        for i, b in enumerate(self.data):
            if not 0 <= b <= 255:
                raise ValueError(f"DATA_{i}={b} out of range 0-255")


DEFAULT_COLUMN_MAP = {"ID": "ID", **{c: c for c in DATA_COLUMNS}, "label": "label"}


def _resolve_columns(header: Sequence[str], column_map: Mapping[str, str]) -> dict[str, int]:
    lookup = {h.strip().lower(): i for i, h in enumerate(header)}
    resolved = {}
    for role, column in column_map.items():
        idx = lookup.get(column.strip().lower())
        if idx is None:
            raise IngestError(f"missing required column {column!r} (role {role})", line=1)
        resolved[role] = idx
    missing = set(DEFAULT_COLUMN_MAP) - set(resolved)
    if missing:
        raise IngestError(f"column map lacks roles {sorted(missing)}")
    return resolved


def _row_to_record(row: Sequence[str], cols: Mapping[str, int], line: int) -> CanRecord:
    try:
        can_id = int(row[cols["ID"]])
        data = tuple(int(row[cols[c]]) for c in DATA_COLUMNS)
    except (ValueError, IndexError) as exc:
        raise IngestError(f"malformed row {row!r}: {exc}", line) from None
    try:
        label = ClassLabel.parse(row[cols["label"]])
    except (ValueError, IndexError) as exc:
        raise IngestError(str(exc), line) from None
    rec = CanRecord(can_id, data, label)
    try:
        rec.validate()
    except ValueError as exc:
        raise IngestError(str(exc), line) from None
    return rec


def iter_csv(source: IO[str] | Iterable[str], column_map: Mapping[str, str] | None = None,
             header: bool = True) -> Iterator[CanRecord]:
    """Yield records lazily. With ``header=False`` the default column order
    ``ID, DATA_0..DATA_7, label`` is assumed."""
    reader = csv.reader(source)
    if header:
        try:
            head = next(reader)
        except StopIteration:
            raise IngestError("empty input: header row missing") from None
        cols = _resolve_columns(head, column_map or DEFAULT_COLUMN_MAP)
        start = 2
    else:
        cols = {"ID": 0, **{c: i + 1 for i, c in enumerate(DATA_COLUMNS)}, "label": NUM_BYTES + 1}
        start = 1
    for line, row in enumerate(reader, start=start):
        if not row or all(not cell.strip() for cell in row):
            continue
        yield _row_to_record(row, cols, line)


def parse_csv(source, column_map: Mapping[str, str] | None = None) -> list[CanRecord]:
    """Parse records (file order) from a text stream, raw bytes or a file path."""
    if isinstance(source, (bytes, bytearray)):
        return list(iter_csv(io.StringIO(source.decode("utf-8")), column_map))
    if isinstance(source, (str, os.PathLike)):
        with open(source, newline="", encoding="utf-8") as fh:
            return list(iter_csv(fh, column_map))
    return list(iter_csv(source, column_map))


def serialize_csv(records: Iterable[CanRecord], sink: IO[str] | None = None) -> str | None:
    """Write records in the canonical decimal layout; returns text when ``sink`` is None."""
    buf = sink if sink is not None else io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["ID", *DATA_COLUMNS, "label"])
    for r in records:
        writer.writerow([r.id, *r.data, r.label.name])
    return buf.getvalue() if sink is None else None


def deduplicate(records: Iterable[CanRecord]) -> list[CanRecord]:
    """Drop exact repeats of (id, data, label), keeping first occurrences in order."""
    seen = set()
    out = []
    for r in records:
        key = (r.id, r.data, int(r.label))
        if key not in seen:
            seen.add(key)
            out.append(r)
    return out


def select_features(records: Sequence[CanRecord]) -> tuple[np.ndarray, np.ndarray]:
    """(N, 8) float matrix of DATA_0..DATA_7 and integer labels; ID is dropped."""
    if not records:
        return np.zeros((0, NUM_BYTES)), np.zeros(0, dtype=np.int64)
    X = np.array([r.data for r in records], dtype=np.float64)
    y = np.array([int(r.label) for r in records], dtype=np.int64)
    return X, y


# ---------------------------------------------------------------- synthesis

@dataclass
class SpoofPattern:
    target_id: int
    byte_indices: tuple[int, ...]
    # inclusive value range written to each overwritten byte
    value_ranges: tuple[tuple[int, int], ...]


def _default_benign_ids() -> dict[int, list[tuple[int, int]]]:
    # Per-ID inclusive byte ranges. Bytes 4 and 5 hold a mid-range signal in
    # benign traffic, which the default spoof patterns push to the extremes.
    rng = np.random.default_rng(20240)
    pool = {}
    for can_id in (0x130, 0x1A0, 0x244, 0x260, 0x2C0, 0x316, 0x329, 0x370, 0x43F, 0x545):
        ranges = []
        for b in range(NUM_BYTES):
            if b in (4, 5):
                ranges.append((60, 180))
            else:
                lo = int(rng.integers(0, 200))
                ranges.append((lo, lo + int(rng.integers(10, 56))))
        pool[can_id] = ranges
    return pool


def _default_spoofs() -> dict[ClassLabel, SpoofPattern]:
    lo, hi = (0, 40), (215, 255)
    return {
        ClassLabel.GAS: SpoofPattern(0x260, (4, 5), (hi, lo)),
        ClassLabel.RPM: SpoofPattern(0x316, (4, 5), (lo, hi)),
        ClassLabel.SPEED: SpoofPattern(0x130, (4, 5), (hi, hi)),
        ClassLabel.STEERING_WHEEL: SpoofPattern(0x43F, (4, 5), (lo, lo)),
    }


@dataclass
class SynthConfig:
    seed: int = 0
    counts: dict[ClassLabel, int] = field(default_factory=lambda: {c: 0 for c in ClassLabel})
    benign_ids: dict[int, list[tuple[int, int]]] = field(default_factory=_default_benign_ids)
    dos_id: int = 0x000
    dos_payload: tuple[int, ...] = (0,) * NUM_BYTES
    # Rolling frame counter written over one DoS byte; None keeps the payload
    # fully constant (which deduplication then collapses to a single frame).
    dos_counter_byte: int | None = 7
    spoofs: dict[ClassLabel, SpoofPattern] = field(default_factory=_default_spoofs)
    burst_length: tuple[int, int] = (16, 48)
    # "random_id": a spoofed frame clones a benign frame of a uniformly drawn ID,
    # so every byte outside the spoofed ones has the benign distribution and the
    # class signal lives only in the spoofed bytes. "target_id": clone a frame
    # of the spoof's own target ID (its other bytes then fingerprint the ID).
    spoof_template: str = "random_id"

    def validate(self) -> None:
        for c, n in self.counts.items():
            if n < 0:
                raise ValueError(f"negative count for {ClassLabel(c).name}")
        if self.counts.get(ClassLabel.BENIGN, 0) > 0 and not self.benign_ids:
            raise ValueError("benign ID pool is empty but benign count is nonzero")
        for label, pat in self.spoofs.items():
            if any(not 0 <= i < NUM_BYTES for i in pat.byte_indices):
                raise ValueError(f"spoof byte index out of range for {ClassLabel(label).name}")
            if len(pat.value_ranges) != len(pat.byte_indices):
                raise ValueError("one value range per spoofed byte is required")
        if len(self.dos_payload) != NUM_BYTES:
            raise ValueError("DoS payload must have 8 bytes")
        if self.dos_counter_byte is not None and not 0 <= self.dos_counter_byte < NUM_BYTES:
            raise ValueError("dos_counter_byte out of range")
        if self.spoof_template not in ("random_id", "target_id"):
            raise ValueError("spoof_template must be 'random_id' or 'target_id'")
        if self.burst_length[0] < 1 or self.burst_length[1] < self.burst_length[0]:
            raise ValueError("invalid burst_length range")


def parse_counts(text: str) -> dict[ClassLabel, int]:
    """Parse ``benign=5000,dos=500,...`` into a count map."""
    counts = {c: 0 for c in ClassLabel}
    for part in filter(None, (p.strip() for p in text.split(","))):
        name, _, value = part.partition("=")
        counts[ClassLabel.parse(name)] = int(value)
    return counts


class _Payloads:
    def __init__(self, config: SynthConfig, rng: np.random.Generator):
        self.config, self.rng = config, rng
        self.dos_frames = 0

    def benign(self, can_id: int) -> tuple[int, ...]:
        ranges = self.config.benign_ids[can_id]
        return tuple(int(self.rng.integers(lo, hi + 1)) for lo, hi in ranges)

    def dos(self) -> tuple[int, ...]:
        payload = list(self.config.dos_payload)
        if self.config.dos_counter_byte is not None:
            payload[self.config.dos_counter_byte] = self.dos_frames % 256
        self.dos_frames += 1
        return tuple(payload)

    def spoof(self, label: ClassLabel) -> tuple[tuple[int, ...], tuple[int, ...]]:
        pat = self.config.spoofs[label]
        if self.config.spoof_template == "random_id" and self.config.benign_ids:
            ids = sorted(self.config.benign_ids)
            template = self.benign(ids[int(self.rng.integers(len(ids)))])
        elif pat.target_id in self.config.benign_ids:
            template = self.benign(pat.target_id)
        else:
            template = tuple(int(v) for v in self.rng.integers(0, 256, NUM_BYTES))
        data = list(template)
        for idx, (lo, hi) in zip(pat.byte_indices, pat.value_ranges):
            data[idx] = int(self.rng.integers(lo, hi + 1))
        return tuple(data), template


def synthesize_with_templates(config: SynthConfig) -> tuple[list[CanRecord], list[tuple[int, ...] | None]]:
    """Like :func:`synthesize` but also returns the benign template each spoof
    record was cloned from (None for non-spoof records)."""
    config.validate()
    rng = np.random.default_rng(config.seed)
    payloads = _Payloads(config, rng)
    n_benign = config.counts.get(ClassLabel.BENIGN, 0)
    ids = sorted(config.benign_ids)
    benign_ids = rng.choice(ids, size=n_benign) if n_benign else np.zeros(0, dtype=int)

    # attack bursts: (label, length)
    bursts: list[tuple[ClassLabel, int]] = []
    lo, hi = config.burst_length
    for label in ClassLabel:
        if label is ClassLabel.BENIGN:
            continue
        remaining = config.counts.get(label, 0)
        if remaining and label is not ClassLabel.DOS and label not in config.spoofs:
            raise ValueError(f"no spoof pattern configured for {label.name}")
        while remaining > 0:
            n = min(remaining, int(rng.integers(lo, hi + 1)))
            bursts.append((label, n))
            remaining -= n
    order = rng.permutation(len(bursts))
    bursts = [bursts[i] for i in order]
    # insertion points into the benign stream, sorted so bursts never overlap
    positions = np.sort(rng.integers(0, n_benign + 1, size=len(bursts)))

    records: list[CanRecord] = []
    templates: list[tuple[int, ...] | None] = []
    b = 0
    for pos, (label, n) in zip(positions, bursts):
        while b < pos:
            cid = int(benign_ids[b])
            records.append(CanRecord(cid, payloads.benign(cid), ClassLabel.BENIGN))
            templates.append(None)
            b += 1
        for _ in range(n):
            if label is ClassLabel.DOS:
                records.append(CanRecord(config.dos_id, payloads.dos(), label))
                templates.append(None)
            else:
                data, template = payloads.spoof(label)
                records.append(CanRecord(config.spoofs[label].target_id, data, label))
                templates.append(template)
    while b < n_benign:
        cid = int(benign_ids[b])
        records.append(CanRecord(cid, payloads.benign(cid), ClassLabel.BENIGN))
        templates.append(None)
        b += 1
    return records, templates


def synthesize(config: SynthConfig) -> list[CanRecord]:
    """Deterministic labeled CAN traffic with bursty DoS/spoofing injections."""
    return synthesize_with_templates(config)[0]
