"""Windowing, stratified splitting, z-score scaling, BorderlineSMOTE and class weights."""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .ingest import CLASS_NAMES, NUM_BYTES, CanRecord, deduplicate, select_features
from .seeding import rng_for

REAL = "real"
SYNTHETIC = "synthetic-smote"
DATASET_FORMAT = "canguard-dataset"
DATASET_VERSION = 1


class DataWarning(UserWarning):
    pass


@dataclass
class WindowConfig:
    T: int = 16
    stride: int = 1
    F: int = NUM_BYTES

    def __post_init__(self):
        if self.T < 1:
            raise ValueError("window length must be positive")
        if self.stride != 1:
            raise ValueError("only stride 1 is supported")


@dataclass
class WindowedDataset:
    windows: np.ndarray  # (N', T, F)
    labels: np.ndarray  # (N',) int
    provenance: np.ndarray = None  # (N',) of REAL / SYNTHETIC
    # For synthetic windows: indices (in the pre-augmentation set) of the base
    # sample and the neighbour it was interpolated toward; -1 for real windows.
    parents: np.ndarray = None
    mix: np.ndarray = None

    def __post_init__(self):
        n = len(self.labels)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.windows.shape[0] != n:
            raise ValueError("windows and labels disagree on length")
        if self.provenance is None:
            self.provenance = np.full(n, REAL, dtype=object)
        if self.parents is None:
            self.parents = np.full((n, 2), -1, dtype=np.int64)
        if self.mix is None:
            self.mix = np.full(n, np.nan)

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def T(self) -> int:
        return self.windows.shape[1]

    @property
    def F(self) -> int:
        return self.windows.shape[2]

    def subset(self, idx) -> "WindowedDataset":
        idx = np.asarray(idx, dtype=np.int64)
        return WindowedDataset(self.windows[idx], self.labels[idx], self.provenance[idx],
                               self.parents[idx], self.mix[idx])

    def class_counts(self, num_classes: int = len(CLASS_NAMES)) -> np.ndarray:
        return np.bincount(self.labels, minlength=num_classes)

    def provenance_counts(self) -> dict[str, int]:
        return {REAL: int((self.provenance == REAL).sum()), SYNTHETIC: int((self.provenance == SYNTHETIC).sum())}


def make_windows(features: np.ndarray, labels: np.ndarray, config: WindowConfig | int = 16) -> WindowedDataset:
    """Overlapping length-T windows, each labelled by its last row."""
    T = config.T if isinstance(config, WindowConfig) else int(config)
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    N = features.shape[0]
    if N < T:
        raise ValueError(f"need at least T={T} rows to build a window, got {N}")
    windows = np.lib.stride_tricks.sliding_window_view(features, T, axis=0)  # (N-T+1, F, T)
    windows = np.ascontiguousarray(windows.transpose(0, 2, 1))
    return WindowedDataset(windows, labels[T - 1:].copy())


def stratified_split(ds: WindowedDataset, test_fraction: float, seed: int = 0
                     ) -> tuple[WindowedDataset, WindowedDataset]:
    if not 0 <= test_fraction < 1:
        raise ValueError("test_fraction must lie in [0, 1)")
    rng = np.random.default_rng(seed)
    train_idx, test_idx = [], []
    for c in np.unique(ds.labels):
        idx = np.flatnonzero(ds.labels == c)
        if len(idx) < 2:
            warnings.warn(f"class {c} has {len(idx)} window(s); kept entirely in train", DataWarning, stacklevel=2)
            train_idx.append(idx)
            continue
        idx = rng.permutation(idx)
        n_test = int(round(len(idx) * test_fraction))
        n_test = min(n_test, len(idx) - 1) if test_fraction > 0 else 0
        test_idx.append(idx[:n_test])
        train_idx.append(idx[n_test:])
    tr = np.sort(np.concatenate(train_idx)) if train_idx else np.zeros(0, dtype=np.int64)
    te = np.sort(np.concatenate(test_idx)) if test_idx else np.zeros(0, dtype=np.int64)
    return ds.subset(tr), ds.subset(te)


@dataclass
class Scaler:
    mu: np.ndarray
    sigma: np.ndarray

    def transform(self, windows: np.ndarray) -> np.ndarray:
        return (windows - self.mu) / self.sigma

    def to_dict(self) -> dict:
        return {"mu": self.mu.tolist(), "sigma": self.sigma.tolist()}

    @classmethod
    def from_dict(cls, d: Mapping) -> "Scaler":
        return cls(np.asarray(d["mu"], dtype=np.float64), np.asarray(d["sigma"], dtype=np.float64))


def fit_scaler(train: WindowedDataset) -> Scaler:
    """Per-feature mean and population std over every (window, step) position."""
    if len(train) == 0:
        raise ValueError("cannot fit a scaler on an empty dataset")
    flat = train.windows.reshape(-1, train.F)
    mu = flat.mean(axis=0)
    sigma = flat.std(axis=0)
    dead = sigma <= 1e-12
    if dead.any():
        warnings.warn(f"zero-variance feature(s) {np.flatnonzero(dead).tolist()}; sigma set to 1",
                      DataWarning, stacklevel=2)
        sigma = np.where(dead, 1.0, sigma)
    return Scaler(mu, sigma)


def apply_scaler(scaler: Scaler, ds: WindowedDataset) -> WindowedDataset:
    out = ds.subset(np.arange(len(ds)))
    out.windows = scaler.transform(ds.windows)
    return out


# ---------------------------------------------------------------- BorderlineSMOTE

def _knn(queries: np.ndarray, points: np.ndarray, k: int, exclude: np.ndarray | None = None,
         chunk: int = 256) -> np.ndarray:
    """Indices of the k nearest ``points`` for each query (Euclidean).

    Ties are broken by lower index. ``exclude[i]`` is an index of ``points``
    that query i may not return (its own position).
    """
    sq_p = (points * points).sum(axis=1)
    out = np.empty((len(queries), k), dtype=np.int64)
    for s in range(0, len(queries), chunk):
        q = queries[s:s + chunk]
        d2 = (q * q).sum(axis=1)[:, None] + sq_p[None, :] - 2.0 * (q @ points.T)
        np.maximum(d2, 0.0, out=d2)
        if exclude is not None:
            d2[np.arange(len(q)), exclude[s:s + chunk]] = np.inf
        out[s:s + chunk] = np.argsort(d2, axis=1, kind="stable")[:, :k]
    return out


def danger_set(flat: np.ndarray, labels: np.ndarray, cls: int, m_danger: int = 10) -> np.ndarray:
    """Indices of class members whose m nearest neighbours are more than half,
    but not all, from other classes."""
    members = np.flatnonzero(labels == cls)
    if len(members) == 0:
        return members
    m = min(m_danger, len(labels) - 1)
    nn = _knn(flat[members], flat, m, exclude=members)
    n_other = (labels[nn] != cls).sum(axis=1)
    return members[(n_other > m / 2) & (n_other < m)]


def borderline_smote(train: WindowedDataset, target_counts: Mapping[int, int] | None = None,
                     m_danger: int = 10, k_synth: int = 5, seed: int = 0) -> WindowedDataset:
    """Borderline-1 SMOTE over flattened windows; synthetic windows are appended."""
    rng = np.random.default_rng(seed)
    N = len(train)
    flat = train.windows.reshape(N, -1)
    counts = np.bincount(train.labels, minlength=len(CLASS_NAMES)) if N else np.zeros(len(CLASS_NAMES), int)
    if target_counts is None:
        majority = counts.max(initial=0)
        target_counts = {c: int(majority) for c in range(len(counts)) if 0 < counts[c] < majority}
    new_x, new_y, new_parents, new_mix = [], [], [], []
    for c in sorted(target_counts):
        n_c = int(counts[c]) if c < len(counts) else 0
        need = int(target_counts[c]) - n_c
        if need <= 0 or n_c == 0:
            continue
        if n_c < k_synth + 1:
            warnings.warn(f"class {c} has {n_c} samples (< k_synth+1); left to class weights",
                          DataWarning, stacklevel=2)
            continue
        members = np.flatnonzero(train.labels == c)
        seeds_ = danger_set(flat, train.labels, c, m_danger)
        if len(seeds_) == 0:
            warnings.warn(f"class {c} has an empty danger set; using plain SMOTE", DataWarning, stacklevel=2)
            seeds_ = members
        # same-class neighbours of each seed sample, as positions in ``members``
        pos = np.searchsorted(members, seeds_)
        nn_local = _knn(flat[seeds_], flat[members], k_synth, exclude=pos)
        base_pick = rng.integers(0, len(seeds_), size=need)
        nn_pick = rng.integers(0, k_synth, size=need)
        u = rng.random(need)
        base = seeds_[base_pick]
        nbr = members[nn_local[base_pick, nn_pick]]
        new_x.append(flat[base] + u[:, None] * (flat[nbr] - flat[base]))
        new_y.append(np.full(need, c))
        new_parents.append(np.stack([base, nbr], axis=1))
        new_mix.append(u)
    if not new_x:
        return train.subset(np.arange(N))
    xs = np.concatenate(new_x).reshape(-1, train.T, train.F)
    ys = np.concatenate(new_y)
    return WindowedDataset(
        np.concatenate([train.windows, xs]),
        np.concatenate([train.labels, ys]),
        np.concatenate([train.provenance, np.full(len(ys), SYNTHETIC, dtype=object)]),
        np.concatenate([train.parents, np.concatenate(new_parents)]),
        np.concatenate([train.mix, np.concatenate(new_mix)]),
    )


@dataclass
class ClassWeights:
    omega: dict[int, float] = field(default_factory=dict)

    def as_array(self, num_classes: int = len(CLASS_NAMES)) -> np.ndarray:
        # absent classes never occur as targets; 1.0 keeps the vector positive
        return np.array([self.omega.get(c, 1.0) for c in range(num_classes)])


def class_weights(train: WindowedDataset | Sequence[int]) -> ClassWeights:
    """omega_c = N_total / N_c for every class present."""
    labels = train.labels if isinstance(train, WindowedDataset) else np.asarray(train)
    total = len(labels)
    vals, cnts = np.unique(labels, return_counts=True)
    return ClassWeights({int(v): total / int(n) for v, n in zip(vals, cnts)})


# ---------------------------------------------------------------- pipeline

@dataclass
class PreparedData:
    train: WindowedDataset
    test: WindowedDataset
    scaler: Scaler
    weights: ClassWeights
    seed: int
    T: int
    raw_rows: int
    dedup_rows: int


def prepare(records: Sequence[CanRecord], T: int = 16, test_fraction: float = 0.2, seed: int = 0,
            smote: bool = True, target_counts: Mapping[int, int] | None = None,
            m_danger: int = 10, k_synth: int = 5) -> PreparedData:
    """dedup -> window -> split -> SMOTE (train only) -> scaler on augmented train -> transform both."""
    unique = deduplicate(records)
    X, y = select_features(unique)
    ds = make_windows(X, y, WindowConfig(T))
    train, test = stratified_split(ds, test_fraction, seed=int(rng_for(seed, "split").integers(2**31)))
    if smote:
        train = borderline_smote(train, target_counts, m_danger, k_synth,
                                 seed=int(rng_for(seed, "smote").integers(2**31)))
    scaler = fit_scaler(train)
    return PreparedData(apply_scaler(scaler, train), apply_scaler(scaler, test), scaler,
                        class_weights(train), seed, T, len(records), len(unique))


# ---------------------------------------------------------------- persistence
#
# <stem>.json  manifest: format, version, shape [N', T, F], class_map, labels,
#              provenance (list of tags), scaler {mu, sigma} or null, seed, extras
# <stem>.f32   windows as little-endian float32, C order

def save_dataset(ds: WindowedDataset, stem: str | Path, scaler: Scaler | None = None,
                 seed: int | None = None, extra: Mapping | None = None) -> tuple[Path, Path]:
    stem = Path(stem)
    stem.parent.mkdir(parents=True, exist_ok=True)
    blob = stem.with_suffix(".f32")
    manifest = stem.with_suffix(".json")
    ds.windows.astype("<f4").tofile(blob)
    meta = {
        "format": DATASET_FORMAT,
        "version": DATASET_VERSION,
        "shape": list(ds.windows.shape),
        "T": ds.T,
        "F": ds.F,
        "class_map": {name: i for i, name in enumerate(CLASS_NAMES)},
        "labels": ds.labels.tolist(),
        "provenance": [str(p) for p in ds.provenance],
        "provenance_counts": ds.provenance_counts(),
        "scaler": scaler.to_dict() if scaler is not None else None,
        "seed": seed,
        "blob": blob.name,
        **(dict(extra) if extra else {}),
    }
    manifest.write_text(json.dumps(meta))
    return manifest, blob


def load_dataset(manifest_path: str | Path) -> tuple[WindowedDataset, dict]:
    manifest_path = Path(manifest_path)
    meta = json.loads(manifest_path.read_text())
    if meta.get("format") != DATASET_FORMAT or meta.get("version") != DATASET_VERSION:
        raise ValueError(f"unsupported dataset manifest {meta.get('format')} v{meta.get('version')}")
    shape = tuple(meta["shape"])
    raw = np.fromfile(manifest_path.parent / meta["blob"], dtype="<f4")
    if raw.size != int(np.prod(shape)):
        raise ValueError(f"dataset blob holds {raw.size} values, manifest expects {int(np.prod(shape))}")
    windows = raw.reshape(shape).astype(np.float64)
    ds = WindowedDataset(windows, np.asarray(meta["labels"], dtype=np.int64),
                         np.asarray(meta["provenance"], dtype=object))
    return ds, meta
