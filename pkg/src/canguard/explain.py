"""Attention export and per-byte attribution (Kernel SHAP, permutation importance)."""

from __future__ import annotations

import csv
import hashlib
import warnings
from dataclasses import asdict, dataclass, field
from itertools import combinations
from math import comb
from pathlib import Path
from typing import Callable

import numpy as np

from .ingest import DATA_COLUMNS
from .model import CANGuardModel, predict
from .preprocess import WindowedDataset
from .training import compute_metrics

PredictFn = Callable[[np.ndarray], np.ndarray]


class UnsupportedConfigError(ValueError):
    pass


@dataclass
class AttentionTrace:
    window_id: int
    predicted_class: int
    weights: list[float]


def export_attention(model: CANGuardModel, windows: np.ndarray, path: str | Path | None = None
                     ) -> tuple[list[AttentionTrace], np.ndarray]:
    """Attention weights per window; optionally written as a windows x steps CSV heatmap."""
    if model.attention is None:
        raise UnsupportedConfigError("model was built without attention; nothing to export")
    probs, att = predict(model, windows)
    preds = probs.argmax(axis=1)
    traces = [AttentionTrace(i, int(preds[i]), att[i].tolist()) for i in range(len(att))]
    if path is not None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["window", "predicted", *[f"t{j}" for j in range(att.shape[1])]])
            for tr in traces:
                w.writerow([tr.window_id, tr.predicted_class, *[repr(v) for v in tr.weights]])
    return traces, att


def _as_predict_fn(model) -> PredictFn:
    if isinstance(model, CANGuardModel):
        return lambda x: predict(model, x)[0]
    return model


def shapley_kernel_weight(M: int, s: int) -> float:
    """(M-1) / (C(M, s) * s * (M - s)) for 0 < s < M."""
    return (M - 1) / (comb(M, s) * s * (M - s))


def _masked(window: np.ndarray, background: np.ndarray, masks: np.ndarray) -> np.ndarray:
    # masks: (n, M) booleans; True keeps the window's byte column
    return np.where(masks[:, None, :], window[None], background[None])


def kernel_shap(model, window: np.ndarray, background: np.ndarray, n_coalitions: int | None = None,
                seed: int = 0, target_class: int | None = None) -> np.ndarray:
    """Per-byte attributions for the predicted-class probability of ``window``.

    Each byte column is one player; masking it substitutes the background
    column at every time step. ``n_coalitions=None`` (or >= 2^M - 2)
    enumerates every coalition. The efficiency constraint is imposed exactly
    by eliminating the last player from the least-squares system.
    """
    f = _as_predict_fn(model)
    window = np.asarray(window, dtype=np.float64)
    T, M = window.shape
    background = np.broadcast_to(np.asarray(background, dtype=np.float64), (T, M))
    base = f(np.stack([window, background]))
    cls = int(np.argmax(base[0])) if target_class is None else target_class
    fx, fb = base[0, cls], base[1, cls]
    delta = fx - fb
    differs = ~np.all(window == background, axis=0)
    if not differs.any():
        return np.zeros(M)

    total = 2 ** M - 2
    if n_coalitions is not None and n_coalitions < 10:
        raise ValueError("n_coalitions must be at least 10")
    if n_coalitions is None or n_coalitions >= total:
        masks = np.array([[(k >> j) & 1 for j in range(M)] for k in range(1, 2 ** M - 1)], dtype=bool)
        weights = np.array([shapley_kernel_weight(M, int(m.sum())) for m in masks])
    else:
        rng = np.random.default_rng(seed)
        sizes = np.arange(1, M)
        p = np.array([(M - 1) / (s * (M - s)) for s in sizes])
        p /= p.sum()
        drawn = rng.choice(sizes, size=n_coalitions, p=p)
        masks = np.zeros((n_coalitions, M), dtype=bool)
        for i, s in enumerate(drawn):
            masks[i, rng.choice(M, size=s, replace=False)] = True
        weights = np.ones(n_coalitions)

    y = f(_masked(window, background, masks))[:, cls] - fb
    Z = masks.astype(np.float64)
    # phi_M = delta - sum_{j<M} phi_j
    A = Z[:, :-1] - Z[:, -1:]
    b = y - Z[:, -1] * delta
    Aw = A * weights[:, None]
    lhs = A.T @ Aw
    rhs = Aw.T @ b
    try:
        if np.linalg.cond(lhs) > 1e12:
            raise np.linalg.LinAlgError("ill-conditioned")
        head = np.linalg.solve(lhs, rhs)
    except np.linalg.LinAlgError:
        warnings.warn("singular Kernel SHAP system; using ridge regularisation", RuntimeWarning, stacklevel=2)
        head = np.linalg.solve(lhs + 1e-6 * np.eye(M - 1), rhs)
    return np.append(head, delta - head.sum())


def exact_shapley(f: Callable[[np.ndarray], float], M: int) -> np.ndarray:
    """Brute-force Shapley values of a set function over M players (boolean mask input)."""
    phi = np.zeros(M)
    for j in range(M):
        others = [i for i in range(M) if i != j]
        for s in range(M):
            w = 1.0 / (M * comb(M - 1, s))
            for S in combinations(others, s):
                mask = np.zeros(M, dtype=bool)
                mask[list(S)] = True
                without = f(mask)
                mask[j] = True
                phi[j] += w * (f(mask) - without)
    return phi


def permutation_importance(model, test_ds: WindowedDataset, n_repeats: int = 5, seed: int = 0) -> np.ndarray:
    """Drop in macro-F1 when one byte column is shuffled across windows."""
    if len(test_ds) == 0:
        raise ValueError("test set is empty")
    f = _as_predict_fn(model)
    X, y = test_ds.windows, test_ds.labels
    baseline = compute_metrics(y, f(X).argmax(axis=1)).f1_macro
    rng = np.random.default_rng(seed)
    out = np.zeros(X.shape[2])
    for j in range(X.shape[2]):
        scores = []
        for _ in range(n_repeats):
            perm = rng.permutation(len(X))
            Xp = X.copy()
            Xp[:, :, j] = X[perm, :, j]
            scores.append(compute_metrics(y, f(Xp).argmax(axis=1)).f1_macro)
        out[j] = baseline - float(np.mean(scores))
    return out


@dataclass
class AttributionReport:
    importance: dict[str, float]
    method: str
    sample_count: int
    seed: int
    background: str
    per_window: list[list[float]] = field(default_factory=list)

    def ranking(self) -> list[str]:
        return sorted(self.importance, key=lambda k: (-self.importance[k], k))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["ranking"] = self.ranking()
        return d

    def render(self, width: int = 40) -> str:
        top = max(self.importance.values(), default=0.0) or 1.0
        lines = [f"{self.method} importance ({self.sample_count} windows, seed {self.seed})"]
        for name, v in self.importance.items():
            lines.append(f"{name:<8}{'#' * int(round(width * max(v, 0.0) / top)):<{width}} {v:.6f}")
        return "\n".join(lines)


def _content_order(windows: np.ndarray) -> np.ndarray:
    keys = [hashlib.sha1(np.ascontiguousarray(w).tobytes()).hexdigest() for w in windows]
    return np.array(sorted(range(len(windows)), key=lambda i: keys[i]), dtype=np.int64)


def build_attribution_report(model, dataset: WindowedDataset, method: str = "kernel_shap",
                             n_samples: int = 100, seed: int = 0, background: np.ndarray | None = None,
                             n_coalitions: int | None = None, n_repeats: int = 5) -> AttributionReport:
    """Mean |phi| per byte over a seeded sample of windows, or permutation deltas.

    Windows are sampled from a content-hash ordering, so the same seed picks
    the same windows regardless of dataset order.
    """
    names = list(DATA_COLUMNS[:dataset.F])
    if method == "permutation":
        imp = permutation_importance(model, dataset, n_repeats, seed)
        return AttributionReport(dict(zip(names, imp.tolist())), method, len(dataset), seed, "n/a (shuffled columns)")
    if method != "kernel_shap":
        raise ValueError(f"unknown attribution method {method!r}")
    if background is None:
        background = dataset.windows.reshape(-1, dataset.F).mean(axis=0)
        bg_desc = "per-feature mean of the explained set"
    else:
        bg_desc = "caller-supplied reference"
    order = _content_order(dataset.windows)
    if n_samples < len(order):
        order = np.sort(np.random.default_rng(seed).choice(order, size=n_samples, replace=False))
        order = np.array(sorted(order, key=lambda i: hashlib.sha1(dataset.windows[i].tobytes()).hexdigest()))
    phis = np.array([kernel_shap(model, dataset.windows[i], background, n_coalitions, seed) for i in order])
    imp = np.abs(phis).mean(axis=0) if len(phis) else np.zeros(dataset.F)
    return AttributionReport(dict(zip(names, imp.tolist())), method, len(order), seed, bg_desc,
                             phis.tolist())
