"""Optimisation (Adam + global-norm clipping), the training loop with early
stopping and plateau learning-rate decay, classification metrics and the
four-row ablation harness."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Iterable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import NumericalInstabilityError, Parameter
from .ingest import CLASS_NAMES
from .layers import cross_entropy_weighted
from .model import CANGuardModel, ModelConfig, build, predict
from .preprocess import ClassWeights, PreparedData, WindowedDataset, stratified_split
from .seeding import derive_seed

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    learning_rate: float = 0.001
    batch_size: int = 64
    max_epochs: int = 50
    early_stop_patience: int = 10
    clip_norm: float = 1.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    validation_fraction: float = 0.1
    lr_factor: float = 0.5
    lr_patience: int = 5
    min_lr: float = 1e-5

    def validate(self) -> None:
        if self.early_stop_patience > self.max_epochs and self.max_epochs > 0:
            raise ValueError("early_stop_patience must not exceed max_epochs")
        if min(self.learning_rate, self.batch_size, self.clip_norm, self.eps) <= 0:
            raise ValueError("rates, batch size and clip norm must be positive")
        if self.max_epochs < 0:
            raise ValueError("max_epochs must be >= 0")


@dataclass
class TrainState:
    epoch: int = 0
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    lr: float = 0.001
    best_val_loss: float = math.inf
    best_epoch: int = -1
    epochs_since_improvement: int = 0
    epochs_since_lr_change: int = 0


def global_grad_norm(params: Iterable[Parameter]) -> float:
    return math.sqrt(sum(float((p.grad * p.grad).sum()) for p in params))


def clip_gradients(params: Sequence[Parameter], clip_norm: float) -> float:
    """Scale all gradients by clip_norm / norm when the global norm exceeds clip_norm.
    Returns the pre-clip norm."""
    norm = global_grad_norm(params)
    if not math.isfinite(norm):
        raise NumericalInstabilityError("non-finite gradient norm")
    if norm > clip_norm:
        factor = clip_norm / norm
        for p in params:
            p.grad *= factor
    return norm


def adam_step(params: Sequence[Parameter], state: TrainState, config: TrainConfig) -> float:
    """One clipped, bias-corrected Adam update in place. Returns the pre-clip gradient norm."""
    norm = clip_gradients(params, config.clip_norm)
    state.step += 1
    t = state.step
    b1, b2 = config.beta1, config.beta2
    c1, c2 = 1.0 - b1 ** t, 1.0 - b2 ** t
    for p in params:
        m = state.m.setdefault(p.name, np.zeros_like(p.data))
        v = state.v.setdefault(p.name, np.zeros_like(p.data))
        g = p.grad
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data -= state.lr * (m / c1) / (np.sqrt(v / c2) + config.eps)
    return norm


# ---------------------------------------------------------------- metrics

@dataclass
class MetricsReport:
    accuracy: float
    precision_macro: float
    recall_macro: float
    f1_macro: float
    precision_weighted: float
    recall_weighted: float
    f1_weighted: float
    per_class: dict[str, dict[str, float]]
    confusion: list[list[int]]
    support: list[int]
    zero_division: list[str]
    labels_used: list[int]

    @property
    def headline(self) -> dict[str, float]:
        return {"accuracy": self.accuracy, "precision": self.precision_weighted,
                "recall": self.recall_weighted, "f1": self.f1_weighted}

    def to_dict(self) -> dict:
        d = asdict(self)
        d["headline"] = self.headline
        return d

    def render(self) -> str:
        lines = [f"accuracy {self.accuracy:.4f}",
                 f"weighted  P {self.precision_weighted:.4f}  R {self.recall_weighted:.4f}  F1 {self.f1_weighted:.4f}",
                 f"macro     P {self.precision_macro:.4f}  R {self.recall_macro:.4f}  F1 {self.f1_macro:.4f}",
                 f"{'class':<16}{'prec':>8}{'recall':>8}{'f1':>8}{'support':>9}"]
        for i, name in enumerate(CLASS_NAMES[:len(self.support)]):
            pc = self.per_class[name]
            lines.append(f"{name:<16}{pc['precision']:>8.4f}{pc['recall']:>8.4f}{pc['f1']:>8.4f}{self.support[i]:>9d}")
        return "\n".join(lines)


def confusion_matrix(y_true, y_pred, num_classes: int = len(CLASS_NAMES)) -> np.ndarray:
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(cm, (np.asarray(y_true, dtype=np.int64), np.asarray(y_pred, dtype=np.int64)), 1)
    return cm


def compute_metrics(y_true, y_pred, num_classes: int = len(CLASS_NAMES)) -> MetricsReport:
    """One-vs-rest precision/recall/F1 per class with macro and support-weighted means.

    Macro averages run over classes that occur in either the truth or the
    predictions. Undefined ratios (0/0) are reported as 0 and listed in
    ``zero_division``.
    """
    y_true = np.asarray(y_true, dtype=np.int64)
    y_pred = np.asarray(y_pred, dtype=np.int64)
    if len(y_true) == 0:
        raise ValueError("cannot compute metrics on an empty set")
    cm = confusion_matrix(y_true, y_pred, num_classes)
    tp = np.diag(cm).astype(float)
    fp = cm.sum(axis=0) - tp
    fn = cm.sum(axis=1) - tp
    support = cm.sum(axis=1)
    flags = []
    prec, rec, f1 = np.zeros(num_classes), np.zeros(num_classes), np.zeros(num_classes)
    for c in range(num_classes):
        name = CLASS_NAMES[c] if c < len(CLASS_NAMES) else str(c)
        if tp[c] + fp[c] > 0:
            prec[c] = tp[c] / (tp[c] + fp[c])
        else:
            flags.append(f"{name}:precision")
        if tp[c] + fn[c] > 0:
            rec[c] = tp[c] / (tp[c] + fn[c])
        else:
            flags.append(f"{name}:recall")
        if prec[c] + rec[c] > 0:
            f1[c] = 2 * prec[c] * rec[c] / (prec[c] + rec[c])
        else:
            flags.append(f"{name}:f1")
    used = np.flatnonzero((support > 0) | (cm.sum(axis=0) > 0))
    names = [CLASS_NAMES[c] if c < len(CLASS_NAMES) else str(c) for c in range(num_classes)]
    n_total = int(support.sum())

    def macro(v):
        return math.fsum(float(v[c]) for c in used) / len(used)

    def weighted(v):
        return math.fsum(int(support[c]) * float(v[c]) for c in range(num_classes)) / n_total

    return MetricsReport(
        accuracy=float(tp.sum()) / n_total,
        precision_macro=macro(prec),
        recall_macro=macro(rec),
        f1_macro=macro(f1),
        precision_weighted=weighted(prec),
        recall_weighted=weighted(rec),
        f1_weighted=weighted(f1),
        per_class={names[c]: {"precision": float(prec[c]), "recall": float(rec[c]), "f1": float(f1[c]),
                              "support": int(support[c])} for c in range(num_classes)},
        confusion=cm.tolist(),
        support=support.tolist(),
        zero_division=flags,
        labels_used=used.tolist(),
    )


def evaluate(model: CANGuardModel, test_ds: WindowedDataset) -> MetricsReport:
    if len(test_ds) == 0:
        raise ValueError("test set is empty")
    probs, _ = predict(model, test_ds.windows)
    return compute_metrics(test_ds.labels, probs.argmax(axis=1), model.config.num_classes)


# ---------------------------------------------------------------- training loop

@dataclass
class History:
    epochs: list[dict] = field(default_factory=list)
    best_epoch: int = -1
    best_val_loss: float = math.inf
    stopped_early: bool = False

    def to_dict(self) -> dict:
        return asdict(self)


def _snapshot(model: CANGuardModel) -> tuple[dict, dict]:
    return ({p.name: p.data.copy() for p in model.parameters()},
            {k: v.copy() for k, v in model.buffers().items()})


def _restore(model: CANGuardModel, snap: tuple[dict, dict]) -> None:
    params, bufs = snap
    for p in model.parameters():
        p.data[...] = params[p.name]
    for k, v in bufs.items():
        model.set_buffer(k, v)


def _loss_and_accuracy(model: CANGuardModel, ds: WindowedDataset, weights: np.ndarray) -> tuple[float, float]:
    probs, _ = predict(model, ds.windows)
    rows = np.arange(len(ds))
    nll = -(weights[ds.labels] * np.log(np.maximum(probs[rows, ds.labels], 1e-12))).mean()
    reg = sum(p.l2_coefficient / 2 * float((p.data ** 2).sum()) for p in model.parameters())
    return float(nll + reg), float((probs.argmax(axis=1) == ds.labels).mean())


def train(model: CANGuardModel, train_ds: WindowedDataset, config: TrainConfig,
          class_weights: ClassWeights | np.ndarray | None = None,
          val_ds: WindowedDataset | None = None) -> tuple[CANGuardModel, History]:
    """Mini-batch training; restores the best-validation parameters at the end."""
    config.validate()
    history = History()
    if config.max_epochs == 0:
        return model, history
    if len(train_ds) == 0:
        raise ValueError("training set is empty")
    K = model.config.num_classes
    if class_weights is None:
        weights = np.ones(K)
    elif isinstance(class_weights, ClassWeights):
        weights = class_weights.as_array(K)
    else:
        weights = np.asarray(class_weights, dtype=float)
    if val_ds is None and config.validation_fraction > 0:
        train_ds, val_ds = stratified_split(train_ds, config.validation_fraction,
                                            seed=derive_seed(config.seed, "validation"))
        if len(val_ds) == 0:
            val_ds = None
    rng = np.random.default_rng(derive_seed(config.seed, "train"))
    params = model.parameters()
    state = TrainState(lr=config.learning_rate)
    best = _snapshot(model)
    N = len(train_ds)
    for epoch in range(config.max_epochs):
        order = rng.permutation(N)
        total_loss = 0.0
        correct = 0
        for s in range(0, N, config.batch_size):
            idx = order[s:s + config.batch_size]
            for p in params:
                p.grad[...] = 0.0
            probs, _ = model.forward(train_ds.windows[idx], training=True, rng=rng)
            loss = cross_entropy_weighted(probs, train_ds.labels[idx], weights, params)
            ad.backward(loss)
            adam_step(params, state, config)
            total_loss += loss.item() * len(idx)
            correct += int((probs.data.argmax(axis=1) == train_ds.labels[idx]).sum())
        record = {"epoch": epoch, "train_loss": total_loss / N, "train_accuracy": correct / N, "lr": state.lr}
        if val_ds is not None:
            record["val_loss"], record["val_accuracy"] = _loss_and_accuracy(model, val_ds, weights)
        monitor = record.get("val_loss", record["train_loss"])
        history.epochs.append(record)
        state.epoch = epoch + 1
        log.info("epoch %d %s", epoch, {k: round(v, 6) for k, v in record.items() if k != "epoch"})
        if monitor < state.best_val_loss:
            state.best_val_loss, state.best_epoch = monitor, epoch
            state.epochs_since_improvement = 0
            state.epochs_since_lr_change = 0
            best = _snapshot(model)
        else:
            state.epochs_since_improvement += 1
            state.epochs_since_lr_change += 1
            if state.epochs_since_lr_change >= config.lr_patience and state.lr > config.min_lr:
                state.lr = max(state.lr * config.lr_factor, config.min_lr)
                state.epochs_since_lr_change = 0
            if state.epochs_since_improvement >= config.early_stop_patience:
                history.stopped_early = True
                break
    _restore(model, best)
    history.best_epoch, history.best_val_loss = state.best_epoch, state.best_val_loss
    model.metadata.update({"epochs_run": state.epoch, "best_epoch": state.best_epoch,
                           "best_val_loss": state.best_val_loss, "train_seed": config.seed})
    return model, history


# ---------------------------------------------------------------- ablation

ABLATION_ROWS = ((True, False, False), (False, True, False), (True, True, False), (True, True, True))


@dataclass
class AblationRow:
    number: int
    use_cnn: bool
    use_gru: bool
    use_attention: bool
    report: MetricsReport
    n_parameters: int
    epochs_run: int

    def to_dict(self) -> dict:
        return {"no": self.number, "cnn": self.use_cnn, "gru": self.use_gru, "attention": self.use_attention,
                "n_parameters": self.n_parameters, "epochs_run": self.epochs_run, "metrics": self.report.to_dict()}


def run_ablation(data: PreparedData, base: ModelConfig, train_config: TrainConfig) -> list[AblationRow]:
    """Train and evaluate the four component combinations on one shared split."""
    rows = []
    for i, (cnn, gru, attn) in enumerate(ABLATION_ROWS, start=1):
        cfg = replace(base, use_cnn=cnn, use_gru=gru, use_attention=attn)
        model = build(cfg)
        model.scaler = data.scaler
        model, hist = train(model, data.train, train_config, data.weights)
        report = evaluate(model, data.test)
        log.info("ablation row %d done: %s", i, report.headline)
        rows.append(AblationRow(i, cnn, gru, attn, report, model.n_parameters(), len(hist.epochs)))
    return rows


def render_ablation_table(rows: Sequence[AblationRow]) -> str:
    head = f"{'No.':<4}{'CNN':^6}{'GRU':^6}{'Attn.':^7}{'Accuracy':>10}{'Precision':>11}{'Recall':>9}{'F1-Score':>10}"
    lines = [head, "-" * len(head)]
    mark = lambda on: "x" if on else ""  # noqa: E731
    for r in rows:
        h = r.report.headline
        lines.append(f"{r.number:<4}{mark(r.use_cnn):^6}{mark(r.use_gru):^6}{mark(r.use_attention):^7}"
                     f"{h['accuracy']:>10.4f}{h['precision']:>11.4f}{h['recall']:>9.4f}{h['f1']:>10.4f}")
    return "\n".join(lines)
