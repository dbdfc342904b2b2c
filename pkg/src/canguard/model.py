"""CNN -> stacked BiGRU -> attention -> dense classifier, with ablation switches
and a binary checkpoint format."""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, ShapeError, Tensor
from .ingest import CLASS_NAMES
from .layers import (AttentionLayer, BatchNorm1DLayer, BiGRULayer, Conv1DLayer, DenseLayer, Dropout,
                     attention_pool, maxpool1d)
from .preprocess import Scaler

CHECKPOINT_VERSION = 1
_MAGIC = b"CANGUARD"


class CheckpointError(ValueError):
    pass


@dataclass
class ModelConfig:
    use_cnn: bool = True
    use_gru: bool = True
    use_attention: bool = True
    conv_filters: list[int] = field(default_factory=lambda: [64, 128, 256])
    kernel_size: int = 3
    pool: int = 2
    dropout: float = 0.3
    gru_units: list[int] = field(default_factory=lambda: [128, 64])
    recurrent_dropout: float = 0.3
    dense_units: list[int] = field(default_factory=lambda: [256, 128])
    l2_lambda: float = 0.001
    num_classes: int = 6
    T: int = 16
    F: int = 8
    single_pool: bool = False
    seed: int = 0

    def validate(self) -> None:
        if not (self.use_cnn or self.use_gru):
            raise ValueError("at least one of use_cnn / use_gru must be enabled")
        dims = [self.kernel_size, self.pool, self.num_classes, self.T, self.F,
                *self.conv_filters, *self.gru_units, *self.dense_units]
        if any(int(d) <= 0 for d in dims):
            raise ValueError("all dimensions must be positive")
        if len(self.dense_units) != 2:
            raise ValueError("the classifier head has exactly two hidden dense layers")
        if self.use_cnn and self.cnn_time_steps() < 1:
            raise ShapeError(f"T={self.T} too short for {self.n_pools()} pooling stage(s) of size {self.pool}")

    def n_pools(self) -> int:
        if not self.use_cnn:
            return 0
        return 1 if self.single_pool else len(self.conv_filters)

    def cnn_time_steps(self) -> int:
        t = self.T
        for _ in range(self.n_pools()):
            t //= self.pool
        return t

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)

    def config_hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()


def expected_shapes(config: ModelConfig, batch: int) -> dict[str, tuple[int, ...]]:
    """Closed-form intermediate shapes of the forward pass."""
    shapes: dict[str, tuple[int, ...]] = {"input": (batch, config.T, config.F)}
    t, c = config.T, config.F
    if config.use_cnn:
        for i, f in enumerate(config.conv_filters):
            c = f
            if not config.single_pool or i == len(config.conv_filters) - 1:
                t //= config.pool
            shapes[f"cnn{i}"] = (batch, t, c)
    if config.use_gru:
        for i, h in enumerate(config.gru_units):
            c = 2 * h
            shapes[f"bigru{i}"] = (batch, t, c)
    if config.use_attention:
        shapes["attention_weights"] = (batch, t)
        shapes["pooled"] = (batch, c)
    elif config.use_gru:
        shapes["pooled"] = (batch, c)
    else:
        shapes["pooled"] = (batch, t * c)
    shapes["dense0"] = (batch, config.dense_units[0])
    shapes["dense1"] = (batch, config.dense_units[1])
    shapes["output"] = (batch, config.num_classes)
    return shapes


class CANGuardModel:
    def __init__(self, config: ModelConfig):
        config.validate()
        self.config = config
        rng = np.random.default_rng(config.seed)
        self.conv: list[Conv1DLayer] = []
        self.bn: list[BatchNorm1DLayer] = []
        self.drop = Dropout(config.dropout)
        c = config.F
        if config.use_cnn:
            for i, f in enumerate(config.conv_filters):
                self.conv.append(Conv1DLayer(f"conv{i}", c, f, config.kernel_size, "same", rng))
                self.bn.append(BatchNorm1DLayer(f"bn{i}", f))
                c = f
        t = config.cnn_time_steps() if config.use_cnn else config.T
        self.gru: list[BiGRULayer] = []
        if config.use_gru:
            for i, h in enumerate(config.gru_units):
                self.gru.append(BiGRULayer(f"bigru{i}", c, h, config.dropout, config.recurrent_dropout, rng))
                c = 2 * h
        self.attention = AttentionLayer("attention", c, rng) if config.use_attention else None
        pooled = c if (config.use_attention or config.use_gru) else t * c
        d0, d1 = config.dense_units
        self.dense0 = DenseLayer("dense0", pooled, d0, "relu", rng=rng)
        self.dense1 = DenseLayer("dense1", d0, d1, "relu", config.l2_lambda, rng)
        self.out = DenseLayer("output", d1, config.num_classes, "softmax", rng=rng)
        self.scaler: Scaler | None = None
        self.metadata: dict[str, Any] = {}
        self.last_shapes: dict[str, tuple[int, ...]] = {}
        names = [p.name for p in self.parameters()]
        assert len(names) == len(set(names)), "parameter names must be unique"

    def parameters(self) -> list[Parameter]:
        params: list[Parameter] = []
        for conv, bn in zip(self.conv, self.bn):
            params += conv.parameters() + bn.parameters()
        for g in self.gru:
            params += g.parameters()
        if self.attention is not None:
            params += self.attention.parameters()
        for d in (self.dense0, self.dense1, self.out):
            params += d.parameters()
        return params

    def buffers(self) -> dict[str, np.ndarray]:
        out = {}
        for i, bn in enumerate(self.bn):
            out[f"bn{i}.running_mean"] = bn.running_mean
            out[f"bn{i}.running_var"] = bn.running_var
        return out

    def set_buffer(self, name: str, value: np.ndarray) -> None:
        layer, attr = name.split(".")
        setattr(self.bn[int(layer[2:])], attr, np.array(value, dtype=np.float64))

    def n_parameters(self) -> int:
        return int(sum(p.data.size for p in self.parameters()))

    def forward(self, x, training: bool = False, rng: np.random.Generator | None = None
                ) -> tuple[Tensor, Tensor | None]:
        """Returns (class probabilities (B, K), attention weights (B, T') or None)."""
        cfg = self.config
        x = x if isinstance(x, Tensor) else Tensor(x)
        if x.ndim != 3 or x.shape[1:] != (cfg.T, cfg.F):
            raise ShapeError(f"expected input (B, {cfg.T}, {cfg.F}), got {x.shape}")
        if training and rng is None:
            rng = np.random.default_rng(0)
        B = x.shape[0]
        shapes = {"input": x.shape}
        h = x
        n = len(self.conv)
        for i, (conv, bn) in enumerate(zip(self.conv, self.bn)):
            h = bn.forward(ad.relu(conv.forward(h)), training)
            if not cfg.single_pool or i == n - 1:
                h = self.drop.forward(maxpool1d(h, cfg.pool), training, rng)
            shapes[f"cnn{i}"] = h.shape
        for i, g in enumerate(self.gru):
            h = g.forward(h, training, rng)
            shapes[f"bigru{i}"] = h.shape
        alpha = None
        if self.attention is not None:
            pooled, alpha = attention_pool(self.attention, h)
            shapes["attention_weights"] = alpha.shape
        elif self.gru:
            pooled = ad.take(h, h.shape[1] - 1, axis=1)
        else:
            pooled = ad.reshape(h, (B, -1))
        shapes["pooled"] = pooled.shape
        d0 = self.dense0.forward(pooled)
        shapes["dense0"] = d0.shape
        d1 = self.drop.forward(self.dense1.forward(d0), training, rng)
        shapes["dense1"] = d1.shape
        probs = self.out.forward(d1)
        shapes["output"] = probs.shape
        self.last_shapes = shapes
        return probs, alpha


Model = CANGuardModel


def build(config: ModelConfig) -> CANGuardModel:
    return CANGuardModel(config)


def predict(model: CANGuardModel, windows, batch_size: int = 512) -> tuple[np.ndarray, np.ndarray | None]:
    """Inference-mode probabilities and attention weights (if the model has attention)."""
    windows = np.asarray(windows.data if isinstance(windows, Tensor) else windows, dtype=np.float64)
    cfg = model.config
    if windows.ndim != 3 or windows.shape[1:] != (cfg.T, cfg.F):
        raise ShapeError(f"expected windows (B, {cfg.T}, {cfg.F}), got {windows.shape}")
    probs, att = [], []
    with ad.no_grad():
        for s in range(0, len(windows), batch_size):
            p, a = model.forward(windows[s:s + batch_size], training=False)
            probs.append(p.data)
            if a is not None:
                att.append(a.data)
    if not probs:
        t_att = cfg.cnn_time_steps() if cfg.use_cnn else cfg.T
        return np.zeros((0, cfg.num_classes)), (np.zeros((0, t_att)) if model.attention else None)
    return np.concatenate(probs), (np.concatenate(att) if att else None)


# ---------------------------------------------------------------- checkpoints
#
# Byte layout:
#   8 bytes   magic b"CANGUARD"
#   8 bytes   little-endian uint64 manifest length n
#   n bytes   UTF-8 JSON manifest (sorted keys)
#   rest      little-endian float32 blob; every tensor at manifest offset (in floats)

def _manifest(model: CANGuardModel, metadata: dict | None) -> tuple[dict, np.ndarray]:
    entries, chunks, offset = [], [], 0
    tensors = [(p.name, p.data, "parameter") for p in model.parameters()]
    tensors += [(k, v, "buffer") for k, v in model.buffers().items()]
    for name, arr, kind in tensors:
        entries.append({"name": name, "kind": kind, "shape": list(arr.shape), "offset": offset,
                        "count": int(arr.size)})
        chunks.append(arr.astype("<f4").reshape(-1))
        offset += arr.size
    blob = np.concatenate(chunks) if chunks else np.zeros(0, dtype="<f4")
    manifest = {
        "format_version": CHECKPOINT_VERSION,
        "config": model.config.to_dict(),
        "config_hash": model.config.config_hash(),
        "tensors": entries,
        "blob_floats": int(blob.size),
        "scaler": model.scaler.to_dict() if model.scaler is not None else None,
        "class_map": {name: i for i, name in enumerate(CLASS_NAMES)},
        "metadata": metadata if metadata is not None else model.metadata,
    }
    return manifest, blob


def save(model: CANGuardModel, path: str | Path, metadata: dict | None = None) -> None:
    manifest, blob = _manifest(model, metadata)
    head = json.dumps(manifest, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<Q", len(head)))
        fh.write(head)
        fh.write(blob.tobytes())


def load(path: str | Path, expected_config: ModelConfig | None = None) -> CANGuardModel:
    raw = Path(path).read_bytes()
    if raw[:8] != _MAGIC or len(raw) < 16:
        raise CheckpointError("not a checkpoint file")
    (n,) = struct.unpack("<Q", raw[8:16])
    if 16 + n > len(raw):
        raise CheckpointError("truncated manifest")
    manifest = json.loads(raw[16:16 + n].decode("utf-8"))
    if manifest.get("format_version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"checkpoint version {manifest.get('format_version')} != {CHECKPOINT_VERSION}")
    config = ModelConfig.from_dict(manifest["config"])
    if config.config_hash() != manifest["config_hash"]:
        raise CheckpointError("config hash does not match the stored config")
    if expected_config is not None and expected_config.config_hash() != manifest["config_hash"]:
        raise CheckpointError("checkpoint was written for a different model configuration")
    blob_bytes = raw[16 + n:]
    if len(blob_bytes) != 4 * manifest["blob_floats"]:
        raise CheckpointError(f"corrupted blob: {len(blob_bytes)} bytes, expected {4 * manifest['blob_floats']}")
    blob = np.frombuffer(blob_bytes, dtype="<f4")
    covered = 0
    for e in sorted(manifest["tensors"], key=lambda e: e["offset"]):
        if e["offset"] != covered:
            raise CheckpointError("manifest offsets overlap or leave gaps")
        covered += e["count"]
    if covered != blob.size:
        raise CheckpointError("manifest does not cover the blob exactly")
    model = CANGuardModel(config)
    params = {p.name: p for p in model.parameters()}
    for e in manifest["tensors"]:
        values = blob[e["offset"]:e["offset"] + e["count"]].astype(np.float64).reshape(e["shape"])
        if e["kind"] == "parameter":
            if e["name"] not in params or params[e["name"]].shape != tuple(e["shape"]):
                raise CheckpointError(f"parameter {e['name']} does not fit the model")
            params[e["name"]].data = values
        else:
            model.set_buffer(e["name"], values)
    if manifest.get("scaler"):
        model.scaler = Scaler.from_dict(manifest["scaler"])
    model.metadata = manifest.get("metadata") or {}
    return model
