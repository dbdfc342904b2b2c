"""Neural layers built on the autodiff core.

Layers own their :class:`Parameter` objects and expose ``forward``. Stochastic
layers take an explicit ``numpy.random.Generator`` so that a seeded forward
pass is reproducible.
"""

from __future__ import annotations

from typing import Iterable

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, ShapeError, Tensor


def glorot_uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


class Layer:
    def parameters(self) -> list[Parameter]:
        return []


class Conv1DLayer(Layer):
    def __init__(self, name: str, in_channels: int, out_channels: int, kernel_size: int = 3,
                 padding: str = "same", rng: np.random.Generator | None = None):
        if padding == "same" and kernel_size % 2 == 0:
            raise ValueError("same padding requires an odd kernel_size")
        rng = rng or np.random.default_rng(0)
        self.in_channels, self.out_channels = in_channels, out_channels
        self.kernel_size, self.padding = kernel_size, padding
        shape = (out_channels, in_channels, kernel_size)
        self.kernel = Parameter(
            glorot_uniform(rng, shape, in_channels * kernel_size, out_channels * kernel_size),
            f"{name}.kernel",
        )
        self.bias = Parameter(np.zeros(out_channels), f"{name}.bias")

    def parameters(self):
        return [self.kernel, self.bias]

    def output_length(self, length: int) -> int:
        return length if self.padding == "same" else length - self.kernel_size + 1

    def forward(self, x: Tensor) -> Tensor:
        return ad.conv1d(x, self.kernel, self.bias, self.padding)


def conv1d_forward(layer: Conv1DLayer, x: Tensor) -> Tensor:
    return layer.forward(x)


class BatchNorm1DLayer(Layer):
    """Per-channel normalization over the batch and time axes."""

    def __init__(self, name: str, channels: int, momentum: float = 0.9, eps: float = 1e-5):
        if not 0 < momentum < 1:
            raise ValueError("momentum must lie in (0, 1)")
        self.gamma = Parameter(np.ones(channels), f"{name}.gamma")
        self.beta = Parameter(np.zeros(channels), f"{name}.beta")
        self.running_mean = np.zeros(channels)
        self.running_var = np.ones(channels)
        self.momentum, self.eps = momentum, eps

    def parameters(self):
        return [self.gamma, self.beta]

    def forward(self, x: Tensor, training: bool) -> Tensor:
        if training:
            out, mu, var = ad.batchnorm_train(x, self.gamma, self.beta, self.eps)
            m = self.momentum
            self.running_mean = m * self.running_mean + (1 - m) * mu
            self.running_var = m * self.running_var + (1 - m) * var
            return out
        inv = 1.0 / np.sqrt(self.running_var + self.eps)
        return ad.affine_channel(x, inv, self.gamma, self.running_mean, self.beta)


def maxpool1d(x: Tensor, pool: int = 2) -> Tensor:
    return ad.maxpool1d(x, pool)


class Dropout(Layer):
    """Inverted dropout: scaled by 1/(1-p) in training, identity otherwise."""

    def __init__(self, rate: float):
        if not 0 <= rate < 1:
            raise ValueError("dropout rate must lie in [0, 1)")
        self.rate = rate

    def forward(self, x: Tensor, training: bool, rng: np.random.Generator | None) -> Tensor:
        if not training or self.rate == 0:
            return x
        return ad.mul_const(x, dropout_mask(rng, x.shape, self.rate))


def dropout_mask(rng: np.random.Generator, shape, rate: float) -> np.ndarray:
    return (rng.random(shape) >= rate) / (1.0 - rate)


class GRUCell(Layer):
    """Gated recurrent unit with the reset gate applied before the candidate projection.

    z = sigmoid(x Wxz + h Whz + bz)
    r = sigmoid(x Wxr + h Whr + br)
    c = tanh(x Wxh + (r * h) Whh + bh)
    h' = (1 - z) * c + z * h
    """

    GATES = ("z", "r", "h")

    def __init__(self, name: str, input_size: int, hidden_size: int, dropout: float = 0.0,
                 recurrent_dropout: float = 0.0, rng: np.random.Generator | None = None):
        rng = rng or np.random.default_rng(0)
        self.input_size, self.hidden_size = input_size, hidden_size
        self.dropout, self.recurrent_dropout = dropout, recurrent_dropout
        H = hidden_size
        self.wx = {g: Parameter(glorot_uniform(rng, (input_size, H), input_size, H), f"{name}.wx_{g}")
                   for g in self.GATES}
        self.wh = {g: Parameter(glorot_uniform(rng, (H, H), H, H), f"{name}.wh_{g}") for g in self.GATES}
        self.b = {g: Parameter(np.zeros(H), f"{name}.b_{g}") for g in self.GATES}

    def parameters(self):
        out = []
        for g in self.GATES:
            out += [self.wx[g], self.wh[g], self.b[g]]
        return out


def gru_sequence(cell: GRUCell, x: Tensor, direction: str = "forward", training: bool = False,
                 rng: np.random.Generator | None = None) -> Tensor:
    """Run ``cell`` over (B, T, C) from a zero initial state; returns (B, T, H)."""
    B, T, C = x.shape
    if C != cell.input_size:
        raise ShapeError(f"GRU input size mismatch: got {C}, cell expects {cell.input_size}")
    if direction not in ("forward", "backward"):
        raise ValueError(f"unknown direction {direction!r}")
    H = cell.hidden_size
    if direction == "backward":
        x = ad.flip(x, axis=1)
    if training and cell.dropout > 0:
        mask = dropout_mask(rng, (B, 1, C), cell.dropout)
        x = ad.mul_const(x, np.broadcast_to(mask, (B, T, C)))
    rec_mask = None
    if training and cell.recurrent_dropout > 0:
        rec_mask = dropout_mask(rng, (B, H), cell.recurrent_dropout)
    proj = {g: ad.add(ad.matmul(x, cell.wx[g]), cell.b[g]) for g in cell.GATES}
    h = Tensor(np.zeros((B, H)))
    outs = []
    for t in range(T):
        hd = ad.mul_const(h, rec_mask) if rec_mask is not None else h
        z = ad.sigmoid(ad.add(ad.take(proj["z"], t, axis=1), ad.matmul(hd, cell.wh["z"])))
        r = ad.sigmoid(ad.add(ad.take(proj["r"], t, axis=1), ad.matmul(hd, cell.wh["r"])))
        cand = ad.tanh(ad.add(ad.take(proj["h"], t, axis=1), ad.matmul(ad.mul(r, hd), cell.wh["h"])))
        h = ad.add(ad.mul(ad.one_minus(z), cand), ad.mul(z, h))
        outs.append(h)
    out = ad.stack(outs, axis=1)
    if direction == "backward":
        out = ad.flip(out, axis=1)
    return out


class BiGRULayer(Layer):
    def __init__(self, name: str, input_size: int, hidden_size: int, dropout: float = 0.0,
                 recurrent_dropout: float = 0.0, rng: np.random.Generator | None = None):
        rng = rng or np.random.default_rng(0)
        self.fwd = GRUCell(f"{name}.fwd", input_size, hidden_size, dropout, recurrent_dropout, rng)
        self.bwd = GRUCell(f"{name}.bwd", input_size, hidden_size, dropout, recurrent_dropout, rng)
        self.hidden_size = hidden_size

    def parameters(self):
        return self.fwd.parameters() + self.bwd.parameters()

    def forward(self, x: Tensor, training: bool = False, rng: np.random.Generator | None = None) -> Tensor:
        return bigru(self.fwd, self.bwd, x, training, rng)


def bigru(cell_fwd: GRUCell, cell_bwd: GRUCell, x: Tensor, training: bool = False,
          rng: np.random.Generator | None = None) -> Tensor:
    f = gru_sequence(cell_fwd, x, "forward", training, rng)
    b = gru_sequence(cell_bwd, x, "backward", training, rng)
    return ad.concat([f, b], axis=-1)


class AttentionLayer(Layer):
    """Scalar additive score per step, softmax over time, weighted sum of states."""

    def __init__(self, name: str, hidden_size: int, rng: np.random.Generator | None = None):
        rng = rng or np.random.default_rng(0)
        self.w_a = Parameter(glorot_uniform(rng, (hidden_size, 1), hidden_size, 1), f"{name}.w_a")
        self.b_a = Parameter(np.zeros(1), f"{name}.b_a")

    def parameters(self):
        return [self.w_a, self.b_a]

    def forward(self, h: Tensor) -> tuple[Tensor, Tensor]:
        return attention_pool(self, h)


def attention_pool(layer: AttentionLayer, h: Tensor) -> tuple[Tensor, Tensor]:
    B, T, H = h.shape
    if T < 1:
        raise ShapeError("attention needs at least one time step")
    if layer.w_a.shape[0] != H:
        raise ShapeError(f"attention expects hidden size {layer.w_a.shape[0]}, got {H}")
    scores = ad.tanh(ad.add(ad.matmul(h, layer.w_a), layer.b_a))
    alpha = ad.softmax(ad.reshape(scores, (B, T)), axis=-1)
    return ad.time_weighted_sum(alpha, h), alpha


class DenseLayer(Layer):
    """Fully connected layer. The weight is stored (in, out) so that y = x W + b."""

    def __init__(self, name: str, in_features: int, out_features: int, activation: str = "none",
                 l2_coefficient: float = 0.0, rng: np.random.Generator | None = None):
        if activation not in ("relu", "softmax", "none"):
            raise ValueError(f"unknown activation {activation!r}")
        rng = rng or np.random.default_rng(0)
        self.W = Parameter(glorot_uniform(rng, (in_features, out_features), in_features, out_features),
                           f"{name}.W", l2_coefficient)
        self.b = Parameter(np.zeros(out_features), f"{name}.b")
        self.activation = activation

    def parameters(self):
        return [self.W, self.b]

    def forward(self, x: Tensor) -> Tensor:
        y = ad.add(ad.matmul(x, self.W), self.b)
        if self.activation == "relu":
            return ad.relu(y)
        if self.activation == "softmax":
            return ad.softmax(y, axis=-1)
        return y


def l2_penalty(params: Iterable[Parameter]) -> Tensor | None:
    """sum_p (lambda_p / 2) * ||p||^2 over parameters with a nonzero coefficient."""
    total = None
    for p in params:
        if p.l2_coefficient > 0:
            term = ad.scale(ad.sum(ad.square(p)), p.l2_coefficient / 2.0)
            total = term if total is None else ad.add(total, term)
    return total


def cross_entropy_weighted(probs: Tensor, targets, class_weights, params: Iterable[Parameter] = (),
                           tol: float = 1e-6) -> Tensor:
    """Class-weighted categorical cross-entropy plus L2 penalty.

    ``targets`` may be integer labels (B,) or one-hot rows (B, K).
    """
    targets = np.asarray(targets)
    if targets.ndim == 2:
        targets = targets.argmax(axis=1)
    targets = targets.astype(np.int64)
    weights = np.asarray(class_weights, dtype=float)
    if (weights <= 0).any():
        raise ValueError("class weights must be positive")
    row_sums = probs.data.sum(axis=-1)
    if np.abs(row_sums - 1.0).max(initial=0.0) > tol:
        raise ValueError("probability rows do not sum to 1")
    loss = ad.weighted_nll(probs, targets, weights[targets])
    reg = l2_penalty(params)
    return loss if reg is None else ad.add(loss, reg)
