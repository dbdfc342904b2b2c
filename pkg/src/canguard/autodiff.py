"""Reverse-mode automatic differentiation over float64 numpy arrays.

Every operation records a closure that maps the upstream gradient to
gradients of its inputs. ``backward`` walks the recorded graph in reverse
topological order. Broadcasting is restricted to the case where one operand's
shape is a suffix of the other's (a per-feature vector applied across the
leading batch/time dimensions).
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float64


class NumericalInstabilityError(ArithmeticError):
    """Raised when an operation produces NaN or Inf."""


class ShapeError(ValueError):
    pass


_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording (inference)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, *, _parents=(), _backward=None, op: str = "leaf"):
        self.data = np.asarray(data, dtype=DTYPE)
        if op == "leaf":
            _check_finite(self.data, "input")
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = _parents
        self._backward: Callable[[np.ndarray], None] | None = _backward
        self.op = op

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(self, _as_tensor(other))

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, _as_tensor(other))


class Parameter(Tensor):
    """A trainable tensor with a stable name and optional L2 coefficient."""

    __slots__ = ("name", "l2_coefficient")

    def __init__(self, data, name: str, l2_coefficient: float = 0.0):
        super().__init__(data, requires_grad=True)
        if l2_coefficient < 0:
            raise ValueError(f"l2_coefficient must be >= 0, got {l2_coefficient}")
        self.name = name
        self.l2_coefficient = float(l2_coefficient)
        self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape})"


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_finite(arr: np.ndarray, op: str) -> None:
    if not np.isfinite(arr).all():
        raise NumericalInstabilityError(f"non-finite value produced by {op}")


def _result(data: np.ndarray, parents: Sequence[Tensor], backward_fn, op: str) -> Tensor:
    _check_finite(data, op)
    if _grad_enabled and any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, _parents=tuple(parents), _backward=backward_fn, op=op)
    return Tensor(data, op=op)


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=DTYPE, copy=True)
    else:
        t.grad += g


def _broadcast_kind(a: tuple, b: tuple) -> int:
    """0: equal, 1: b broadcasts over a's leading dims, 2: a over b's."""
    if a == b:
        return 0
    if len(b) < len(a) and a[len(a) - len(b):] == b:
        return 1
    if len(a) < len(b) and b[len(b) - len(a):] == a:
        return 2
    raise ShapeError(f"shapes {a} and {b} are not compatible (only leading-dim broadcasting is supported)")


_ROW_BLOCK = 8


def _mm(a2: np.ndarray, w: np.ndarray) -> np.ndarray:
    """2-D product whose rows do not depend on how many rows are in the batch.

    BLAS picks different kernels for ragged row counts, which changes the
    last bits of a row's result. Zero-padding to a multiple of the row block
    keeps every row on the same kernel path, so a window classified alone
    matches the same window classified inside a large batch bit for bit.
    """
    n = a2.shape[0]
    rem = n % _ROW_BLOCK
    if rem == 0:
        return a2 @ w
    padded = np.zeros((n + _ROW_BLOCK - rem, a2.shape[1]))
    padded[:n] = a2
    return (padded @ w)[:n]


def _reduce_to(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    return g.sum(axis=tuple(range(lead)))


# ---------------------------------------------------------------- elementwise

def add(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_kind(a.shape, b.shape)
    out_data = a.data + b.data

    def bw(g):
        _accumulate(a, _reduce_to(g, a.shape))
        _accumulate(b, _reduce_to(g, b.shape))

    return _result(out_data, (a, b), bw, "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_kind(a.shape, b.shape)
    out_data = a.data - b.data

    def bw(g):
        _accumulate(a, _reduce_to(g, a.shape))
        _accumulate(b, -_reduce_to(g, b.shape))

    return _result(out_data, (a, b), bw, "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_kind(a.shape, b.shape)
    out_data = a.data * b.data

    def bw(g):
        if a.requires_grad:
            _accumulate(a, _reduce_to(g * b.data, a.shape))
        if b.requires_grad:
            _accumulate(b, _reduce_to(g * a.data, b.shape))

    return _result(out_data, (a, b), bw, "mul")


def scale(a: Tensor, c: float) -> Tensor:
    def bw(g):
        _accumulate(a, g * c)

    return _result(a.data * c, (a,), bw, "scale")


def mul_const(a: Tensor, c: np.ndarray) -> Tensor:
    """Multiply by a constant array (dropout masks, fixed coefficients)."""
    c = np.asarray(c, dtype=DTYPE)
    _broadcast_kind(a.shape, c.shape)

    def bw(g):
        _accumulate(a, _reduce_to(g * c, a.shape))

    return _result(a.data * c, (a,), bw, "mul_const")


def one_minus(a: Tensor) -> Tensor:
    def bw(g):
        _accumulate(a, -g)

    return _result(1.0 - a.data, (a,), bw, "one_minus")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0  # subgradient 0 at the origin

    def bw(g):
        _accumulate(a, g * mask)

    return _result(a.data * mask, (a,), bw, "relu")


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)

    def bw(g):
        _accumulate(a, g * (1.0 - y * y))

    return _result(y, (a,), bw, "tanh")


def sigmoid(a: Tensor) -> Tensor:
    # tanh form avoids overflow in exp for large |x|
    y = 0.5 * (1.0 + np.tanh(0.5 * a.data))

    def bw(g):
        _accumulate(a, g * y * (1.0 - y))

    return _result(y, (a,), bw, "sigmoid")


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        y = np.exp(a.data)

    def bw(g):
        _accumulate(a, g * y)

    return _result(y, (a,), bw, "exp")


def log(a: Tensor, floor: float = 0.0) -> Tensor:
    x = np.maximum(a.data, floor) if floor > 0 else a.data
    if (x <= 0).any():
        raise NumericalInstabilityError("log of non-positive value")
    live = a.data >= floor

    def bw(g):
        _accumulate(a, g / x * live)

    return _result(np.log(x), (a,), bw, "log")


def square(a: Tensor) -> Tensor:
    def bw(g):
        _accumulate(a, 2.0 * g * a.data)

    return _result(a.data * a.data, (a,), bw, "square")


# ------------------------------------------------------------ reductions etc.

def sum(a: Tensor, axis=None) -> Tensor:  # noqa: A001 - mirrors numpy
    out_data = np.asarray(a.data.sum(axis=axis))

    def bw(g):
        if axis is None:
            _accumulate(a, np.broadcast_to(g, a.shape))
        else:
            _accumulate(a, np.broadcast_to(np.expand_dims(g, axis), a.shape))

    return _result(out_data, (a,), bw, "sum")


def mean(a: Tensor, axis=None) -> Tensor:
    n = a.data.size if axis is None else np.prod([a.shape[ax] for ax in np.atleast_1d(axis)])
    return scale(sum(a, axis), 1.0 / float(n))


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        _accumulate(a, y * (g - (g * y).sum(axis=axis, keepdims=True)))

    return _result(y, (a,), bw, "softmax")


def matmul(a: Tensor, w: Tensor) -> Tensor:
    """``a @ w`` where ``a`` is (..., n) and ``w`` is (n, m)."""
    if w.ndim != 2 or a.ndim < 1 or a.shape[-1] != w.shape[0]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} @ {w.shape}")
    lead = a.shape[:-1]
    a2 = a.data.reshape(-1, a.shape[-1])
    out = _mm(a2, w.data).reshape(*lead, w.shape[1])

    def bw(g):
        g2 = g.reshape(-1, w.shape[1])
        if a.requires_grad:
            _accumulate(a, (g2 @ w.data.T).reshape(a.shape))
        if w.requires_grad:
            _accumulate(w, a2.T @ g2)

    return _result(out, (a, w), bw, "matmul")


def reshape(a: Tensor, shape) -> Tensor:
    def bw(g):
        _accumulate(a, g.reshape(a.shape))

    return _result(a.data.reshape(shape), (a,), bw, "reshape")


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        for t, piece in zip(tensors, np.split(g, splits, axis=axis)):
            _accumulate(t, piece)

    return _result(out, tuple(tensors), bw, "concat")


def stack(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    out = np.stack([t.data for t in tensors], axis=axis)

    def bw(g):
        for i, t in enumerate(tensors):
            _accumulate(t, np.take(g, i, axis=axis))

    return _result(out, tuple(tensors), bw, "stack")


def take(a: Tensor, index: int, axis: int = 1) -> Tensor:
    """Select one slice along ``axis`` (drops the axis)."""
    out = np.take(a.data, index, axis=axis)

    def bw(g):
        full = np.zeros_like(a.data)
        sl = [slice(None)] * a.ndim
        sl[axis] = index
        full[tuple(sl)] = g
        _accumulate(a, full)

    return _result(out, (a,), bw, "take")


def flip(a: Tensor, axis: int = 1) -> Tensor:
    def bw(g):
        _accumulate(a, np.flip(g, axis=axis))

    return _result(np.flip(a.data, axis=axis).copy(), (a,), bw, "flip")


# ------------------------------------------------------------ fused NN ops

def conv1d(x: Tensor, kernel: Tensor, bias: Tensor, padding: str = "same") -> Tensor:
    """Cross-correlation over time. x: (B, T, Cin), kernel: (Cout, Cin, k)."""
    B, T, cin = x.shape
    cout, kcin, k = kernel.shape
    if kcin != cin:
        raise ShapeError(f"conv1d channel mismatch: input has {cin}, kernel expects {kcin}")
    if padding == "same":
        if k % 2 == 0:
            raise ShapeError("same padding requires an odd kernel size")
        pad = k // 2
        xp = np.pad(x.data, ((0, 0), (pad, pad), (0, 0)))
        tout = T
    elif padding == "valid":
        if T < k:
            raise ShapeError(f"sequence length {T} shorter than kernel size {k}")
        pad = 0
        xp = x.data
        tout = T - k + 1
    else:
        raise ValueError(f"unknown padding {padding!r}")
    # cols[b, t, j, c] = xp[b, t + j, c]
    cols = np.stack([xp[:, j:j + tout, :] for j in range(k)], axis=2)
    cols2 = cols.reshape(B * tout, k * cin)
    wmat = kernel.data.transpose(2, 1, 0).reshape(k * cin, cout)
    out = _mm(cols2, wmat).reshape(B, tout, cout) + bias.data

    def bw(g):
        g2 = g.reshape(B * tout, cout)
        if kernel.requires_grad:
            gw = (cols2.T @ g2).reshape(k, cin, cout).transpose(2, 1, 0)
            _accumulate(kernel, gw)
        if bias.requires_grad:
            _accumulate(bias, g2.sum(axis=0))
        if x.requires_grad:
            gcols = (g2 @ wmat.T).reshape(B, tout, k, cin)
            gxp = np.zeros_like(xp)
            for j in range(k):
                gxp[:, j:j + tout, :] += gcols[:, :, j, :]
            _accumulate(x, gxp[:, pad:pad + T, :] if pad else gxp)

    return _result(out, (x, kernel, bias), bw, "conv1d")


def maxpool1d(x: Tensor, pool: int = 2) -> Tensor:
    B, T, C = x.shape
    if T < pool:
        raise ShapeError(f"maxpool1d needs at least {pool} time steps, got {T}")
    tout = T // pool
    blocks = x.data[:, : tout * pool, :].reshape(B, tout, pool, C)
    # one-hot of the first maximal index in each block (ties go to the earliest)
    hit = np.zeros(blocks.shape, dtype=bool)
    best = blocks[:, :, 0, :]
    arg = np.zeros((B, tout, C), dtype=np.int64)
    for j in range(1, pool):
        better = blocks[:, :, j, :] > best
        arg[better] = j
        best = np.where(better, blocks[:, :, j, :], best)
    for j in range(pool):
        hit[:, :, j, :] = arg == j
    out = best.copy()

    def bw(g):
        gb = hit * g[:, :, None, :]
        full = np.zeros_like(x.data)
        full[:, : tout * pool, :] = gb.reshape(B, tout * pool, C)
        _accumulate(x, full)

    return _result(out, (x,), bw, "maxpool1d")


def batchnorm_train(x: Tensor, gamma: Tensor, beta: Tensor, eps: float):
    """Normalize over every axis except the last. Returns (out, mean, var)."""
    axes = tuple(range(x.ndim - 1))
    n = int(np.prod([x.shape[a] for a in axes]))
    mu = x.data.mean(axis=axes)
    xc = x.data - mu
    var = (xc * xc).mean(axis=axes)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def bw(g):
        if gamma.requires_grad:
            _accumulate(gamma, (g * xhat).sum(axis=axes))
        if beta.requires_grad:
            _accumulate(beta, g.sum(axis=axes))
        if x.requires_grad:
            gx = g * gamma.data
            gx = inv / n * (n * gx - gx.sum(axis=axes) - xhat * (gx * xhat).sum(axis=axes))
            _accumulate(x, gx)

    return _result(out, (x, gamma, beta), bw, "batchnorm"), mu, var


def affine_channel(x: Tensor, mult: np.ndarray, gamma: Tensor, shift: np.ndarray, beta: Tensor) -> Tensor:
    """(x - shift) * mult * gamma + beta with constant shift/mult (BatchNorm inference)."""
    xhat = (x.data - shift) * mult
    out = xhat * gamma.data + beta.data
    axes = tuple(range(x.ndim - 1))

    def bw(g):
        if gamma.requires_grad:
            _accumulate(gamma, (g * xhat).sum(axis=axes))
        if beta.requires_grad:
            _accumulate(beta, g.sum(axis=axes))
        if x.requires_grad:
            _accumulate(x, g * mult * gamma.data)

    return _result(out, (x, gamma, beta), bw, "affine_channel")


def time_weighted_sum(alpha: Tensor, h: Tensor) -> Tensor:
    """c[b] = sum_t alpha[b, t] * h[b, t, :]."""
    if alpha.shape != h.shape[:2]:
        raise ShapeError(f"attention weights {alpha.shape} do not match states {h.shape}")
    out = np.einsum("bt,bth->bh", alpha.data, h.data)

    def bw(g):
        if alpha.requires_grad:
            _accumulate(alpha, np.einsum("bh,bth->bt", g, h.data))
        if h.requires_grad:
            _accumulate(h, alpha.data[:, :, None] * g[:, None, :])

    return _result(out, (alpha, h), bw, "time_weighted_sum")


def weighted_nll(probs: Tensor, targets: np.ndarray, sample_weights: np.ndarray, floor: float = 1e-12) -> Tensor:
    """-(1/B) sum_b w_b log max(p[b, y_b], floor)."""
    B = probs.shape[0]
    rows = np.arange(B)
    p = probs.data[rows, targets]
    pc = np.maximum(p, floor)
    value = -(sample_weights * np.log(pc)).sum() / B

    def bw(g):
        gp = np.zeros_like(probs.data)
        gp[rows, targets] = -g * sample_weights / (B * pc) * (p >= floor)
        _accumulate(probs, gp)

    return _result(np.asarray(value), (probs,), bw, "weighted_nll")


_OPS: dict[str, Callable[..., Tensor]] = {
    "add": add, "sub": sub, "mul": mul, "matmul": matmul, "relu": relu,
    "tanh": tanh, "sigmoid": sigmoid, "exp": exp, "log": log, "square": square,
    "sum": sum, "mean": mean, "softmax": softmax, "reshape": reshape,
    "concat": lambda *ts, axis=-1: concat(ts, axis=axis),
    "stack": lambda *ts, axis=1: stack(ts, axis=axis),
    "take": take, "flip": flip, "conv1d": conv1d, "maxpool1d": maxpool1d,
    "time_weighted_sum": time_weighted_sum,
}


def forward_op(op_kind: str, *inputs: Tensor, **kwargs) -> Tensor:
    """Dispatch an operation by name."""
    try:
        fn = _OPS[op_kind]
    except KeyError:
        raise ValueError(f"unknown op {op_kind!r}") from None
    return fn(*inputs, **kwargs)


# ------------------------------------------------------------ backward pass

def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack_: list[tuple[Tensor, bool]] = [(root, False)]
    while stack_:
        node, done = stack_.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack_.append((node, True))
        for p in node._parents:
            if id(p) not in seen and p.requires_grad:
                stack_.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into every reachable leaf's ``grad``."""
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    order = _topo_order(loss)
    for node in order:
        if node._parents:
            node.grad = None
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
    for node in order:
        if node._parents and node is not loss:
            node.grad = None  # free intermediate buffers


def gradient_check(f: Callable[[Tensor], Tensor], point, epsilon: float = 1e-5) -> float:
    """Max over coordinates of |analytic - central difference| / max(1, |central difference|)."""
    if not 0 < epsilon <= 1e-2:
        raise ValueError("epsilon must lie in (0, 1e-2]")
    x0 = np.array(point.data if isinstance(point, Tensor) else point, dtype=DTYPE)
    x = Tensor(x0.copy(), requires_grad=True)
    x.grad = np.zeros_like(x0)
    backward(f(x))
    analytic = x.grad
    numeric = np.empty_like(x0)
    flat = x0.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + epsilon
        fp = f(Tensor(x0.copy())).item()
        flat[i] = orig - epsilon
        fm = f(Tensor(x0.copy())).item()
        flat[i] = orig
        numeric.reshape(-1)[i] = (fp - fm) / (2 * epsilon)
    return float(np.max(np.abs(analytic - numeric) / np.maximum(1.0, np.abs(numeric)), initial=0.0))


def check_parameter_gradients(
    loss_fn: Callable[[], Tensor],
    params: Iterable[Parameter],
    epsilon: float = 1e-5,
    max_coords: int | None = None,
    rng: np.random.Generator | None = None,
) -> float:
    """Finite-difference check of ``loss_fn`` gradients w.r.t. parameters.

    With ``max_coords`` set, at most that many coordinates per parameter are
    probed (chosen by ``rng``).
    """
    params = list(params)
    for p in params:
        p.zero_grad()
    backward(loss_fn())
    analytic = {id(p): p.grad.copy() for p in params}
    rng = rng or np.random.default_rng(0)
    worst = 0.0
    for p in params:
        flat = p.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = rng.choice(flat.size, size=max_coords, replace=False)
        ga = analytic[id(p)].reshape(-1)
        for i in coords:
            orig = flat[i]
            flat[i] = orig + epsilon
            fp = loss_fn().item()
            flat[i] = orig - epsilon
            fm = loss_fn().item()
            flat[i] = orig
            num = (fp - fm) / (2 * epsilon)
            worst = max(worst, abs(ga[i] - num) / max(1.0, abs(num)))
    return worst
