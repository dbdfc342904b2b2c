"""Independent reference implementations used as test oracles."""

import math

import numpy as np


def naive_conv(x, kernel, bias, padding):
    B, T, cin = x.shape
    cout, _, k = kernel.shape
    pad = k // 2 if padding == "same" else 0
    tout = T if padding == "same" else T - k + 1
    out = np.zeros((B, tout, cout))
    for b in range(B):
        for t in range(tout):
            for o in range(cout):
                s = bias[o]
                for j in range(k):
                    src = t + j - pad
                    if 0 <= src < T:
                        for c in range(cin):
                            s += x[b, src, c] * kernel[o, c, j]
                out[b, t, o] = s
    return out


def scalar_gru(cell, x, reverse=False):
    """Per-timestep, per-unit recurrence with explicit loops."""
    wx = {g: cell.wx[g].data for g in cell.GATES}
    wh = {g: cell.wh[g].data for g in cell.GATES}
    bb = {g: cell.b[g].data for g in cell.GATES}
    B, T, C = x.shape
    H = cell.hidden_size
    sig = lambda v: 1.0 / (1.0 + math.exp(-v))
    out = np.zeros((B, T, H))
    steps = range(T - 1, -1, -1) if reverse else range(T)
    for b in range(B):
        h = [0.0] * H
        for t in steps:
            z = [sig(sum(x[b, t, c] * wx["z"][c, i] for c in range(C)) + sum(h[j] * wh["z"][j, i] for j in range(H))
                     + bb["z"][i]) for i in range(H)]
            r = [sig(sum(x[b, t, c] * wx["r"][c, i] for c in range(C)) + sum(h[j] * wh["r"][j, i] for j in range(H))
                     + bb["r"][i]) for i in range(H)]
            cand = [math.tanh(sum(x[b, t, c] * wx["h"][c, i] for c in range(C))
                              + sum(r[j] * h[j] * wh["h"][j, i] for j in range(H)) + bb["h"][i]) for i in range(H)]
            h = [(1 - z[i]) * cand[i] + z[i] * h[i] for i in range(H)]
            out[b, t] = h
    return out


def brute_force_danger(points, labels, cls, m):
    """Sort every other point by (distance, index) and count foreign neighbours."""
    out = []
    for i in range(len(points)):
        if labels[i] != cls:
            continue
        order = sorted((math.dist(points[i], points[j]), j) for j in range(len(points)) if j != i)
        n_other = sum(labels[j] != cls for _, j in order[:m])
        if m / 2 < n_other < m:
            out.append(i)
    return out


def segment_residual(x, a, b):
    """Distance from x to the segment [a, b] (least squares on the mixing coefficient)."""
    d = b - a
    denom = float(d @ d)
    u = 0.0 if denom == 0 else float(np.clip((x - a) @ d / denom, 0.0, 1.0))
    return float(np.linalg.norm(x - (a + u * d))), u


def brute_force_metrics(y_true, y_pred, num_classes=6):
    """Metrics from explicit (truth, prediction) pair enumeration.

    Counting is independent of the implementation under test; the final
    ratios follow the documented float formulas (per-class ratio, fsum-based
    macro mean over classes seen in truth or prediction, support-weighted mean).
    """
    cm = [[0] * num_classes for _ in range(num_classes)]
    for t, p in zip(y_true, y_pred):
        cm[int(t)][int(p)] += 1
    n = len(y_true)
    prec, rec, f1 = [], [], []
    support = [sum(row) for row in cm]
    predicted = [sum(cm[r][c] for r in range(num_classes)) for c in range(num_classes)]
    for c in range(num_classes):
        tp = cm[c][c]
        fp = predicted[c] - tp
        fn = support[c] - tp
        pc = float(tp) / float(tp + fp) if tp + fp else 0.0
        rc = float(tp) / float(tp + fn) if tp + fn else 0.0
        prec.append(pc)
        rec.append(rc)
        f1.append(2 * pc * rc / (pc + rc) if pc + rc else 0.0)
    used = [c for c in range(num_classes) if support[c] or predicted[c]]

    def macro(v):
        return math.fsum(v[c] for c in used) / len(used)

    def weighted(v):
        return math.fsum(support[c] * v[c] for c in range(num_classes)) / n

    return {
        "confusion": cm, "accuracy": sum(cm[c][c] for c in range(num_classes)) / n,
        "precision_macro": macro(prec), "recall_macro": macro(rec), "f1_macro": macro(f1),
        "precision_weighted": weighted(prec), "recall_weighted": weighted(rec), "f1_weighted": weighted(f1),
        "per_class_precision": prec, "per_class_recall": rec, "per_class_f1": f1,
    }


def kink_margin(forward):
    """Smallest distance of any ReLU input from 0, or of any max-pool winner from
    its runner-up, seen while running ``forward()``."""
    from canguard import autodiff as ad

    margins = [np.inf]
    relu, pool = ad.relu, ad.maxpool1d

    def relu_probe(a):
        margins.append(float(np.abs(a.data).min()))
        return relu(a)

    def pool_probe(x, size=2):
        B, T, C = x.shape
        blocks = np.sort(x.data[:, : (T // size) * size].reshape(B, T // size, size, C), axis=2)
        gap = blocks[:, :, -1] - blocks[:, :, -2]
        # exact ties come from ReLU-dead positions that BatchNorm maps to the same
        # value; they move together under any perturbation and are harmless
        gap = gap[gap > 0]
        if gap.size:
            margins.append(float(gap.min()))
        return pool(x, size)

    ad.relu, ad.maxpool1d = relu_probe, pool_probe
    try:
        forward()
    finally:
        ad.relu, ad.maxpool1d = relu, pool
    return min(margins)


def full_model_gradient_error(config, seed, max_coords=None, batch=2, epsilon=1e-5):
    """Central-difference check of the full forward pass + weighted loss (train-mode BN, dropout off).

    Returns (max relative error, number of redrawn points). A draw whose ReLU
    inputs or nonzero max-pool gaps come within 10 epsilon of a kink is redrawn: the
    function is not differentiable there and a central difference straddling
    the kink measures a mixture of one-sided slopes.
    """
    from canguard import autodiff as ad
    from canguard.layers import cross_entropy_weighted
    from canguard.model import build

    redraws = 0
    while True:
        rng = np.random.default_rng([seed, redraws])
        model = build(config)
        # zero-initialised biases can park a ReLU exactly on its kink; probe a generic point instead
        for p in model.parameters():
            if p.name.endswith((".b", ".bias", ".b_a", ".beta")) or "b_" in p.name.rsplit(".", 1)[-1]:
                p.data[...] = rng.normal(scale=0.1, size=p.shape)
        x = ad.Parameter(rng.normal(size=(batch, config.T, config.F)), "input")
        targets = rng.integers(0, config.num_classes, size=batch)
        omega = rng.uniform(0.5, 3.0, size=config.num_classes)

        def loss():
            probs, _ = model.forward(x, training=True, rng=np.random.default_rng(0))
            return cross_entropy_weighted(probs, targets, omega, model.parameters())

        if kink_margin(loss) > 10 * epsilon:
            break
        redraws += 1
        if redraws > 50:
            raise RuntimeError("could not find a draw away from every kink")
    params = [x, *model.parameters()]
    return ad.check_parameter_gradients(loss, params, epsilon, max_coords, rng), redraws
