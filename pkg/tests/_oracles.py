"""Independent reference computations shared by the test modules."""

import math

import numpy as np

from volta.model import EncoderConfig, backward, forward, init_model, loss_ce


def loss_at(model, x, y, train_seed=None):
    probs, _ = forward(model, x, train=train_seed is not None, seed=train_seed)
    return loss_ce(probs, y)


def finite_difference_report(model, x, y, train_seed=None, h=1e-6, rtol=1e-5, atol=1e-7):
    """Compare every analytic gradient entry with a central difference.

    Returns ``(worst_ratio, n_checked)`` where a ratio above 1 is a failure.
    """
    probs, cache = forward(model, x, train=train_seed is not None, seed=train_seed)
    grads = backward(cache, model, y)
    worst, count = 0.0, 0
    for name, arr in model.params.items():
        g = np.asarray(grads[name])
        for idx in np.ndindex(arr.shape):
            orig = arr[idx]
            arr[idx] = orig + h
            up = loss_at(model, x, y, train_seed)
            arr[idx] = orig - h
            down = loss_at(model, x, y, train_seed)
            arr[idx] = orig
            fd = (up - down) / (2 * h)
            worst = max(worst, abs(g[idx] - fd) / (atol + rtol * abs(fd)))
            count += 1
    tau = model.tau
    model.tau = tau + h
    up = loss_at(model, x, y, train_seed)
    model.tau = tau - h
    down = loss_at(model, x, y, train_seed)
    model.tau = tau
    fd = (up - down) / (2 * h)
    worst = max(worst, abs(grads["tau"] - fd) / (atol + rtol * abs(fd)))
    return worst, count + 1


def random_instance(rng, deep=True, dropout=0.0):
    d_f = int(rng.integers(2, 9))
    dim = int(rng.integers(2, 5))
    k = int(rng.integers(2, 5))
    n = int(rng.integers(1, 9))
    cfg = (EncoderConfig.deep(d_f, dim, dropout=dropout) if deep
           else EncoderConfig.shallow(d_f, dim, dropout=dropout))
    model = init_model(cfg, k, seed=int(rng.integers(1 << 30)), tau0=float(rng.uniform(0.3, 2.0)))
    for name in model.params:
        if name.startswith(("gain", "shift", "b")):
            model.params[name] = model.params[name] + rng.normal(scale=0.3, size=model.params[name].shape)
    x = rng.normal(size=(n, d_f))
    y = rng.integers(0, k, size=n)
    return model, x, y


def straight_line_probs(model, x):
    """Row-by-row forward pass with Python scalars only (eval mode)."""
    cfg, p = model.config, model.params
    out = []
    for row in np.asarray(x, dtype=float).tolist():
        h = row
        for i in range(cfg.n_layers):
            w, b = p[f"W{i}"].tolist(), p[f"b{i}"].tolist()
            a = [sum(wj * hj for wj, hj in zip(w_row, h)) + bi for w_row, bi in zip(w, b)]
            if cfg.layer_norm:
                mu = sum(a) / len(a)
                var = sum((ai - mu) ** 2 for ai in a) / len(a)
                s = 1.0 / math.sqrt(var + cfg.ln_eps)
                a = [(ai - mu) * s * g + sh for ai, g, sh in
                     zip(a, p[f"gain{i}"].tolist(), p[f"shift{i}"].tolist())]
            if cfg.activation == "gelu":
                a = [0.5 * ai * (1.0 + math.erf(ai / math.sqrt(2.0))) for ai in a]
            h = a
        if cfg.residual:
            h = [hi + sum(rj * xj for rj, xj in zip(r_row, row)) for hi, r_row in zip(h, p["R"].tolist())]
        norm = math.sqrt(sum(v * v for v in h))
        z = [v / norm for v in h]
        protos = []
        for pt in p["ptilde"].tolist():
            pn = math.sqrt(sum(v * v for v in pt))
            protos.append([v / pn for v in pt])
        logits = [sum(a * b for a, b in zip(z, pk)) / model.tau for pk in protos]
        m = max(logits)
        e = [math.exp(l - m) for l in logits]
        out.append([v / sum(e) for v in e])
    return np.array(out)


def zoom_grid_beta(objective, lo=1e-3, hi=1e3, points=1000, levels=6):
    """Nested log-spaced grid search for a convex 1-D objective.

    The first two levels visit the same points as a 10^6-point log grid
    over ``[lo, hi]`` restricted to the bracket around the running minimum;
    later levels refine inside the final cell.
    """
    a, b = math.log(lo), math.log(hi)
    best = None
    for _ in range(levels):
        grid = np.linspace(a, b, points)
        vals = objective(np.exp(grid))
        i = int(np.argmin(vals))
        best = grid[i]
        step = grid[1] - grid[0]
        a, b = max(grid[0], best - step), min(grid[-1], best + step)
    return math.exp(best)
