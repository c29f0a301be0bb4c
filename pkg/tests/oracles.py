"""Reference computations the tests compare against.

Nothing here imports the code paths it checks: the encoder, loss and Adam
references are written out long-hand.
"""

from __future__ import annotations

import math

import numpy as np


def naive_encode(w: np.ndarray, b: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Triple-loop valid convolution, ReLU, max over positions."""
    n_filters, width, dim = w.shape
    positions = len(x) - width + 1
    out = np.zeros(n_filters)
    for f in range(n_filters):
        best = 0.0
        for t in range(positions):
            acc = b[f]
            for k in range(width):
                for d in range(dim):
                    acc += w[f, k, d] * x[t + k, d]
            best = max(best, acc)
        out[f] = best
    return out


def pre_activations(w, b, x):
    """(positions, n_filters) conv outputs before the ReLU, via einsum."""
    n_filters, width, dim = w.shape
    positions = len(x) - width + 1
    win = np.stack([x[t : t + width] for t in range(positions)])
    return np.einsum("tkd,fkd->tf", win, w) + b


def hinge(d_p, d_n, alpha):
    return np.maximum(d_p - d_n + alpha, 0.0)


def scalar_distance(a, b):
    return math.sqrt(sum((float(x) - float(y)) ** 2 for x, y in zip(a, b)))


def kink_margin(w, b, x):
    """Smallest gap that a tiny perturbation would have to close to change
    which window wins a filter or whether the ReLU is active."""
    pre = pre_activations(w, b, x)
    act = np.maximum(pre, 0.0)
    s = np.sort(act, axis=0)
    gaps = [np.min(np.abs(pre))]
    if len(pre) > 1:
        top_two = s[-1] - s[-2]
        gaps.append(np.min(top_two[s[-1] > 0]) if np.any(s[-1] > 0) else np.inf)
    return float(min(gaps))


def fd_param_grads(w, b, xs, alpha, h=1e-5):
    """Central finite differences of the triplet loss w.r.t. every filter
    weight and bias, for branches ``xs = (mention, positive, negative)``.

    A weight ``w[f, k, d]`` only moves column ``f`` of each branch's
    pre-activations (by ``h * x[t + k, d]``), so each perturbed loss is
    rebuilt from one changed output coordinate per branch.
    """
    n_filters, width, dim = w.shape
    pres = [pre_activations(w, b, x) for x in xs]
    outs = [np.max(np.maximum(p, 0.0), axis=0) for p in pres]
    wins = [np.stack([x[t : t + width].reshape(-1) for t in range(len(x) - width + 1)]) for x in xs]

    def loss_with(step):
        # perturbed outputs, shape (n_filters, width * dim) per branch
        new = []
        for pre, win in zip(pres, wins):
            shifted = pre[:, :, None] + step * win[:, None, :]
            new.append(np.max(np.maximum(shifted, 0.0), axis=0))
        em, ep, en = outs
        nm, np_, nn = new
        base_p = np.sum((em - ep) ** 2) - (em - ep) ** 2
        base_n = np.sum((em - en) ** 2) - (em - en) ** 2
        d_p = np.sqrt(base_p[:, None] + (nm - np_) ** 2)
        d_n = np.sqrt(base_n[:, None] + (nm - nn) ** 2)
        return hinge(d_p, d_n, alpha)

    g_w = (loss_with(h) - loss_with(-h)) / (2 * h)

    def loss_bias(step):
        new = [np.max(np.maximum(pre + step, 0.0), axis=0) for pre in pres]
        em, ep, en = outs
        nm, np_, nn = new
        d_p = np.sqrt(np.sum((em - ep) ** 2) - (em - ep) ** 2 + (nm - np_) ** 2)
        d_n = np.sqrt(np.sum((em - en) ** 2) - (em - en) ** 2 + (nm - nn) ** 2)
        return hinge(d_p, d_n, alpha)

    g_b = (loss_bias(h) - loss_bias(-h)) / (2 * h)
    return g_w.reshape(n_filters, width, dim), g_b


def fd_input_grads(w, b, xs, alpha, h=1e-5):
    """Central differences w.r.t. every entry of the three token matrices."""
    n_filters, width, dim = w.shape
    pres = [pre_activations(w, b, x) for x in xs]
    outs = [np.max(np.maximum(p, 0.0), axis=0) for p in pres]
    grads = []
    for which, x in enumerate(xs):
        g = np.zeros_like(x)
        for r in range(len(x)):
            vals = []
            for step in (h, -h):
                pre = pres[which][:, None, :].repeat(dim, axis=1)  # (positions, dim, filters)
                for t in range(len(pre)):
                    k = r - t
                    if 0 <= k < width:
                        pre[t] += step * w[:, k, :].T
                new = np.max(np.maximum(pre, 0.0), axis=0)  # (dim, filters)
                o = [np.broadcast_to(v, new.shape) for v in outs]
                o[which] = new
                d_p = np.sqrt(np.sum((o[0] - o[1]) ** 2, axis=1))
                d_n = np.sqrt(np.sum((o[0] - o[2]) ** 2, axis=1))
                vals.append(hinge(d_p, d_n, alpha))
            g[r] = (vals[0] - vals[1]) / (2 * h)
        grads.append(g)
    return grads


def brute_fd_params(loss_fn, w, b, h=1e-5):
    """One-parameter-at-a-time central differences through ``loss_fn(w, b)``."""
    gw = np.zeros_like(w)
    gb = np.zeros_like(b)
    for idx in np.ndindex(*w.shape):
        old = w[idx]
        w[idx] = old + h
        up = loss_fn(w, b)
        w[idx] = old - h
        down = loss_fn(w, b)
        w[idx] = old
        gw[idx] = (up - down) / (2 * h)
    for i in range(len(b)):
        old = b[i]
        b[i] = old + h
        up = loss_fn(w, b)
        b[i] = old - h
        down = loss_fn(w, b)
        b[i] = old
        gb[i] = (up - down) / (2 * h)
    return gw, gb


def scalar_adam(grads, lr=0.001, beta1=0.9, beta2=0.999, eps=1e-8, theta=0.0):
    """Plain-float Adam trace for one scalar parameter."""
    m = v = 0.0
    trace = []
    for t, g in enumerate(grads, 1):
        m = beta1 * m + (1 - beta1) * g
        v = beta2 * v + (1 - beta2) * g * g
        m_hat = m / (1 - beta1**t)
        v_hat = v / (1 - beta2**t)
        theta = theta - lr * m_hat / (math.sqrt(v_hat) + eps)
        trace.append(theta)
    return trace


def enumerate_ngrams(token, min_n, max_n):
    """All substrings of ``<token>`` with length in [min_n, max_n], by slicing every (i, j) pair."""
    word = "<" + token + ">"
    out = []
    for i in range(len(word)):
        for j in range(i + 1, len(word) + 1):
            if min_n <= j - i <= max_n:
                out.append(word[i:j])
    return sorted(out)


def rel_error(analytic, numeric, floor=1e-5):
    """Per-component |a - n| / max(|a|, |n|, floor).

    Central differences at h = 1e-5 carry about 1e-10 of rounding noise, so
    components far below ``floor`` are effectively compared in absolute terms
    (|a - n| <= 1e-4 * floor).
    """
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)


def active_cases(rng, count, dim, n_filters, width=3, max_len=6, min_margin=1e-3):
    """Yield ``(w, b, (m, qp, qn), alpha)`` with a strictly active hinge and every
    ReLU / max-pool decision at least ``min_margin`` from a kink, so central
    differences see a smooth function."""
    made = 0
    while made < count:
        limit = math.sqrt(6.0 / (width * (dim + n_filters)))
        w = rng.uniform(-limit, limit, size=(n_filters, width, dim))
        b = rng.normal(scale=0.1, size=n_filters)
        xs = []
        for _ in range(3):
            n = int(rng.integers(1, max_len + 1))
            x = np.zeros((max(n, width), dim))
            x[:n] = rng.normal(size=(n, dim))
            xs.append(x)
        if min(kink_margin(w, b, x) for x in xs) < min_margin:
            continue
        outs = [np.max(np.maximum(pre_activations(w, b, x), 0.0), axis=0) for x in xs]
        d_p = float(np.linalg.norm(outs[0] - outs[1]))
        d_n = float(np.linalg.norm(outs[0] - outs[2]))
        if d_p == 0.0 or d_n == 0.0:
            continue
        alpha = 1.0 if d_p - d_n + 1.0 > 1e-3 else d_n - d_p + 1.0
        made += 1
        yield w, b, tuple(xs), alpha
