"""Shared oracles for the test suite."""

import numpy as np

from earlyids.dataset import PreparedSample
from earlyids.model import backward, forward
from earlyids.trainer import edl_loss


def random_sample(rng, n, d, N, label=0, spread=2.0):
    packets = rng.integers(0, 256, (n, d), dtype=np.uint8)
    times = np.concatenate([[0.0], np.cumsum(rng.exponential(spread, n - 1))])
    return PreparedSample(packets, times, label, N)


def loss_and_grads(params, cfg, batch, dropout_seed=0):
    """EDL loss and analytic gradients. Dropout masks are replayed from ``dropout_seed``."""
    probs, trace = forward(params, cfg, batch, training=True, rng=np.random.default_rng(dropout_seed))
    loss, dlogits = edl_loss(probs, batch.labels, batch.n)
    return loss, backward(trace, params, cfg, dlogits)


def numeric_grads(params, cfg, batch, h=1e-6, dropout_seed=0):
    """Central finite differences of the same loss, element by element."""
    out = {}
    for name, arr in params.items():
        g = np.zeros_like(arr)
        flat, gflat = arr.reshape(-1), g.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + h
            up = loss_and_grads(params, cfg, batch, dropout_seed)[0]
            flat[i] = old - h
            down = loss_and_grads(params, cfg, batch, dropout_seed)[0]
            flat[i] = old
            gflat[i] = (up - down) / (2 * h)
        out[name] = g
    return out


def group_rel_error(analytic, numeric, floor=1e-4):
    """``||a - n|| / max(||a|| + ||n||, floor)`` per parameter group."""
    return {k: float(np.linalg.norm(analytic[k] - numeric[k])
                     / max(np.linalg.norm(analytic[k]) + np.linalg.norm(numeric[k]), floor))
            for k in analytic}


def erde_bruteforce(rows, o):
    """Independent ERDE: ``rows`` are (attack_true, attack_pred, k)."""
    tp = sum(1 for t, p, _ in rows if t and p)
    total = 0.0
    for t, p, k in rows:
        if p and not t:
            total += tp / len(rows)
        elif t and not p:
            total += 1.0
        elif t and p:
            total += 1.0 - 1.0 / (1.0 + np.exp(k - o))
    return total / len(rows)
