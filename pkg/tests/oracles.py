"""Independent reference implementations used as test oracles."""

import math

import numpy as np


def unit_rows(rng, n, d):
    x = rng.standard_normal((n, d))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def sigmoid_loss_oracle(x, y, t_prime, b, keep=None):
    """Scalar double loop over every (image, text) pair; no normalization checks."""
    n = len(x)
    t = math.exp(t_prime)
    total = 0.0
    for i in range(n):
        for j in range(n):
            if keep is not None and not keep[i][j]:
                continue
            z = 1.0 if i == j else -1.0
            logit = t * sum(float(a) * float(c) for a, c in zip(x[i], y[j])) + b
            u = z * logit
            # log(1 + e^{-u}) in a form safe for either sign
            total += math.log1p(math.exp(-u)) if u >= 0 else -u + math.log1p(math.exp(u))
    return total / n


def softmax_loss_oracle(x, y, t_prime):
    n = len(x)
    t = math.exp(t_prime)
    logits = [[t * sum(float(a) * float(c) for a, c in zip(x[i], y[j])) for j in range(n)] for i in range(n)]
    total = 0.0
    for i in range(n):
        row = logits[i]
        col = [logits[j][i] for j in range(n)]
        for vec in (row, col):
            m = max(vec)
            lse = m + math.log(sum(math.exp(v - m) for v in vec))
            total += vec[i] - lse
    return -total / (2 * n)


def central_diff(f, arr, h=1e-5):
    """Central differences of scalar f() with respect to every entry of arr (in place)."""
    grad = np.zeros_like(arr)
    it = np.nditer(arr, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        old = arr[idx]
        arr[idx] = old + h
        fp = f()
        arr[idx] = old - h
        fm = f()
        arr[idx] = old
        grad[idx] = (fp - fm) / (2 * h)
    return grad


def rel_err(analytic, numeric, floor=1e-4):
    """Entry-wise |a - n| / max(|a|, |n|, floor), maximised over entries."""
    a = np.asarray(analytic, dtype=float)
    n = np.asarray(numeric, dtype=float)
    return float(np.max(np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)))
