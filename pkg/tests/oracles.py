"""Brute-force reference implementations used as independent test oracles.

These deliberately avoid the package and numpy vectorization: plain loops over
Python floats with ``math``.
"""

import math

import numpy as np


def mean_rows(rows):
    m, c = len(rows), len(rows[0])
    return [sum(rows[i][k] for i in range(m)) / m for k in range(c)]


def norm_entropy(p):
    c = len(p)
    h = 0.0
    for v in p:
        if v > 0:
            h -= v * math.log(v)
    return min(max(h / math.log(c), 0.0), 1.0)


def eq2(rows):
    return norm_entropy(mean_rows(rows))


def eq3(rows):
    return sum(norm_entropy(r) for r in rows) / len(rows)


def eq4(rows, mode="population"):
    avg = mean_rows(rows)
    j = max(range(len(avg)), key=lambda k: (avg[k], -k))
    col = [r[j] for r in rows]
    mu = sum(col) / len(col)
    s = sum((v - mu) ** 2 for v in col)
    return s / len(col) if mode == "population" else s


def brier(p, t):
    return sum(((1.0 if k == t else 0.0) - p[k]) ** 2 for k in range(len(p))) / len(p)


def ece(conf, correct, bins=15):
    n = len(conf)
    total = 0.0
    for b in range(bins):
        lo, hi = b / bins, (b + 1) / bins
        members = [i for i in range(n) if (lo < conf[i] <= hi) or (b == 0 and conf[i] == 0.0)]
        if not members:
            continue
        acc = sum(1.0 for i in members if correct[i]) / len(members)
        cf = sum(conf[i] for i in members) / len(members)
        total += len(members) / n * abs(acc - cf)
    return total


def accuracy(pred, labels):
    return sum(1 for a, b in zip(pred, labels) if a == b) / len(labels)


def finite_diff_grad(f, x, h=1e-5):
    """Central differences of scalar ``f`` with respect to every entry of ``x``."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        fp = f(x)
        x[i] = old - h
        fm = f(x)
        x[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g


def rel_err(a, b):
    """Norm-based relative error, robust to entries that are exactly zero."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a) + np.linalg.norm(b), 1e-12))
