"""Slow, independent reference implementations used as test oracles.

Everything here is written with plain Python loops and the textbook
definitions so that it shares no code path with the package.
"""

from __future__ import annotations

import math

import numpy as np


def full_ranking(scores, excluded):
    """Every eligible item sorted by (-score, index)."""
    eligible = [i for i in range(len(scores)) if i not in excluded]
    return sorted(eligible, key=lambda i: (-scores[i], i))


def brute_force_metrics(score_matrix, train_items, test_pairs, price, category, k):
    """Hit, rHit and per-category Hit from materialized full rankings."""
    hits, rev = [], []
    per_cat = {}
    for u, target in test_pairs:
        ranking = full_ranking(score_matrix[u], set(train_items[u]))
        h = 1.0 if target in ranking[:k] else 0.0
        hits.append(h)
        rev.append(h * price[target])
        per_cat.setdefault(category[target], []).append(h)
    cat_hits = {c: sum(v) / len(v) for c, v in per_cat.items()}
    return (sum(hits) / len(hits), math.fsum(rev) / len(rev), min(cat_hits.values()),
            cat_hits)


def dominates(a, b, signs):
    no_worse = all(s * x >= s * y for x, y, s in zip(a, b, signs))
    better = any(s * x > s * y for x, y, s in zip(a, b, signs))
    return no_worse and better


def pareto_oracle(points, signs):
    return [i for i, p in enumerate(points)
            if not any(dominates(q, p, signs) for j, q in enumerate(points) if j != i)]


def kl_oracle(counts_q, counts_p, smoothing=1e-6):
    """KL(Q || P) of two count vectors after additive smoothing."""
    def dist(c):
        tot = sum(c)
        raw = [x / tot if tot else 0.0 for x in c]
        sm = [x + smoothing for x in raw]
        z = sum(sm)
        return [x / z for x in sm]

    q, p = dist(counts_q), dist(counts_p)
    return math.fsum(qi * math.log(qi / pi) for qi, pi in zip(q, p) if qi > 0)


def imp_oracle(base, sol):
    """Mean relative improvement in percent; the third entry is lower-is-better."""
    h0, r0, k0, m0 = base
    h1, r1, k1, m1 = sol
    return 100.0 * ((h1 - h0) / h0 + (r1 - r0) / r0 + (k0 - k1) / k0 + (m1 - m0) / m0) / 4.0


def pearson_oracle(x, y):
    n = len(x)
    mx, my = sum(x) / n, sum(y) / n
    sxy = sum((a - mx) * (b - my) for a, b in zip(x, y))
    sxx = sum((a - mx) ** 2 for a in x)
    syy = sum((b - my) ** 2 for b in y)
    if sxx == 0 or syy == 0:
        return 0.0
    return abs(sxy / math.sqrt(sxx * syy))


def central_diff(f, x: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """Numerical gradient of scalar ``f`` at ``x`` (modified in place, restored)."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        old = x[idx]
        x[idx] = old + h
        fp = f()
        x[idx] = old - h
        fm = f()
        x[idx] = old
        g[idx] = (fp - fm) / (2 * h)
    return g


def rel_error(a, b) -> float:
    a, b = np.asarray(a, float), np.asarray(b, float)
    return float(np.max(np.abs(a - b)) / max(1e-8, np.max(np.abs(a)), np.max(np.abs(b))))
