"""Independent reference implementations used by the tests."""

import itertools

import numpy as np


def dense_ppr(graph, source, beta):
    """Closed form (1 - beta) (I - beta A D^-1)^-1 e_source via a dense solve."""
    n = graph.n
    a = np.zeros((n, n))
    for i, j in graph.edges:
        a[i, j] = a[j, i] = 1.0
    deg = a.sum(axis=0)
    w = a / np.where(deg > 0, deg, 1.0)[None, :]
    e = np.zeros(n)
    e[source] = 1.0
    return (1 - beta) * np.linalg.solve(np.eye(n) - beta * w, e)


def subset_argmax(scores, source, k, tol=1e-12):
    """All size-k subsets (source excluded) whose score sum is maximal within ``tol``."""
    cand = [i for i in range(len(scores)) if i != source]
    sums = {s: sum(scores[i] for i in s) for s in itertools.combinations(cand, k)}
    best = max(sums.values())
    return best, [set(s) for s, v in sums.items() if v >= best - tol]


def softmax(x):
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def numeric_grad(f, x, h=1e-5):
    """Central differences of scalar ``f()`` with respect to every entry of array ``x``."""
    g = np.zeros_like(x, dtype=np.float64)
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


def rel_errors(analytic, numeric, floor=1e-6):
    """Relative errors at entries where either gradient exceeds ``floor`` in magnitude."""
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    mask = np.maximum(np.abs(a), np.abs(n)) > floor
    return np.abs(a - n)[mask] / np.maximum(np.abs(a), np.abs(n))[mask]


def histogram_kl(p_scores, q_scores, bins=20, lo=-100.0, hi=100.0, eps=1e-6):
    """Loop-based smoothed-histogram KL(P || Q), written without numpy.histogram."""
    width = (hi - lo) / bins

    def hist(xs):
        h = [0.0] * bins
        for x in xs:
            x = min(max(x, lo), hi)
            b = min(int((x - lo) // width), bins - 1)
            h[b] += 1
        h = [c + eps for c in h]
        s = sum(h)
        return [c / s for c in h]

    p, q = hist(p_scores), hist(q_scores)
    return sum(pi * np.log(pi / qi) for pi, qi in zip(p, q))
