"""Independent reference implementations used by the tests.

Each oracle recomputes a quantity by the most direct route available
(adaptive quadrature, explicit loops, dense linear algebra, exact
fractions) without sharing code paths with the library.
"""

from fractions import Fraction
from itertools import combinations

import numpy as np
from scipy.integrate import quad
from scipy.stats import multivariate_normal

from pivem.graph import EventGraph
from pivem.model import ModelState


def random_model(rng, n=4, d=2, b=3, horizon=1.0, scale=1.0, vscale=1.0):
    return ModelState(rng.normal(0, 0.5, n), rng.normal(0, scale, (n, d)),
                      rng.normal(0, vscale, (b, n, d)), horizon)


def random_graph(rng, n, num_events, horizon=1.0):
    i = rng.integers(0, n, num_events)
    j = (i + rng.integers(1, n, num_events)) % n
    t = rng.uniform(0, horizon, num_events)
    return EventGraph.from_events(n, i, j, t, horizon=horizon)


def loop_position(m, i, t):
    """Walk the bins one by one instead of using cumulative sums."""
    w = m.horizon / m.num_bins
    r = m.x0[i].copy()
    for b in range(m.num_bins):
        lo = b * w
        if t >= lo + w and b < m.num_bins - 1:
            r = r + w * m.v[b, i]
        else:
            return r + (t - lo) * m.v[b, i]
    return r


def loop_intensity(m, i, j, t):
    d = loop_position(m, i, t) - loop_position(m, j, t)
    return float(np.exp(m.beta[i] + m.beta[j] - d @ d))


def quad_integral(m, i, j, lo, hi):
    """Adaptive quadrature split at bin edges (the integrand is smooth inside a bin)."""
    w = m.horizon / m.num_bins
    edges = [lo] + [k * w for k in range(1, m.num_bins) if lo < k * w < hi] + [hi]
    total = 0.0
    for a, b in zip(edges[:-1], edges[1:]):
        val, _ = quad(lambda t: loop_intensity(m, i, j, t), a, b,
                      epsabs=0.0, epsrel=1e-13, limit=200)
        total += val
    return total


def naive_log_likelihood(m, g, dyads=None):
    """Event-by-event log-intensities minus quadrature of the intensity."""
    if dyads is None:
        dyads = list(combinations(range(m.num_nodes), 2))
    dyads = {(min(a, b), max(a, b)) for a, b in dyads}
    total = 0.0
    for a, b, t in zip(g.src.tolist(), g.dst.tolist(), g.times.tolist()):
        if (a, b) in dyads:
            d = loop_position(m, a, t) - loop_position(m, b, t)
            total += m.beta[a] + m.beta[b] - d @ d
    for a, b in sorted(dyads):
        total -= quad_integral(m, a, b, 0.0, m.horizon)
    return total


def dense_prior_logpdf(prior, x0, v, horizon=1.0):
    """Explicit covariance built entry by entry from the kernel definitions."""
    n, d = x0.shape
    nb = v.shape[0]
    centers = (np.arange(nb) + 0.5) * horizon / nb
    slots = nb + 1
    bt = np.zeros((slots, slots))
    bt[0, 0] = prior.c_x0
    for a in range(nb):
        for c in range(nb):
            bt[a + 1, c + 1] = np.exp(-(centers[a] - centers[c]) ** 2 / (2 * prior.sigma_rbf ** 2))
        bt[a + 1, a + 1] += 1e-8
    q = np.exp(prior.q_raw)
    q /= q.sum(1, keepdims=True)
    C = q @ q.T
    dim = slots * n * d
    cov = np.zeros((dim, dim))
    for s1 in range(slots):
        for s2 in range(slots):
            for i in range(n):
                for j in range(n):
                    for k in range(d):
                        cov[(s1 * n + i) * d + k, (s2 * n + j) * d + k] = bt[s1, s2] * C[i, j]
    cov = prior.lam ** 2 * (prior.sigma_noise ** 2 * np.eye(dim) + cov)
    z = np.concatenate([x0.ravel(), v.ravel()])
    return multivariate_normal(np.zeros(dim), cov).logpdf(z), cov


def pairwise_roc(scores, labels):
    """O(n^2) comparison of every positive with every negative, as a Fraction."""
    pos = [s for s, y in zip(scores, labels) if y]
    neg = [s for s, y in zip(scores, labels) if not y]
    wins = Fraction(0)
    for p in pos:
        for q in neg:
            wins += 1 if p > q else Fraction(1, 2) if p == q else 0
    return wins / (len(pos) * len(neg))


def threshold_ap(scores, labels):
    """Average precision from a sweep over every distinct threshold, exact."""
    n_pos = sum(1 for y in labels if y)
    total = Fraction(0)
    prev_recall = Fraction(0)
    for thr in sorted(set(scores), reverse=True):
        tp = sum(1 for s, y in zip(scores, labels) if s >= thr and y)
        fp = sum(1 for s, y in zip(scores, labels) if s >= thr and not y)
        recall = Fraction(tp, n_pos)
        if tp + fp:
            total += (recall - prev_recall) * Fraction(tp, tp + fp)
        prev_recall = recall
    return total


def central_difference(f, x, h=1e-5):
    """Central differences of scalar ``f`` at every entry of array ``x``."""
    x = np.array(x, dtype=float)
    out = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        xp = x.copy()
        xp[idx] += h
        xm = x.copy()
        xm[idx] -= h
        out[idx] = (f(xp) - f(xm)) / (2 * h)
    return out
