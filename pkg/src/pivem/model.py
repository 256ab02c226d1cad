"""Piecewise-velocity latent distance model.

Node ``i`` starts at ``x0[i]`` and moves with constant velocity ``v[b, i]``
inside bin ``b``; the pairwise intensity is
``exp(beta_i + beta_j - |r_i(t) - r_j(t)|^2)``. Integrals of the intensity
over a bin have a closed form in terms of the error function, so the
Poisson log-likelihood never needs numerical quadrature.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.special import erf, erfcx

from .graph import all_dyads, dyad_index

#: relative speeds below this use the constant-distance limit of the integral
VELOCITY_EPS = 1e-8

_SQRT_PI_2 = 0.5 * np.sqrt(np.pi)
_GL_X, _GL_W = np.polynomial.legendre.leggauss(24)


@dataclass(frozen=True)
class ModelState:
    """Biases ``beta (N,)``, initial positions ``x0 (N, D)`` and per-bin
    velocities ``v (B, N, D)`` on the timeline ``[0, horizon]``."""

    beta: np.ndarray
    x0: np.ndarray
    v: np.ndarray
    horizon: float = 1.0

    def __post_init__(self):
        beta = np.asarray(self.beta, dtype=float)
        x0 = np.asarray(self.x0, dtype=float)
        v = np.asarray(self.v, dtype=float)
        if x0.ndim != 2 or v.ndim != 3 or beta.shape != (x0.shape[0],) \
                or v.shape[1:] != x0.shape:
            raise ValueError(f"inconsistent shapes beta{beta.shape} x0{x0.shape} v{v.shape}")
        if v.shape[0] < 1:
            raise ValueError("need at least one bin")
        if not (np.all(np.isfinite(beta)) and np.all(np.isfinite(x0)) and np.all(np.isfinite(v))):
            raise ValueError("model parameters must be finite")
        if not self.horizon > 0:
            raise ValueError("horizon must be positive")
        object.__setattr__(self, "beta", beta)
        object.__setattr__(self, "x0", x0)
        object.__setattr__(self, "v", v)
        object.__setattr__(self, "horizon", float(self.horizon))

    @classmethod
    def zeros(cls, num_nodes, dim, num_bins, horizon=1.0):
        return cls(np.zeros(num_nodes), np.zeros((num_nodes, dim)),
                   np.zeros((num_bins, num_nodes, dim)), horizon)

    @property
    def num_nodes(self):
        return self.x0.shape[0]

    @property
    def dim(self):
        return self.x0.shape[1]

    @property
    def num_bins(self):
        return self.v.shape[0]

    @property
    def bin_width(self):
        return self.horizon / self.num_bins

    def bin_starts(self):
        """Positions at the left edge of every bin, shape ``(B, N, D)``."""
        steps = np.cumsum(self.v, axis=0) * self.bin_width
        starts = np.empty_like(self.v)
        starts[0] = self.x0
        starts[1:] = self.x0 + steps[:-1]
        return starts

    def to_dict(self):
        return {"N": self.num_nodes, "D": self.dim, "B": self.num_bins,
                "T": self.horizon, "beta": self.beta.tolist(),
                "x0": self.x0.tolist(), "v": self.v.tolist()}

    @classmethod
    def from_dict(cls, d):
        m = cls(np.array(d["beta"], dtype=float).reshape(d["N"]),
                np.array(d["x0"], dtype=float).reshape(d["N"], d["D"]),
                np.array(d["v"], dtype=float).reshape(d["B"], d["N"], d["D"]),
                float(d["T"]))
        return m


def bin_of(t, num_bins, bin_width):
    """Zero-based bin holding ``t``; boundaries go right, ``t = T`` to the last bin."""
    b = np.floor(np.asarray(t, dtype=float) / bin_width).astype(np.int64)
    return np.clip(b, 0, num_bins - 1)


def _check_time(m, t):
    t = np.asarray(t, dtype=float)
    if np.any(t < 0) or np.any(t > m.horizon):
        raise ValueError(f"time outside [0, {m.horizon}]")
    return t


def position(m, i, t):
    """Latent position of node ``i`` at time ``t`` (scalar or array)."""
    t = _check_time(m, t)
    b = bin_of(t, m.num_bins, m.bin_width)
    starts = m.bin_starts()
    local = t - b * m.bin_width
    return starts[b, i] + local[..., None] * m.v[b, i]


def positions(m, t):
    """Positions of all nodes at time ``t``, shape ``(N, D)``."""
    t = float(_check_time(m, t))
    b = int(bin_of(t, m.num_bins, m.bin_width))
    return m.bin_starts()[b] + (t - b * m.bin_width) * m.v[b]


def intensity(m, i, j, t):
    if i == j:
        raise ValueError("intensity is defined for distinct nodes only")
    d = position(m, i, t) - position(m, j, t)
    return np.exp(m.beta[i] + m.beta[j] - np.sum(d * d, axis=-1))


def segment_integral(beta, dx, dv, s0, s1, moments=False):
    """Integral of ``exp(beta - |dx + dv s|^2)`` for ``s`` in ``[s0, s1]``.

    Arguments broadcast over leading axes; ``dx`` and ``dv`` carry the
    latent dimension last. The erf closed form is evaluated through
    ``erfcx`` on whichever side of the Gaussian peak the segment lies, so
    no difference of two values close to one is ever taken.

    With ``moments=True`` also returns the first and second moments
    ``int s * f`` and ``int s^2 * f``, needed by the gradient.
    """
    beta = np.asarray(beta, dtype=float)
    s0 = np.asarray(s0, dtype=float)
    s1 = np.asarray(s1, dtype=float)
    a = np.sum(dv * dv, axis=-1)
    b = np.sum(dx * dv, axis=-1)
    nv = np.sqrt(a)
    still = nv < VELOCITY_EPS
    safe = np.where(still, 1.0, nv)

    q0 = np.sum((dx + dv * s0[..., None]) ** 2, axis=-1)
    q1 = np.sum((dx + dv * s1[..., None]) ** 2, axis=-1)
    r = b / safe
    # squared distance at the closest approach along the (infinite) line
    perp = dx - (b / np.where(still, 1.0, a))[..., None] * dv
    h = np.sum(perp * perp, axis=-1)
    u0 = nv * s0 + r
    u1 = nv * s1 + r

    with np.errstate(over="ignore", invalid="ignore"):
        right = np.exp(beta - q0) * erfcx(u0) - np.exp(beta - q1) * erfcx(u1)
        left = np.exp(beta - q1) * erfcx(-u1) - np.exp(beta - q0) * erfcx(-u0)
        mid = np.exp(beta - h) * (erf(u1) - erf(u0))
    J = np.where(u0 >= 0, right, np.where(u1 <= 0, left, mid))
    c = np.sum(dx * dx, axis=-1)
    const = np.exp(beta - c)
    i0 = np.where(still, const * (s1 - s0), _SQRT_PI_2 * J / safe)
    # the erf difference cancels when the segment barely moves; Gauss-Legendre
    # is exact to rounding there because the exponent is nearly linear
    slow = (nv * (s1 - s0) < 1e-2) & ~still
    if np.any(slow):
        g0, g1, g2 = _gauss_moments(beta, dx, dv, s0, s1, slow)
        i0 = np.where(slow, g0, i0)
    i0 = np.maximum(i0, 0.0)
    if not moments:
        return i0

    e0, e1 = np.exp(beta - q0), np.exp(beta - q1)
    two_a = np.where(still, 1.0, 2.0 * a)
    i1 = (e0 - e1 - 2.0 * b * i0) / two_a
    i2 = (s0 * e0 - s1 * e1 + i0 - 2.0 * b * i1) / two_a
    if np.any(slow):
        i1 = np.where(slow, g1, i1)
        i2 = np.where(slow, g2, i2)
    i1 = np.where(still, const * (s1 ** 2 - s0 ** 2) / 2, i1)
    i2 = np.where(still, const * (s1 ** 3 - s0 ** 3) / 3, i2)
    return i0, i1, i2


def _gauss_moments(beta, dx, dv, s0, s1, mask):
    shape = mask.shape
    beta, s0, s1 = (np.broadcast_to(x, shape)[mask] for x in (beta, s0, s1))
    dx = np.broadcast_to(dx, shape + dx.shape[-1:])[mask]
    dv = np.broadcast_to(dv, shape + dv.shape[-1:])[mask]
    half = 0.5 * (s1 - s0)
    s = 0.5 * (s1 + s0)[:, None] + half[:, None] * _GL_X[None, :]
    d = dx[:, None, :] + dv[:, None, :] * s[..., None]
    f = np.exp(beta[:, None] - np.sum(d * d, axis=-1)) * _GL_W * half[:, None]
    m0 = np.zeros(shape)
    m1 = np.zeros(shape)
    m2 = np.zeros(shape)
    m0[mask] = np.sum(f, axis=1)
    m1[mask] = np.sum(f * s, axis=1)
    m2[mask] = np.sum(f * s * s, axis=1)
    return m0, m1, m2


def integrate_intensity(m, i, j, t_lo, t_hi):
    """Exact integral of the dyad intensity over ``[t_lo, t_hi]``."""
    if t_lo > t_hi:
        raise ValueError("t_lo must not exceed t_hi")
    _check_time(m, [t_lo, t_hi])
    if i == j:
        raise ValueError("intensity is defined for distinct nodes only")
    w = m.bin_width
    b_lo = int(bin_of(t_lo, m.num_bins, w))
    b_hi = int(bin_of(t_hi, m.num_bins, w))
    bs = np.arange(b_lo, b_hi + 1)
    starts = m.bin_starts()
    s0 = np.maximum(t_lo - bs * w, 0.0)
    s1 = np.minimum(t_hi - bs * w, w)
    s1 = np.where(bs == m.num_bins - 1, t_hi - bs * w, s1)
    s1 = np.maximum(s1, s0)
    dx = starts[bs, i] - starts[bs, j]
    dv = m.v[bs, i] - m.v[bs, j]
    return float(np.sum(segment_integral(m.beta[i] + m.beta[j], dx, dv, s0, s1)))


def integrate_intervals(m, src, dst, t_lo, t_hi, extrapolate=False):
    """Vectorized :func:`integrate_intensity` over many (dyad, interval) rows.

    With ``extrapolate=True`` times beyond the horizon are allowed and
    continue along the last bin's velocities.
    """
    src = np.asarray(src, dtype=np.int64)
    dst = np.asarray(dst, dtype=np.int64)
    t_lo = np.asarray(t_lo, dtype=float)
    t_hi = np.asarray(t_hi, dtype=float)
    if np.any(t_lo > t_hi):
        raise ValueError("t_lo must not exceed t_hi")
    if not extrapolate:
        _check_time(m, np.concatenate([t_lo, t_hi]))
    w = m.bin_width
    starts = m.bin_starts()
    beta = m.beta[src] + m.beta[dst]
    b_lo = bin_of(t_lo, m.num_bins, w)
    b_hi = bin_of(t_hi, m.num_bins, w)
    total = np.zeros(len(src))
    for k in range(int((b_hi - b_lo).max(initial=0)) + 1):
        b = b_lo + k
        live = b <= b_hi
        b = np.minimum(b, m.num_bins - 1)
        s0 = np.maximum(t_lo - b * w, 0.0)
        s1 = np.where(b == m.num_bins - 1, t_hi - b * w, np.minimum(t_hi - b * w, w))
        s1 = np.maximum(s1, s0)
        dx = starts[b, src] - starts[b, dst]
        dv = m.v[b, src] - m.v[b, dst]
        total += np.where(live, segment_integral(beta, dx, dv, s0, s1), 0.0)
    return total


@dataclass(frozen=True)
class BinCoefficients:
    """Per (dyad, bin) event statistics for dyads with at least one event.

    ``keys`` are upper-triangle dyad indices (sorted); ``counts``,
    ``alpha1`` and ``alpha2`` have shape ``(len(keys), B)`` and hold the
    number of events, the sum of in-bin offsets and the sum of squared
    in-bin offsets.
    """

    num_nodes: int
    num_bins: int
    bin_width: float
    keys: np.ndarray
    counts: np.ndarray
    alpha1: np.ndarray
    alpha2: np.ndarray

    def lookup(self, src, dst):
        """Dense ``(M, B)`` count/alpha1/alpha2 rows for the given dyads."""
        k = dyad_index(src, dst, self.num_nodes)
        pos = np.searchsorted(self.keys, k)
        pos = np.minimum(pos, max(len(self.keys) - 1, 0))
        hit = (self.keys[pos] == k) if len(self.keys) else np.zeros(len(k), bool)
        out = []
        for arr in (self.counts, self.alpha1, self.alpha2):
            rows = np.zeros((len(k), self.num_bins))
            if len(self.keys):
                rows[hit] = arr[pos[hit]]
            out.append(rows)
        return tuple(out)

    @property
    def total_events(self):
        return int(self.counts.sum())


def precompute_coefficients(g, num_bins):
    """Collapse the events of ``g`` into :class:`BinCoefficients` for ``num_bins`` bins."""
    if num_bins < 1:
        raise ValueError("num_bins must be >= 1")
    w = g.horizon / num_bins
    keys = dyad_index(g.src, g.dst, g.num_nodes)
    uniq, inv = np.unique(keys, return_inverse=True)
    b = bin_of(g.times, num_bins, w)
    off = g.times - b * w
    shape = (len(uniq), num_bins)
    counts = np.zeros(shape)
    a1 = np.zeros(shape)
    a2 = np.zeros(shape)
    np.add.at(counts, (inv, b), 1.0)
    np.add.at(a1, (inv, b), off)
    np.add.at(a2, (inv, b), off * off)
    return BinCoefficients(g.num_nodes, num_bins, w, uniq, counts, a1, a2)


def _resolve_dyads(m, dyads):
    if dyads is None:
        return all_dyads(m.num_nodes)
    d = np.asarray(dyads, dtype=np.int64).reshape(-1, 2)
    if len(d) and (d.min() < 0 or d.max() >= m.num_nodes):
        raise ValueError("dyad outside node range")
    if np.any(d[:, 0] == d[:, 1]):
        raise ValueError("dyads must join distinct nodes")
    return np.minimum(d[:, 0], d[:, 1]), np.maximum(d[:, 0], d[:, 1])


def _dyad_terms(m, coeffs, I, J, grad):
    w = m.bin_width
    starts = m.bin_starts()
    dx = starts[:, I] - starts[:, J]                       # (B, M, D)
    dv = m.v[:, I] - m.v[:, J]
    beta = (m.beta[I] + m.beta[J])[None, :]
    cnt, a1, a2 = (c.T for c in coeffs.lookup(I, J))      # (B, M)

    dd = np.sum(dx * dx, axis=-1)
    xv = np.sum(dx * dv, axis=-1)
    vv = np.sum(dv * dv, axis=-1)
    event = np.sum(cnt * beta - (cnt * dd + 2 * a1 * xv + a2 * vv))
    s0 = np.zeros_like(dd)
    s1 = np.full_like(dd, w)
    if not grad:
        return event - np.sum(segment_integral(beta, dx, dv, s0, s1))
    i0, i1, i2 = segment_integral(beta, dx, dv, s0, s1, moments=True)
    value = event - np.sum(i0)

    g_beta = np.sum(cnt - i0, axis=0)                      # (M,)
    g_dx = -2 * (cnt[..., None] * dx + a1[..., None] * dv) \
        + 2 * (i0[..., None] * dx + i1[..., None] * dv)
    g_dv = -2 * (a1[..., None] * dx + a2[..., None] * dv) \
        + 2 * (i1[..., None] * dx + i2[..., None] * dv)
    # bin-start offsets depend on all earlier velocities
    tail = np.cumsum(g_dx[::-1], axis=0)[::-1]
    g_dv = g_dv.copy()
    g_dv[:-1] += w * tail[1:]
    g_dx0 = tail[0]
    return value, g_beta, g_dx0, g_dv


def log_likelihood(m, coeffs, dyads=None):
    """Poisson log-likelihood of the events summarized in ``coeffs``,
    restricted to ``dyads`` (``(M, 2)`` array; all dyads when ``None``)."""
    _check_coeffs(m, coeffs)
    I, J = _resolve_dyads(m, dyads)
    if len(I) == 0:
        return 0.0
    return float(_dyad_terms(m, coeffs, I, J, grad=False))


def log_likelihood_grad(m, coeffs, dyads=None):
    """Log-likelihood and its gradient as ``(value, {"beta", "x0", "v"})``."""
    _check_coeffs(m, coeffs)
    I, J = _resolve_dyads(m, dyads)
    grads = {"beta": np.zeros_like(m.beta), "x0": np.zeros_like(m.x0),
             "v": np.zeros_like(m.v)}
    if len(I) == 0:
        return 0.0, grads
    value, g_beta, g_dx0, g_dv = _dyad_terms(m, coeffs, I, J, grad=True)
    np.add.at(grads["beta"], I, g_beta)
    np.add.at(grads["beta"], J, g_beta)
    np.add.at(grads["x0"], I, g_dx0)
    np.add.at(grads["x0"], J, -g_dx0)
    gv = np.zeros((m.num_nodes, m.num_bins, m.dim))
    np.add.at(gv, I, g_dv.transpose(1, 0, 2))
    np.add.at(gv, J, -g_dv.transpose(1, 0, 2))
    grads["v"] = gv.transpose(1, 0, 2)
    return float(value), grads


def _check_coeffs(m, coeffs):
    if coeffs.num_bins != m.num_bins or coeffs.num_nodes != m.num_nodes:
        raise ValueError("coefficients were built for a different model shape")
    if not np.isclose(coeffs.bin_width, m.bin_width, rtol=1e-12, atol=0):
        raise ValueError("coefficients were built for a different horizon")


@dataclass(frozen=True)
class BoundReport:
    """Per-dyad check of the squared-distance sandwich on one interval.

    Rows whose zero-event probability rounds to 0 or 1 are listed in
    ``skipped`` and carry NaN bounds.
    """

    src: np.ndarray
    dst: np.ndarray
    interval: tuple
    mean_sq_dist: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    radius: np.ndarray
    p_zero: np.ndarray
    p_some: np.ndarray
    counts: np.ndarray
    skipped: np.ndarray
    violations: np.ndarray

    @property
    def num_violations(self):
        return int(self.violations.sum())


def _sq_dist_profile(m, I, J, t_lo, t_hi):
    """Exact integral and supremum of ``|r_i - r_j|^2`` over ``[t_lo, t_hi]``."""
    w = m.bin_width
    starts = m.bin_starts()
    b_lo = int(bin_of(t_lo, m.num_bins, w))
    b_hi = int(bin_of(t_hi, m.num_bins, w))
    integral = np.zeros(len(I))
    sup = np.zeros(len(I))
    for b in range(b_lo, b_hi + 1):
        s0 = max(t_lo - b * w, 0.0)
        s1 = t_hi - b * w if b == m.num_bins - 1 else min(t_hi - b * w, w)
        s1 = max(s1, s0)
        dx = starts[b, I] - starts[b, J]
        dv = m.v[b, I] - m.v[b, J]
        a = np.sum(dv * dv, -1)
        c2 = np.sum(dx * dv, -1)
        c = np.sum(dx * dx, -1)
        integral += a * (s1 ** 3 - s0 ** 3) / 3 + c2 * (s1 ** 2 - s0 ** 2) + c * (s1 - s0)
        # convex quadratic: its maximum over a segment sits at an endpoint
        q = lambda s: a * s * s + 2 * c2 * s + c  # noqa: E731
        sup = np.maximum(sup, np.maximum(q(s0), q(s1)))
    return integral, sup


def check_bounds(m, g=None, interval=None, dyads=None, rtol=1e-9):
    """Evaluate the lower/upper bounds on the time-averaged squared distance.

    The zero-event probability is ``exp(-int lambda)``; the bounds are
    ``log(len / -log p0) + beta_ij <= mean |r_i - r_j|^2 <= log(len /
    -log(1 - p>)) + beta_ij + R`` with ``R`` the supremum of the squared
    distance on the interval. Violations are flagged beyond a relative
    slack ``rtol`` to absorb rounding when a bound is tight.
    """
    if interval is None:
        interval = (0.0, m.horizon)
    t_lo, t_hi = map(float, interval)
    if not t_hi > t_lo:
        raise ValueError("interval must have positive length")
    _check_time(m, [t_lo, t_hi])
    I, J = _resolve_dyads(m, dyads)
    length = t_hi - t_lo
    lam = integrate_intervals(m, I, J, np.full(len(I), t_lo), np.full(len(I), t_hi))
    p0 = np.exp(-lam)
    p_some = 1.0 - p0
    integral, sup = _sq_dist_profile(m, I, J, t_lo, t_hi)
    mean = integral / length
    skipped = (p0 <= 0.0) | (p0 >= 1.0)
    beta = m.beta[I] + m.beta[J]
    # -log p0 = -log(1 - p>) = int lambda; use it directly so the bounds keep
    # full precision when p0 is close to 1
    with np.errstate(divide="ignore", invalid="ignore"):
        lower = np.log(length / lam) + beta
    upper = lower + sup
    lower = np.where(skipped, np.nan, lower)
    upper = np.where(skipped, np.nan, upper)
    slack = rtol * np.maximum(1.0, np.abs(mean))
    bad = ~skipped & ((lower > mean + slack) | (mean > upper + slack))
    counts = np.zeros(len(I), dtype=np.int64)
    if g is not None:
        inside = (g.times >= t_lo) & (g.times <= t_hi)
        ek = dyad_index(g.src[inside], g.dst[inside], g.num_nodes)
        full = np.bincount(ek, minlength=m.num_nodes * (m.num_nodes - 1) // 2)
        counts = full[dyad_index(I, J, m.num_nodes)]
    return BoundReport(I, J, (t_lo, t_hi), mean, lower, upper, sup, p0, p_some,
                       counts, skipped, bad)


def piecewise_approximation_error(times, values, num_bins):
    """Sup-norm gap between a sampled curve and its bin-boundary interpolant.

    The interpolant starts at ``f(0)`` and moves with velocity
    ``(f(b w) - f((b-1) w)) / w`` in bin ``b``, so it agrees with ``f`` at
    every bin boundary. Boundary values are read off the samples by linear
    interpolation (exact when the sample grid contains the boundaries).
    """
    times = np.asarray(times, dtype=float)
    values = np.asarray(values, dtype=float)
    if values.ndim == 1:
        values = values[:, None]
    if len(times) < num_bins + 1:
        raise ValueError(f"need at least {num_bins + 1} samples, got {len(times)}")
    horizon = times[-1]
    w = horizon / num_bins
    grid = np.arange(num_bins + 1) * w
    grid[-1] = horizon
    knots = np.stack([np.interp(grid, times, values[:, d])
                      for d in range(values.shape[1])], axis=1)
    vel = np.diff(knots, axis=0) / w
    m = ModelState(np.zeros(1), knots[:1], vel[:, None, :], horizon)
    starts = m.bin_starts()[:, 0]
    b = bin_of(times, num_bins, w)
    approx = starts[b] + (times - b * w)[:, None] * vel[b]
    return float(np.max(np.linalg.norm(values - approx, axis=1)))


def save_checkpoint(path, m, prior=None, extra=None):
    """Write ``m`` (and optionally its prior) as JSON; floats round-trip exactly."""
    obj = {"schema_version": 1, "model": m.to_dict()}
    if prior is not None:
        obj["prior"] = prior.to_dict()
    if extra:
        obj["extra"] = extra
    Path(path).write_text(json.dumps(obj))


def load_checkpoint(path):
    """Return ``(model, prior_or_None, extra)`` from :func:`save_checkpoint` output."""
    from .prior import PriorState

    obj = json.loads(Path(path).read_text())
    if obj.get("schema_version") != 1:
        raise ValueError(f"unsupported checkpoint schema {obj.get('schema_version')!r}")
    m = ModelState.from_dict(obj["model"])
    prior = PriorState.from_dict(obj["prior"]) if "prior" in obj else None
    return m, prior, obj.get("extra", {})
