"""Kronecker-structured Gaussian prior over initial positions and velocities.

The stacked parameter tensor ``Z = [x0; v]`` of shape ``(B + 1, N, D)`` is
flattened in C order (bin slot outermost, latent dimension innermost) and
given covariance

    Sigma = lam^2 * (sigma^2 I + Bt kron C kron I_D),

with ``Bt = [c_x0] (+) RBF(bin centers)`` and ``C = Q Q^T``. Writing
``Bt = L L^T`` gives the low-rank factor ``P = L kron Q``; the Woodbury
identity and the matrix determinant lemma then reduce every solve to the
``(B + 1) k`` square capacitance matrix ``R = I + P^T P / sigma^2``.
Because the dimension factor is the identity, the D columns of ``Z`` are
independent and share one ``R``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_factor, cho_solve, cholesky
from scipy.special import softmax

#: added to the RBF block diagonal before factorizing
JITTER = 1e-8

_LOG_2PI = np.log(2 * np.pi)


@dataclass(frozen=True)
class PriorState:
    lam: float
    sigma_noise: float
    sigma_rbf: float
    c_x0: float
    q_raw: np.ndarray

    def __post_init__(self):
        q_raw = np.atleast_2d(np.asarray(self.q_raw, dtype=float))
        object.__setattr__(self, "q_raw", q_raw)
        for name in ("lam", "sigma_noise", "sigma_rbf", "c_x0"):
            val = float(getattr(self, name))
            if not (np.isfinite(val) and val > 0):
                raise ValueError(f"{name} must be positive and finite, got {val}")
            object.__setattr__(self, name, val)
        if q_raw.shape[1] > q_raw.shape[0]:
            raise ValueError("rank k must not exceed the number of nodes")
        if not np.all(np.isfinite(q_raw)):
            raise ValueError("q_raw must be finite")

    @property
    def num_nodes(self):
        return self.q_raw.shape[0]

    @property
    def rank(self):
        return self.q_raw.shape[1]

    @property
    def q(self):
        """Row-stochastic node factor (softmax of each row of ``q_raw``)."""
        return softmax(self.q_raw, axis=1)

    def replace(self, **kw):
        d = dict(lam=self.lam, sigma_noise=self.sigma_noise, sigma_rbf=self.sigma_rbf,
                 c_x0=self.c_x0, q_raw=self.q_raw)
        d.update(kw)
        return PriorState(**d)

    def to_dict(self):
        return {"lambda": self.lam, "sigma_noise": self.sigma_noise,
                "sigma_rbf": self.sigma_rbf, "c_x0": self.c_x0,
                "q_raw": self.q_raw.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(d["lambda"], d["sigma_noise"], d["sigma_rbf"], d["c_x0"],
                   np.array(d["q_raw"], dtype=float))

    @classmethod
    def from_memberships(cls, groups, lam=1.0, sigma_noise=1.0, sigma_rbf=0.1,
                         c_x0=1.0, sharpness=40.0):
        """Prior whose node factor is (numerically) a hard group assignment."""
        groups = np.asarray(groups)
        k = int(groups.max()) + 1
        q_raw = np.zeros((len(groups), k))
        q_raw[np.arange(len(groups)), groups] = sharpness
        return cls(lam, sigma_noise, sigma_rbf, c_x0, q_raw)


def bin_centers(num_bins, horizon=1.0):
    w = horizon / num_bins
    return (np.arange(num_bins) + 0.5) * w


def build_time_kernel(num_bins, horizon, sigma_rbf, c_x0, jitter=0.0):
    """``(B + 1) x (B + 1)`` block-diagonal time covariance ``[c_x0] (+) RBF``."""
    if num_bins < 1:
        raise ValueError("num_bins must be >= 1")
    if not sigma_rbf > 0:
        raise ValueError("sigma_rbf must be positive")
    c = bin_centers(num_bins, horizon)
    diff = c[:, None] - c[None, :]
    out = np.zeros((num_bins + 1, num_bins + 1))
    out[0, 0] = c_x0
    out[1:, 1:] = np.exp(-diff ** 2 / (2 * sigma_rbf ** 2)) + jitter * np.eye(num_bins)
    return out


def build_node_kernel(prior):
    """Return the row-stochastic factor ``Q``; ``C = Q Q^T`` is left implicit."""
    return prior.q


@dataclass
class CapacitanceCache:
    """Factorizations shared by every prior evaluation at fixed hyperparameters."""

    time_kernel: np.ndarray
    chol_time: np.ndarray
    q: np.ndarray
    sigma2: float
    lam: float
    capacitance: np.ndarray
    factor: tuple
    logdet: float
    key: tuple = ()
    _inverse: np.ndarray | None = field(default=None, repr=False)

    @property
    def num_slots(self):
        return self.time_kernel.shape[0]

    @property
    def rank(self):
        return self.q.shape[1]

    def inverse(self):
        if self._inverse is None:
            self._inverse = cho_solve(self.factor, np.eye(len(self.capacitance)))
        return self._inverse


def capacitance(prior, num_bins, horizon=1.0):
    """Build the :class:`CapacitanceCache` for ``prior`` at ``num_bins`` bins."""
    bt = build_time_kernel(num_bins, horizon, prior.sigma_rbf, prior.c_x0, JITTER)
    chol = cholesky(bt, lower=True)
    q = prior.q
    s2 = prior.sigma_noise ** 2
    R = np.eye((num_bins + 1) * q.shape[1]) + np.kron(chol.T @ chol, q.T @ q) / s2
    try:
        factor = cho_factor(R, lower=True)
    except np.linalg.LinAlgError as exc:
        raise np.linalg.LinAlgError(
            f"capacitance matrix not positive definite (min eigenvalue "
            f"{np.linalg.eigvalsh(R).min():.3e})") from exc
    logdet = 2.0 * np.sum(np.log(np.diag(factor[0])))
    return CapacitanceCache(bt, chol, q, s2, prior.lam, R, factor, logdet, _cache_key(prior))


def _cache_key(prior):
    return (prior.sigma_noise, prior.sigma_rbf, prior.c_x0, prior.q_raw.tobytes())


def _stack(x0, v):
    x0 = np.asarray(x0, dtype=float)
    v = np.asarray(v, dtype=float)
    if x0.ndim != 2 or v.ndim != 3 or v.shape[1:] != x0.shape:
        raise ValueError(f"shape mismatch x0{x0.shape} v{v.shape}")
    z = np.concatenate([x0[None], v], axis=0)
    if not np.all(np.isfinite(z)):
        raise ValueError("prior evaluated at non-finite parameters")
    return z


def _project(cache, z):
    # P^T z for every latent column: (B+1, k, D)
    return np.einsum("ba,bnd,nk->akd", cache.chol_time, z, cache.q, optimize=True)


def _lift(cache, w):
    # P w: (B+1, N, D)
    return np.einsum("ba,nk,akd->bnd", cache.chol_time, cache.q, w, optimize=True)


def _check_cache(cache, prior, z):
    if cache.q.shape[0] != z.shape[1] or cache.num_slots != z.shape[0]:
        raise ValueError("prior cache built for a different model shape")
    if cache.key != _cache_key(prior):
        raise ValueError("prior cache is stale: hyperparameters changed since it was built")


def log_prior(prior, x0, v, horizon=1.0, cache=None):
    """Gaussian log-density of ``[x0; v]`` under ``prior``."""
    z = _stack(x0, v)
    if cache is None:
        cache = capacitance(prior, z.shape[0] - 1, horizon)
    _check_cache(cache, prior, z)
    return _value(prior, z, cache)[0]


def _value(prior, z, cache):
    slots, n, d = z.shape
    dim = z.size
    r = slots * cache.rank
    s2 = cache.sigma2
    w = _project(cache, z)
    u = cho_solve(cache.factor, w.reshape(r, d)).reshape(w.shape)
    quad_raw = np.sum(z * z) / s2 - np.sum(w * u) / s2 ** 2
    lam2 = prior.lam ** 2
    logdet = dim * (np.log(lam2) + np.log(s2)) + d * cache.logdet
    value = -0.5 * quad_raw / lam2 - 0.5 * logdet - 0.5 * dim * _LOG_2PI
    return value, quad_raw, u


def log_prior_grad(prior, x0, v, horizon=1.0, cache=None):
    """Log-density and its gradient.

    Gradient keys: ``x0``, ``v``, ``log_lambda``, ``log_sigma_noise``,
    ``log_sigma_rbf``, ``log_c_x0`` and ``q_raw``.
    """
    z = _stack(x0, v)
    if cache is None:
        cache = capacitance(prior, z.shape[0] - 1, horizon)
    _check_cache(cache, prior, z)
    slots, n, d = z.shape
    k = cache.rank
    dim = z.size
    r = slots * k
    s2 = cache.sigma2
    lam2 = prior.lam ** 2
    value, quad_raw, u = _value(prior, z, cache)

    # alpha = A^{-1} z with A = s2 I + P P^T
    alpha = z / s2 - _lift(cache, u) / s2 ** 2
    g_z = -alpha / lam2

    q, L, bt = cache.q, cache.chol_time, cache.time_kernel
    Rinv = cache.inverse().reshape(slots, k, slots, k)
    G = q.T @ q
    tr_Rinv = np.trace(cache.inverse())

    # d/dA of the log-density is  0.5/lam2 * sum_d a_d a_d^T - 0.5 d A^{-1}
    tr_Ainv = (slots * n - r + tr_Rinv) / s2
    g_s2 = 0.5 * np.sum(alpha * alpha) / lam2 - 0.5 * d * tr_Ainv

    aq = np.einsum("bnd,nk->bkd", alpha, q)
    g_bt = 0.5 / lam2 * np.einsum("bkd,ckd->bc", aq, aq)
    W = np.einsum("akcl,kl->ac", Rinv, G @ G)
    g_bt -= 0.5 * d * (np.eye(slots) * np.sum(q * q) / s2 - L @ W @ L.T / s2 ** 2)

    baq = np.einsum("bc,ckd->bkd", bt, aq)
    gq = 0.5 / lam2 * np.einsum("bnd,bkd->nk", alpha, baq)
    V = np.einsum("akcl,ac->kl", Rinv, L.T @ bt @ L)
    gq -= 0.5 * d * (np.trace(bt) * q / s2 - q @ V @ G / s2 ** 2)
    gq *= 2.0

    centers = bin_centers(slots - 1, horizon)
    diff2 = (centers[:, None] - centers[None, :]) ** 2
    rbf = np.exp(-diff2 / (2 * prior.sigma_rbf ** 2))
    grads = {
        "x0": g_z[0],
        "v": g_z[1:],
        "log_lambda": float(quad_raw / lam2 - dim),
        "log_sigma_noise": float(2 * s2 * g_s2),
        "log_sigma_rbf": float(np.sum(g_bt[1:, 1:] * rbf * diff2) / prior.sigma_rbf ** 2),
        "log_c_x0": float(prior.c_x0 * g_bt[0, 0]),
        "q_raw": q * (gq - np.sum(gq * q, axis=1, keepdims=True)),
    }
    return value, grads


def dense_covariance(prior, num_bins, dim, horizon=1.0):
    """Explicit covariance matrix; only for small instances and tests."""
    bt = build_time_kernel(num_bins, horizon, prior.sigma_rbf, prior.c_x0, JITTER)
    q = prior.q
    K = np.kron(np.kron(bt, q @ q.T), np.eye(dim))
    return prior.lam ** 2 * (prior.sigma_noise ** 2 * np.eye(len(K)) + K)


def sample_prior(prior, num_bins, dim, seed, horizon=1.0, size=None):
    """Draw ``(x0, v)`` from the prior.

    Uses ``z = lam * (sigma * xi0 + P kron I_D xi1)`` with independent
    standard normals, whose covariance is exactly ``Sigma``. With ``size``
    a leading batch axis is added to both outputs.
    """
    rng = np.random.default_rng(seed)
    cache = capacitance(prior, num_bins, horizon)
    n, k = prior.num_nodes, prior.rank
    batch = () if size is None else (int(size),)
    xi0 = rng.standard_normal(batch + (num_bins + 1, n, dim))
    xi1 = rng.standard_normal(batch + (num_bins + 1, k, dim))
    low = np.einsum("ba,nk,...akd->...bnd", cache.chol_time, cache.q, xi1, optimize=True)
    z = prior.lam * (prior.sigma_noise * xi0 + low)
    return z[..., 0, :, :], z[..., 1:, :, :]
