"""MAP training with Adam, phased parameter release and prior-weight annealing."""

import json
import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .graph import all_dyads, dyad_index
from .model import ModelState, log_likelihood, log_likelihood_grad, precompute_coefficients
from .prior import PriorState, capacitance, log_prior, log_prior_grad

log = logging.getLogger(__name__)

DEFAULT_LADDER = tuple(10.0 ** np.arange(6, -7, -1))
HYPER_KEYS = ("log_sigma_noise", "log_sigma_rbf", "log_c_x0", "q_raw")


class DivergenceError(FloatingPointError):
    def __init__(self, block):
        super().__init__(f"non-finite value or gradient in block {block!r}")
        self.block = block


@dataclass
class TrainConfig:
    """Optimizer and schedule settings.

    ``lambdas`` is the prior-weight ladder, strictly decreasing. ``static``
    freezes velocities at zero (the static-embedding ablation).
    ``reweight`` scales the batched likelihood by the inverse dyad
    inclusion probability. ``select_by`` picks the restart: ``"masked_nll"``
    (lowest held-out NLL at the selected weight) or ``"objective"`` (final
    unmasked objective). The objective is only comparable between restarts
    that selected the same weight, since the prior's normalizer grows as the
    weight shrinks.
    """

    num_bins: int = 20
    dim: int = 2
    rank: int = 5
    learning_rate: float = 0.1
    phase_epochs: int = 33
    anneal_epochs: int = 100
    lambdas: tuple = DEFAULT_LADDER
    batch_size: int | None = None
    seed: int = 0
    restarts: int = 5
    mask_fraction: float = 0.2
    static: bool = False
    reweight: bool = False
    select_by: str = "masked_nll"
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    max_halvings: int = 2

    def __post_init__(self):
        self.lambdas = tuple(float(x) for x in self.lambdas)
        for name in ("num_bins", "dim", "rank", "anneal_epochs", "restarts"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.phase_epochs < 0:
            raise ValueError("phase_epochs must be non-negative")
        if self.batch_size is not None and self.batch_size < 2:
            raise ValueError("batch_size must be at least 2")
        if not self.lambdas or any(x <= 0 for x in self.lambdas):
            raise ValueError("lambda ladder must be non-empty and positive")
        if any(b >= a for a, b in zip(self.lambdas, self.lambdas[1:])):
            raise ValueError("lambda ladder must be strictly decreasing")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.select_by not in ("objective", "masked_nll"):
            raise ValueError("select_by must be 'objective' or 'masked_nll'")

    def to_dict(self):
        d = asdict(self)
        d["lambdas"] = list(self.lambdas)
        return d

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path):
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass
class AnnealReport:
    """Masked-dyad NLL per ladder value and restart, plus selection results."""

    lambdas: list
    masked_nll: list = field(default_factory=list)     # one trace per restart
    selected_lambda: list = field(default_factory=list)
    final_objective: list = field(default_factory=list)
    learning_rate: list = field(default_factory=list)
    best_restart: int = -1

    @property
    def best_lambda(self):
        return self.selected_lambda[self.best_restart]

    def to_dict(self):
        return {
            "lambdas": list(self.lambdas),
            "masked_nll": [list(map(float, t)) for t in self.masked_nll],
            "masked_log_likelihood": [[-float(x) for x in t] for t in self.masked_nll],
            "selected_lambda": list(self.selected_lambda),
            "final_objective": list(self.final_objective),
            "learning_rate": list(self.learning_rate),
            "best_restart": self.best_restart,
        }

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))


# ---------------------------------------------------------------- objective

def objective(m, prior, coeffs, dyads=None, scale=1.0, cache=None):
    """Log-likelihood over ``dyads`` times ``scale`` plus the log prior
    (omitted when ``prior`` is None). Empty ``dyads`` leaves only the prior."""
    ll = log_likelihood(m, coeffs, dyads) if dyads is None or len(dyads) else 0.0
    value = scale * ll
    if prior is not None:
        value += log_prior(prior, m.x0, m.v, m.horizon, cache)
    return float(value)


def gradient(m, prior, coeffs, dyads=None, scale=1.0, cache=None):
    """Objective value and gradient dict over ``beta``, ``x0``, ``v`` and,
    with a prior, ``log_lambda``, ``log_sigma_noise``, ``log_sigma_rbf``,
    ``log_c_x0`` and ``q_raw``."""
    if dyads is not None and len(dyads) == 0:
        value, grads = 0.0, {"beta": np.zeros_like(m.beta), "x0": np.zeros_like(m.x0),
                             "v": np.zeros_like(m.v)}
    else:
        value, grads = log_likelihood_grad(m, coeffs, dyads)
    value *= scale
    for k in grads:
        grads[k] = grads[k] * scale
    if prior is not None:
        pv, pg = log_prior_grad(prior, m.x0, m.v, m.horizon, cache)
        value += pv
        grads["x0"] = grads["x0"] + pg.pop("x0")
        grads["v"] = grads["v"] + pg.pop("v")
        grads.update(pg)
    for k, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise DivergenceError(k)
    if not np.isfinite(value):
        raise DivergenceError("objective")
    return float(value), grads


# ---------------------------------------------------------------- batching

def sample_batch(num_nodes, size, seed):
    """Sorted uniform node subset of ``size`` without replacement."""
    if not 1 <= size <= num_nodes:
        raise ValueError(f"batch size {size} outside [1, {num_nodes}]")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    return np.sort(rng.choice(num_nodes, size=size, replace=False))


def batch_dyads(nodes, allowed=None, num_nodes=None):
    """Dyads among ``nodes``; ``allowed`` is an optional boolean mask over
    all-dyad indices (see :func:`dyad_index`)."""
    a, b = np.triu_indices(len(nodes), k=1)
    I, J = nodes[a], nodes[b]
    if allowed is not None:
        keep = allowed[dyad_index(I, J, num_nodes)]
        I, J = I[keep], J[keep]
    return np.stack([I, J], axis=1)


class Adam:
    """Adam on a dict of arrays with per-key step counters, so blocks
    released later start with fresh bias correction."""

    def __init__(self, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.state = {}

    def step(self, params, grads, keys):
        """Descend on ``grads`` for ``keys`` in place."""
        for k in keys:
            g = np.asarray(grads[k], dtype=float)
            m, v, t = self.state.get(k, (np.zeros_like(g), np.zeros_like(g), 0))
            t += 1
            m = self.beta1 * m + (1 - self.beta1) * g
            v = self.beta2 * v + (1 - self.beta2) * g * g
            self.state[k] = (m, v, t)
            mhat = m / (1 - self.beta1 ** t)
            vhat = v / (1 - self.beta2 ** t)
            params[k] = params[k] - self.lr * mhat / (np.sqrt(vhat) + self.eps)


# ---------------------------------------------------------------- fitting

def init_params(num_nodes, cfg, seed):
    """Velocities zero; everything else uniform on [-1, 1]."""
    rng = np.random.default_rng(seed)
    n, d, b, k = num_nodes, cfg.dim, cfg.num_bins, min(cfg.rank, num_nodes)
    return {
        "beta": rng.uniform(-1, 1, n),
        "x0": rng.uniform(-1, 1, (n, d)),
        "v": np.zeros((b, n, d)),
        "log_sigma_noise": rng.uniform(-1, 1),
        "log_sigma_rbf": rng.uniform(-1, 1),
        "log_c_x0": rng.uniform(-1, 1),
        "q_raw": rng.uniform(-1, 1, (n, k)),
    }


def unpack(params, lam, horizon):
    m = ModelState(params["beta"], params["x0"], params["v"], horizon)
    prior = PriorState(lam, float(np.exp(params["log_sigma_noise"])),
                       float(np.exp(params["log_sigma_rbf"])),
                       float(np.exp(params["log_c_x0"])), params["q_raw"])
    return m, prior


class _Run:
    """One optimization trajectory over a fixed training dyad set."""

    def __init__(self, g, coeffs, cfg, params, allowed, rng, lr):
        self.g, self.coeffs, self.cfg = g, coeffs, cfg
        self.params = params
        self.allowed = allowed
        self.rng = rng
        self.adam = Adam(lr, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
        n = g.num_nodes
        self.batch = min(n, 256) if cfg.batch_size is None else min(cfg.batch_size, n)
        self.scale = 1.0
        if cfg.reweight and self.batch < n:
            self.scale = n * (n - 1) / (self.batch * (self.batch - 1))

    def epoch(self, lam, keys):
        n = self.g.num_nodes
        nodes = np.arange(n) if self.batch == n else sample_batch(n, self.batch, self.rng)
        dyads = batch_dyads(nodes, self.allowed, n)
        m, prior = unpack(self.params, lam, self.g.horizon)
        cache = capacitance(prior, m.num_bins, m.horizon)
        value, grads = gradient(m, prior, self.coeffs, dyads, self.scale, cache)
        self.adam.step(self.params, {k: -grads[k] for k in keys}, keys)
        for k in keys:
            if not np.all(np.isfinite(self.params[k])):
                raise DivergenceError(k)
        return value

    def schedule(self, ladder, on_stage=None):
        cfg = self.cfg
        motion = () if cfg.static else ("v",)
        for _ in range(cfg.phase_epochs):
            self.epoch(ladder[0], ("beta", "x0"))
        for _ in range(cfg.phase_epochs):
            self.epoch(ladder[0], ("beta", "x0") + motion)
        keys = ("beta", "x0") + motion + HYPER_KEYS
        for lam in ladder:
            for _ in range(cfg.anneal_epochs):
                self.epoch(lam, keys)
            if on_stage is not None:
                on_stage(lam, self.params)


def _masked_nll(params, lam, g, coeffs, masked):
    m, _ = unpack(params, lam, g.horizon)
    return -log_likelihood(m, coeffs, masked) if len(masked) else 0.0


def draw_mask(num_nodes, fraction, seed):
    rng = np.random.default_rng(seed)
    I, J = all_dyads(num_nodes)
    count = int(np.floor(fraction * len(I)))
    idx = np.sort(rng.choice(len(I), size=count, replace=False))
    return np.stack([I[idx], J[idx]], axis=1)


def _fit_restart(g, coeffs, cfg, masked, seed, checkpoint_dir=None, tag=""):
    """Masked annealing pass, selection of lambda, then unmasked retrain."""
    n = g.num_nodes
    allowed = np.ones(n * (n - 1) // 2, dtype=bool)
    if len(masked):
        allowed[dyad_index(masked[:, 0], masked[:, 1], n)] = False
    ladder = list(cfg.lambdas)
    lr = cfg.learning_rate
    for attempt in range(cfg.max_halvings + 1):
        seeds = np.random.SeedSequence(seed).spawn(3)
        init_seed = int(seeds[0].generate_state(1)[0])
        try:
            trace = []
            run = _Run(g, coeffs, cfg, init_params(n, cfg, init_seed), allowed,
                       np.random.default_rng(seeds[1]), lr)

            def record(lam, params):
                trace.append(_masked_nll(params, lam, g, coeffs, masked))
                log.info("restart %s lambda %.0e masked NLL %.4f", tag, lam, trace[-1])
                if checkpoint_dir is not None:
                    _stage_checkpoint(checkpoint_dir, tag, "masked", lam, params, g.horizon)

            run.schedule(ladder, record)
            best = int(np.argmin(trace))
            lam_star = ladder[best]

            final = _Run(g, coeffs, cfg, init_params(n, cfg, init_seed), None,
                         np.random.default_rng(seeds[2]), lr)

            def stage(lam, params):
                if checkpoint_dir is not None:
                    _stage_checkpoint(checkpoint_dir, tag, "final", lam, params, g.horizon)

            final.schedule(ladder[:best + 1], stage)
            m, prior = unpack(final.params, lam_star, g.horizon)
            value = objective(m, prior, coeffs)
            if not np.isfinite(value):
                raise DivergenceError("objective")
            return m, prior, trace, lam_star, value, lr
        except (DivergenceError, np.linalg.LinAlgError, FloatingPointError) as exc:
            log.warning("restart %s diverged (%s); halving learning rate", tag, exc)
            lr /= 2
    return None


def _stage_checkpoint(directory, tag, kind, lam, params, horizon):
    from .model import save_checkpoint

    m, prior = unpack(params, lam, horizon)
    path = Path(directory) / f"stage_{tag}_{kind}_{lam:.0e}.json"
    save_checkpoint(path, m, prior, {"lambda": lam, "stage": kind})


def fit(g, cfg, masked_dyads=None, checkpoint_dir=None):
    """Train on the residual graph ``g``.

    Returns ``(model, prior, report)`` for the best restart. ``masked_dyads``
    defaults to a seeded draw of ``cfg.mask_fraction`` of all dyads.
    """
    if g.num_nodes < 2:
        raise ValueError("need at least two nodes")
    coeffs = precompute_coefficients(g, cfg.num_bins)
    if masked_dyads is None:
        masked_dyads = draw_mask(g.num_nodes, cfg.mask_fraction, cfg.seed)
    masked = np.asarray(masked_dyads, dtype=np.int64).reshape(-1, 2)
    report = AnnealReport(list(cfg.lambdas))
    results = []
    for r, ss in enumerate(np.random.SeedSequence(cfg.seed).spawn(cfg.restarts)):
        out = _fit_restart(g, coeffs, cfg, masked, ss.generate_state(4).tolist(),
                           checkpoint_dir, tag=str(r))
        if out is None:
            log.warning("restart %d aborted after repeated divergence", r)
            report.masked_nll.append([])
            report.selected_lambda.append(None)
            report.final_objective.append(None)
            report.learning_rate.append(None)
            results.append(None)
            continue
        m, prior, trace, lam_star, value, lr = out
        report.masked_nll.append(trace)
        report.selected_lambda.append(lam_star)
        report.final_objective.append(value)
        report.learning_rate.append(lr)
        results.append((m, prior))
    ok = [r for r, res in enumerate(results) if res is not None]
    if not ok:
        raise RuntimeError("every restart diverged")
    if cfg.select_by == "objective":
        best = max(ok, key=lambda r: report.final_objective[r])
    else:
        best = min(ok, key=lambda r: min(report.masked_nll[r]))
    report.best_restart = best
    m, prior = results[best]
    return m, prior, report
