"""Synthetic continuous-time networks.

``sample_network_from_model`` draws exact NHPP events from a model by
thinning bin by bin; ``generate_prior_network`` wraps it around a draw from
the Kronecker prior with community-structured node factor, and
``sample_block_network`` produces the piecewise-constant block networks.
"""

from dataclasses import dataclass

import numpy as np

from .graph import EventGraph, all_dyads
from .model import ModelState
from .prior import PriorState, sample_prior

#: safety margin on the per-bin intensity bound
INFLATION = 1.05


def intensity_bounds(m, src, dst):
    """Per (bin, dyad) supremum of the intensity, shape ``(B, M)``.

    The exponent is a concave quadratic in the in-bin time, so the maximum
    is at the clipped critical point ``-<dx, dv> / |dv|^2``.
    """
    w = m.bin_width
    starts = m.bin_starts()
    dx = starts[:, src] - starts[:, dst]
    dv = m.v[:, src] - m.v[:, dst]
    a = np.sum(dv * dv, -1)
    b = np.sum(dx * dv, -1)
    with np.errstate(divide="ignore", invalid="ignore"):
        s = np.where(a > 0, -b / a, 0.0)
    s = np.clip(s, 0.0, w)
    d = dx + dv * s[..., None]
    with np.errstate(over="ignore"):
        return np.exp(m.beta[src] + m.beta[dst] - np.sum(d * d, -1))


def sample_network_from_model(m, seed, dyads=None, inflation=INFLATION):
    """Sample an :class:`EventGraph` on ``[0, T]`` from the model intensities.

    Lewis-Shedler thinning per (dyad, bin): candidates arrive at the
    inflated bound rate and are kept with probability
    ``lambda(t) / bound``.
    """
    rng = np.random.default_rng(seed)
    if dyads is None:
        src, dst = all_dyads(m.num_nodes)
    else:
        dyads = np.asarray(dyads, dtype=np.int64).reshape(-1, 2)
        src, dst = dyads[:, 0], dyads[:, 1]
    w = m.bin_width
    bound = intensity_bounds(m, src, dst) * inflation        # (B, M)
    if not np.all(np.isfinite(bound)):
        raise ValueError("intensity bound is not finite; parameters are unbounded")
    counts = rng.poisson(bound * w)
    b_idx, d_idx = np.nonzero(counts)
    reps = counts[b_idx, d_idx]
    b_idx = np.repeat(b_idx, reps)
    d_idx = np.repeat(d_idx, reps)
    local = rng.uniform(0.0, w, size=len(b_idx))

    starts = m.bin_starts()
    i, j = src[d_idx], dst[d_idx]
    d = (starts[b_idx, i] - starts[b_idx, j]) + local[:, None] * (m.v[b_idx, i] - m.v[b_idx, j])
    lam = np.exp(m.beta[i] + m.beta[j] - np.sum(d * d, -1))
    keep = rng.uniform(size=len(lam)) * bound[b_idx, d_idx] < lam
    t = np.minimum(b_idx[keep] * w + local[keep], m.horizon)
    return EventGraph.from_events(m.num_nodes, i[keep], j[keep], t, horizon=m.horizon)


def community_groups(num_nodes, num_groups):
    """Contiguous, near-equal community labels ``0..num_groups-1``."""
    return np.repeat(np.arange(num_groups), np.diff(np.linspace(0, num_nodes, num_groups + 1).astype(int)))


@dataclass
class PriorNetwork:
    graph: EventGraph
    truth: ModelState
    prior: PriorState
    groups: np.ndarray

    def sidecar(self):
        return {"groups": self.groups.tolist(), "model": self.truth.to_dict(),
                "prior": self.prior.to_dict()}


def generate_prior_network(num_nodes=100, num_bins=100, rank=20, dim=2, seed=0,
                           lam=6.0, sigma_noise=0.2, sigma_rbf=0.2, c_x0=0.01,
                           time_scale=150.0, beta=0.0):
    """Network whose trajectories are drawn from the prior.

    Nodes are split into ``rank`` communities that share the low-rank part
    of their motion. Events are generated on ``[0, time_scale]`` with
    biases ``beta`` and then rescaled to ``[0, 1]``; the returned
    ground-truth model is expressed on the rescaled timeline (velocities
    times ``time_scale``, biases shifted by ``log(time_scale) / 2``).

    The defaults keep initial positions tight and let nodes travel several
    length units, with per-node noise large enough that community members
    drift apart; a static embedding then explains the data poorly.
    """
    groups = community_groups(num_nodes, rank)
    prior = PriorState.from_memberships(groups, lam=lam, sigma_noise=sigma_noise,
                                        sigma_rbf=sigma_rbf, c_x0=c_x0)
    seeds = np.random.SeedSequence(seed).spawn(2)
    x0, v = sample_prior(prior, num_bins, dim, seeds[0], horizon=1.0)
    # the prior lives on the unit timeline; stretch it to the generation scale
    gen = ModelState(np.full(num_nodes, float(beta)), x0, v / time_scale, time_scale)
    g = sample_network_from_model(gen, seeds[1])
    g = EventGraph.from_events(num_nodes, g.src, g.dst, np.minimum(g.times / time_scale, 1.0),
                               horizon=1.0)
    truth = ModelState(gen.beta + 0.5 * np.log(time_scale), x0, v, 1.0)
    return PriorNetwork(g, truth, prior, groups)


@dataclass
class BlockSpec:
    """Temporal block structure: ``num_intervals`` equal slices of ``[0, 1]``,
    each with its own random partition into ``num_groups`` groups."""

    num_intervals: int = 10
    num_groups: int = 20
    rate: float = 5.0
    per_interval: bool = False

    def expected_count(self):
        """Expected events per within-group dyad and interval."""
        return self.rate if self.per_interval else self.rate / self.num_intervals


def sample_block_network(spec, num_nodes, seed, return_groups=False):
    """Within-group dyads carry homogeneous Poisson events at ``spec.rate``
    per unit time (or ``spec.rate`` expected events per interval when
    ``per_interval``); cross-group dyads are silent."""
    if num_nodes < spec.num_groups:
        raise ValueError("need at least as many nodes as groups")
    rng = np.random.default_rng(seed)
    width = 1.0 / spec.num_intervals
    mean = spec.expected_count()
    src, dst, times, groups = [], [], [], []
    for k in range(spec.num_intervals):
        label = np.empty(num_nodes, dtype=np.int64)
        for gi, part in enumerate(np.array_split(rng.permutation(num_nodes), spec.num_groups)):
            label[part] = gi
        groups.append(label)
        I, J = all_dyads(num_nodes)
        same = label[I] == label[J]
        I, J = I[same], J[same]
        counts = rng.poisson(mean, size=len(I))
        src.append(np.repeat(I, counts))
        dst.append(np.repeat(J, counts))
        times.append(k * width + rng.uniform(0.0, width, size=counts.sum()))
    g = EventGraph.from_events(num_nodes, np.concatenate(src), np.concatenate(dst),
                               np.minimum(np.concatenate(times), 1.0), horizon=1.0)
    return (g, np.array(groups)) if return_groups else g
