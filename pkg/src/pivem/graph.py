"""Continuous-time event graphs: loading, time normalization, splits and
labeled instance construction for the evaluation tasks.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


class EventFileError(ValueError):
    """Raised for unparsable edge-list files; carries the offending line."""

    def __init__(self, message, lineno=None):
        if lineno is not None:
            message = f"line {lineno}: {message}"
        super().__init__(message)
        self.lineno = lineno


def _frozen(a, dtype):
    a = np.array(a, dtype=dtype)
    a.setflags(write=False)
    return a


def dyad_index(i, j, num_nodes):
    """Position of the dyad (i, j), i < j, in the row-major upper triangle."""
    i = np.asarray(i, dtype=np.int64)
    j = np.asarray(j, dtype=np.int64)
    return i * num_nodes - i * (i + 1) // 2 + (j - i - 1)


def all_dyads(num_nodes):
    """Return ``(I, J)`` arrays of every dyad ``i < j``."""
    i, j = np.triu_indices(num_nodes, k=1)
    return i.astype(np.int64), j.astype(np.int64)


@dataclass(frozen=True)
class EventGraph:
    """Undirected time-stamped interactions on ``[0, horizon]``.

    Events are kept as three parallel arrays with ``src < dst`` and sorted
    by ``(src, dst, time)``. Duplicate events are allowed.
    """

    num_nodes: int
    src: np.ndarray
    dst: np.ndarray
    times: np.ndarray
    horizon: float

    @classmethod
    def from_events(cls, num_nodes, i, j, t, horizon=None):
        i = np.asarray(i, dtype=np.int64).ravel()
        j = np.asarray(j, dtype=np.int64).ravel()
        t = np.asarray(t, dtype=np.float64).ravel()
        if not (len(i) == len(j) == len(t)):
            raise ValueError("event arrays must have equal length")
        if np.any(i == j):
            k = int(np.flatnonzero(i == j)[0])
            raise ValueError(f"self-loop on node {int(i[k])} is not allowed")
        lo, hi = np.minimum(i, j), np.maximum(i, j)
        if len(t) and (lo.min() < 0 or hi.max() >= num_nodes):
            raise ValueError("node id out of range")
        if not np.all(np.isfinite(t)):
            raise ValueError("event times must be finite")
        if len(t) and t.min() < 0:
            raise ValueError("event times must be non-negative")
        if horizon is None:
            horizon = float(t.max()) if len(t) else 1.0
        if len(t) and t.max() > horizon:
            raise ValueError("event time exceeds horizon")
        order = np.lexsort((t, hi, lo))
        return cls(int(num_nodes), _frozen(lo[order], np.int64),
                   _frozen(hi[order], np.int64), _frozen(t[order], np.float64),
                   float(horizon))

    @property
    def num_events(self):
        return len(self.times)

    def __len__(self):
        return self.num_events

    def dyads(self):
        """Distinct dyads carrying at least one event, as an ``(M, 2)`` array."""
        pairs = np.stack([self.src, self.dst], axis=1)
        return np.unique(pairs, axis=0) if len(pairs) else pairs.reshape(0, 2)

    def degree_events(self):
        """Number of events each node takes part in."""
        return (np.bincount(self.src, minlength=self.num_nodes)
                + np.bincount(self.dst, minlength=self.num_nodes))

    def events_in(self, lo, hi):
        mask = (self.times >= lo) & (self.times <= hi)
        return self.src[mask], self.dst[mask], self.times[mask]

    def stats(self):
        """Summary statistics: nodes, linked pairs, events, max events per pair."""
        if self.num_events:
            keys = dyad_index(self.src, self.dst, self.num_nodes)
            _, counts = np.unique(keys, return_counts=True)
            pairs, top = len(counts), int(counts.max())
        else:
            pairs, top = 0, 0
        return {"nodes": self.num_nodes, "pairs": pairs,
                "events": self.num_events, "max_pair_events": top}

    def to_lines(self):
        return [f"{a} {b} {t!r}" for a, b, t in
                zip(self.src.tolist(), self.dst.tolist(), self.times.tolist())]


def load_events(path, weighted=False):
    """Read an edge list of ``i j t`` (or ``i j t w``) records.

    Fields may be separated by whitespace or commas; lines starting with
    ``#`` are skipped. Node labels are remapped to ``0..N-1`` in sorted
    order. With ``weighted=True`` an integer weight ``w`` expands into
    ``w`` unit events at the same time. A ``# nodes: N`` header (written
    by :func:`save_events`) keeps integer ids ``0..N-1`` as they are, so
    nodes without events survive a round trip.
    """
    rows = []
    declared = None
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.strip()
        if line.startswith("#"):
            head = line[1:].split(":", 1)
            if len(head) == 2 and head[0].strip() == "nodes":
                try:
                    declared = int(head[1])
                except ValueError:
                    raise EventFileError(f"bad node count {head[1].strip()!r}", lineno) from None
            continue
        if not line:
            continue
        parts = line.replace(",", " ").split()
        if len(parts) < 3:
            raise EventFileError(f"expected 'i j t [w]', got {raw!r}", lineno)
        a, b = parts[0], parts[1]
        try:
            t = float(parts[2])
        except ValueError:
            raise EventFileError(f"bad time {parts[2]!r}", lineno) from None
        if not math.isfinite(t):
            raise EventFileError("time must be finite", lineno)
        if t < 0:
            raise EventFileError(f"negative time {t}", lineno)
        if a == b:
            raise EventFileError(f"self-loop on node {a}", lineno)
        w = 1
        if weighted:
            if len(parts) < 4:
                raise EventFileError("missing weight", lineno)
            try:
                wf = float(parts[3])
            except ValueError:
                raise EventFileError(f"bad weight {parts[3]!r}", lineno) from None
            if wf != int(wf) or wf < 0:
                raise EventFileError(f"weight must be a non-negative integer, got {parts[3]}", lineno)
            w = int(wf)
        rows.append((a, b, t, w))
    if not rows:
        if declared is not None:
            return EventGraph.from_events(declared, [], [], [])
        raise EventFileError(f"{path}: no events found")

    labels = sorted({r[0] for r in rows} | {r[1] for r in rows}, key=_label_key)
    if declared is not None and all(_label_key(x)[0] == 0 and 0 <= int(x) < declared
                                    for x in labels):
        labels = [str(k) for k in range(declared)]
        ids = {lab: int(lab) for lab in {r[0] for r in rows} | {r[1] for r in rows}}
    else:
        ids = {lab: k for k, lab in enumerate(labels)}
    i = np.array([ids[r[0]] for r in rows], dtype=np.int64)
    j = np.array([ids[r[1]] for r in rows], dtype=np.int64)
    t = np.array([r[2] for r in rows])
    w = np.array([r[3] for r in rows], dtype=np.int64)
    if weighted:
        i, j, t = np.repeat(i, w), np.repeat(j, w), np.repeat(t, w)
    return EventGraph.from_events(len(labels), i, j, t)


def _label_key(label):
    try:
        return (0, int(label), "")
    except ValueError:
        return (1, 0, label)


def save_events(g, path):
    """Write ``g`` as an ``i j t`` edge list that reloads to the same events."""
    lines = [f"# nodes: {g.num_nodes}"] + g.to_lines()
    Path(path).write_text("\n".join(lines) + "\n")


def normalize_time(g):
    """Affinely rescale event times onto ``[0, 1]``."""
    if g.num_events == 0:
        raise ValueError("cannot normalize an empty graph")
    t0, t1 = float(g.times.min()), float(g.times.max())
    if t1 == t0:
        raise ValueError("degenerate timeline: all events share one timestamp")
    t = (g.times - t0) / (t1 - t0)
    np.clip(t, 0.0, 1.0, out=t)
    return EventGraph.from_events(g.num_nodes, g.src, g.dst, t, horizon=1.0)


@dataclass(frozen=True)
class SplitResult:
    """Output of :func:`split`.

    ``residual``, ``prediction`` and ``hidden`` share the remapped node ids;
    ``node_map[k]`` is the original id of node ``k``. ``dropped`` holds the
    prediction events (original ids) of nodes removed for lack of training
    events.
    """

    residual: EventGraph
    prediction: EventGraph
    hidden: EventGraph
    hidden_dyads: np.ndarray
    masked_dyads: np.ndarray
    node_map: np.ndarray
    dropped: EventGraph
    cut: float

    @property
    def prediction_events(self):
        return self.prediction

    def to_json(self):
        return {
            "num_nodes": self.residual.num_nodes,
            "cut": self.cut,
            "node_map": self.node_map.tolist(),
            "hidden_dyads": self.hidden_dyads.tolist(),
            "masked_dyads": self.masked_dyads.tolist(),
            "residual_events": self.residual.num_events,
            "prediction_events": self.prediction.num_events,
            "hidden_events": self.hidden.num_events,
            "dropped_events": self.dropped.num_events,
        }


def _sample_dyads(rng, num_nodes, count):
    total = num_nodes * (num_nodes - 1) // 2
    idx = np.sort(rng.choice(total, size=count, replace=False))
    I, J = all_dyads(num_nodes)
    return np.stack([I[idx], J[idx]], axis=1)


def split(g, seed, hide_fraction=0.10, mask_fraction=0.20,
          prediction_fraction=0.10, max_attempts=100):
    """Split a normalized graph for reconstruction, completion and prediction.

    Events after ``(1 - prediction_fraction) * T`` form the prediction set.
    Nodes without any earlier event are dropped and ids are remapped.
    ``hide_fraction`` of all dyads are then hidden, redrawing until every
    remaining node keeps at least one residual event. ``mask_fraction`` of
    all dyads are drawn independently for prior-weight selection.
    """
    rng = np.random.default_rng(seed)
    cut = (1.0 - prediction_fraction) * g.horizon
    train = g.times <= cut
    active = np.zeros(g.num_nodes, dtype=bool)
    active[g.src[train]] = True
    active[g.dst[train]] = True
    if not active.any():
        raise ValueError("no events before the prediction cut; residual graph would be empty")
    node_map = np.flatnonzero(active)
    remap = np.full(g.num_nodes, -1, dtype=np.int64)
    remap[node_map] = np.arange(len(node_map))
    n = len(node_map)

    keep = active[g.src] & active[g.dst]
    pred = ~train & keep
    dropped = ~train & ~keep
    tr_i, tr_j, tr_t = remap[g.src[train]], remap[g.dst[train]], g.times[train]

    n_hide = int(math.floor(hide_fraction * n * (n - 1) / 2))
    bad = np.array([], dtype=np.int64)
    for _ in range(max_attempts):
        hidden_dyads = _sample_dyads(rng, n, n_hide) if n_hide else np.empty((0, 2), np.int64)
        hidden_keys = dyad_index(hidden_dyads[:, 0], hidden_dyads[:, 1], n)
        is_hidden = np.isin(dyad_index(tr_i, tr_j, n), hidden_keys)
        deg = (np.bincount(tr_i[~is_hidden], minlength=n)
               + np.bincount(tr_j[~is_hidden], minlength=n))
        bad = np.flatnonzero(deg == 0)
        if len(bad) == 0:
            break
    else:
        raise ValueError(
            "cannot hide dyads while keeping an event on every node; "
            f"nodes without residual events: {node_map[bad].tolist()}")

    n_mask = int(math.floor(mask_fraction * n * (n - 1) / 2))
    masked = _sample_dyads(rng, n, n_mask) if n_mask else np.empty((0, 2), np.int64)

    residual = EventGraph.from_events(n, tr_i[~is_hidden], tr_j[~is_hidden],
                                      tr_t[~is_hidden], horizon=cut)
    hidden = EventGraph.from_events(n, tr_i[is_hidden], tr_j[is_hidden],
                                    tr_t[is_hidden], horizon=cut)
    prediction = EventGraph.from_events(n, remap[g.src[pred]], remap[g.dst[pred]],
                                        g.times[pred], horizon=g.horizon)
    dropped_g = EventGraph.from_events(g.num_nodes, g.src[dropped], g.dst[dropped],
                                       g.times[dropped], horizon=g.horizon)
    return SplitResult(residual, prediction, hidden, _frozen(hidden_dyads, np.int64),
                       _frozen(masked, np.int64), _frozen(node_map, np.int64),
                       dropped_g, cut)


@dataclass(frozen=True)
class LabeledInstanceSet:
    """Dyad/interval instances labeled 1 (event) or 0 (no event)."""

    src: np.ndarray
    dst: np.ndarray
    t_lo: np.ndarray
    t_hi: np.ndarray
    labels: np.ndarray
    centers: np.ndarray
    half_width: float = 1e-3
    n_pos_total: int = 0
    n_neg_total: int = 0

    def __len__(self):
        return len(self.labels)

    @property
    def n_pos(self):
        return int(self.labels.sum())

    @property
    def n_neg(self):
        return int(len(self.labels) - self.labels.sum())

    def to_json(self):
        rows = [[a, b, lo, hi, lab] for a, b, lo, hi, lab in zip(
            self.src.tolist(), self.dst.tolist(), self.t_lo.tolist(),
            self.t_hi.tolist(), self.labels.tolist())]
        return {"half_width": self.half_width, "instances": rows,
                "centers": self.centers.tolist()}

    @classmethod
    def from_json(cls, obj):
        rows = obj["instances"]
        arr = lambda k, dt: np.array([r[k] for r in rows], dtype=dt)  # noqa: E731
        lo, hi = arr(2, float), arr(3, float)
        centers = np.array(obj.get("centers", (lo + hi) / 2), dtype=float)
        labels = arr(4, np.int64)
        return cls(arr(0, np.int64), arr(1, np.int64), lo, hi, labels, centers,
                   float(obj.get("half_width", 1e-3)),
                   int(labels.sum()), int(len(labels) - labels.sum()))

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_json()))


def build_instances(g, window, seed, dyads=None, half_width=1e-3,
                    max_per_class=10_000, max_retries=1000):
    """Labeled instances for AUC evaluation on ``window = (lo, hi)``.

    Every event of ``g`` inside the window (restricted to ``dyads`` when
    given) yields a positive interval ``[e - h, e + h]`` clamped to the
    window. An equal number of negatives is drawn as uniform (dyad, time)
    pairs, redrawing any time that falls inside a positive interval of the
    same dyad. Each class is then subsampled to ``max_per_class``.
    """
    lo, hi = float(window[0]), float(window[1])
    if not 0.0 <= lo <= hi:
        raise ValueError(f"invalid window {window}")
    rng = np.random.default_rng(seed)
    n = g.num_nodes
    if dyads is None:
        cand_i, cand_j = all_dyads(n)
    else:
        dyads = np.asarray(dyads, dtype=np.int64).reshape(-1, 2)
        cand_i, cand_j = np.minimum(dyads[:, 0], dyads[:, 1]), np.maximum(dyads[:, 0], dyads[:, 1])
    cand_keys = dyad_index(cand_i, cand_j, n)

    in_win = (g.times >= lo) & (g.times <= hi)
    keys = dyad_index(g.src, g.dst, n)
    in_win &= np.isin(keys, cand_keys)
    pi, pj, pt = g.src[in_win], g.dst[in_win], g.times[in_win]
    if len(pt) == 0:
        raise ValueError(f"no events inside window [{lo}, {hi}]")

    by_dyad = {}
    for k, t in zip(keys[in_win].tolist(), pt.tolist()):
        by_dyad.setdefault(k, []).append(t)
    by_dyad = {k: np.sort(np.array(v)) for k, v in by_dyad.items()}

    n_pos = len(pt)
    ni = np.empty(n_pos, dtype=np.int64)
    nj = np.empty(n_pos, dtype=np.int64)
    nt = np.empty(n_pos)
    for m in range(n_pos):
        for _ in range(max_retries):
            c = int(rng.integers(len(cand_keys)))
            t = float(rng.uniform(lo, hi))
            ev = by_dyad.get(int(cand_keys[c]))
            if ev is not None and _inside_positive(ev, t, half_width, lo, hi):
                continue
            ni[m], nj[m], nt[m] = cand_i[c], cand_j[c], t
            break
        else:
            raise RuntimeError(f"negative sampling exceeded {max_retries} retries")

    pos = _subsample(rng, n_pos, max_per_class)
    neg = _subsample(rng, n_pos, max_per_class)
    src = np.concatenate([pi[pos], ni[neg]])
    dst = np.concatenate([pj[pos], nj[neg]])
    centers = np.concatenate([pt[pos], nt[neg]])
    labels = np.concatenate([np.ones(len(pos), np.int64), np.zeros(len(neg), np.int64)])
    t_lo = np.maximum(centers - half_width, lo)
    t_hi = np.minimum(centers + half_width, hi)
    return LabeledInstanceSet(src, dst, t_lo, t_hi, labels, centers, half_width,
                              n_pos, n_pos)


def _inside_positive(times, t, h, lo, hi):
    # positive intervals are clamped to the window, so compare against the clamped ends
    k = np.searchsorted(times, t)
    for e in times[max(k - 1, 0):k + 1]:
        if max(e - h, lo) <= t <= min(e + h, hi):
            return True
    return False


def _subsample(rng, n, cap):
    if n <= cap:
        return np.arange(n)
    return np.sort(rng.choice(n, size=cap, replace=False))
