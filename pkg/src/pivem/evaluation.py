"""Link-instance scoring and AUC metrics for reconstruction, completion and
future prediction."""

import json

import numpy as np
from scipy.stats import rankdata

from .graph import build_instances
from .model import integrate_intervals

TASKS = ("reconstruction", "completion", "prediction")
SCORING_MODES = ("frozen", "extrapolate")


def score_intervals(m, src, dst, t_lo, t_hi, mode="frozen"):
    """Integrated intensity of each instance interval.

    The part of an interval beyond the model horizon is scored either with
    the final bin's average rate (``"frozen"``) or by extending the last
    bin's velocities (``"extrapolate"``).
    """
    if mode not in SCORING_MODES:
        raise ValueError(f"unknown scoring mode {mode!r}")
    src, dst = np.asarray(src), np.asarray(dst)
    t_lo = np.asarray(t_lo, dtype=float)
    t_hi = np.asarray(t_hi, dtype=float)
    T = m.horizon
    inside_hi = np.minimum(t_hi, T)
    inside_lo = np.minimum(t_lo, T)
    out = integrate_intervals(m, src, dst, inside_lo, inside_hi)
    beyond_lo = np.maximum(t_lo, T)
    beyond = np.maximum(t_hi - beyond_lo, 0.0)
    late = beyond > 0
    if np.any(late):
        if mode == "extrapolate":
            out[late] += integrate_intervals(m, src[late], dst[late], beyond_lo[late],
                                             t_hi[late], extrapolate=True)
        else:
            w = m.bin_width
            last = integrate_intervals(m, src[late], dst[late],
                                       np.full(late.sum(), T - w), np.full(late.sum(), T))
            out[late] += last / w * beyond[late]
    return out


def score_instances(m, inst, mode="frozen"):
    return score_intervals(m, inst.src, inst.dst, inst.t_lo, inst.t_hi, mode)


def score_instance(m, i, j, t_lo, t_hi, mode="frozen"):
    """Score of a single instance ``(i, j, [t_lo, t_hi])``."""
    return float(score_intervals(m, [i], [j], [t_lo], [t_hi], mode)[0])


def _check_labels(scores, labels):
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels).astype(bool)
    if scores.shape != labels.shape:
        raise ValueError("scores and labels differ in length")
    if labels.all() or not labels.any():
        raise ValueError("AUC needs both positive and negative instances")
    return scores, labels


def roc_auc(scores, labels):
    """Mann-Whitney rank statistic; ties count one half."""
    scores, labels = _check_labels(scores, labels)
    ranks = rankdata(scores)
    n_pos = labels.sum()
    n_neg = len(labels) - n_pos
    return float((ranks[labels].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def pr_auc(scores, labels):
    """Step-wise average precision: sum over distinct thresholds of
    precision times the recall increment."""
    scores, labels = _check_labels(scores, labels)
    order = np.argsort(-scores, kind="mergesort")
    s, y = scores[order], labels[order]
    tp = np.cumsum(y)
    fp = np.cumsum(~y)
    # last index of each tie group
    ends = np.r_[np.flatnonzero(np.diff(s) != 0), len(s) - 1]
    tp, fp = tp[ends], fp[ends]
    precision = tp / (tp + fp)
    recall = tp / tp[-1]
    return float(np.sum(np.diff(np.r_[0.0, recall]) * precision))


def auc(scores, labels, kind="roc"):
    if kind == "roc":
        return roc_auc(scores, labels)
    if kind == "pr":
        return pr_auc(scores, labels)
    raise ValueError(f"unknown AUC kind {kind!r}")


def task_instances(task, split, seed, **kw):
    """Labeled instances for ``task`` from a :class:`SplitResult`."""
    if task == "reconstruction":
        return build_instances(split.residual, (0.0, split.cut), seed, **kw)
    if task == "completion":
        return build_instances(split.hidden, (0.0, split.cut), seed,
                               dyads=split.hidden_dyads, **kw)
    if task == "prediction":
        return build_instances(split.prediction, (split.cut, split.prediction.horizon), seed, **kw)
    raise ValueError(f"unknown task {task!r}")


def run_task(task, model, split, seed, mode="frozen", **kw):
    """Metrics dict ``{task, roc_auc, pr_auc, n_pos, n_neg, seed, scoring}``."""
    inst = task_instances(task, split, seed, **kw)
    if inst.n_pos == 0:
        raise ValueError(f"no positive instances for task {task!r}")
    scores = score_instances(model, inst, mode)
    return {
        "task": task,
        "roc_auc": roc_auc(scores, inst.labels),
        "pr_auc": pr_auc(scores, inst.labels),
        "n_pos": int(inst.n_pos),
        "n_neg": int(inst.n_neg),
        "seed": int(seed),
        "scoring": mode,
    }


def save_metrics(metrics, path):
    with open(path, "w") as fh:
        json.dump(metrics, fh, indent=2)
