"""Command-line entry point: generate, train, evaluate, animate, inspect.

Every command writes into a run directory alongside a ``manifest.json``
recording the command, its arguments and the files produced.
"""

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .evaluation import SCORING_MODES, TASKS, run_task
from .graph import EventFileError, load_events, normalize_time, save_events, split
from .model import load_checkpoint, positions, save_checkpoint
from .synthetic import BlockSpec, generate_prior_network, sample_block_network
from .train import TrainConfig, fit

log = logging.getLogger("pivem")


class UsageError(Exception):
    """Invalid flag combination; exits with status 2."""


def _stats_line(g):
    s = g.stats()
    return (f"nodes={s['nodes']} pairs={s['pairs']} events={s['events']} "
            f"max_pair_events={s['max_pair_events']}")


def _write_manifest(out, command, args, files):
    manifest = {
        "command": command,
        "version": __version__,
        "args": {k: v for k, v in vars(args).items() if k != "func"},
        "files": sorted(files),
    }
    path = Path(out) / "manifest.json"
    if path.exists():
        old = json.loads(path.read_text())
        history = old.get("history", [])
        history.append({k: old[k] for k in ("command", "args", "files") if k in old})
        manifest["history"] = history
    path.write_text(json.dumps(manifest, indent=2, default=str))


# ---------------------------------------------------------------- commands

def cmd_generate(args):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.kind == "prior":
        if args.rank > args.nodes:
            raise UsageError("--rank cannot exceed --nodes")
        net = generate_prior_network(args.nodes, args.bins, args.rank, args.dim, seed=args.seed,
                                     time_scale=args.time_scale)
        g, sidecar = net.graph, net.sidecar()
    else:
        if args.groups > args.nodes:
            raise UsageError("--groups cannot exceed --nodes")
        spec = BlockSpec(args.intervals, args.groups, args.rate, args.per_interval)
        g, groups = sample_block_network(spec, args.nodes, args.seed, return_groups=True)
        sidecar = {"groups": groups.tolist(), "spec": vars(spec)}
    save_events(g, out / "events.txt")
    (out / "truth.json").write_text(json.dumps(sidecar))
    _write_manifest(out, "generate", args, ["events.txt", "truth.json"])
    print(_stats_line(g))


def cmd_inspect(args):
    g = load_events(args.events, weighted=args.weighted)
    print(_stats_line(g))


def _train_config(args):
    cfg = TrainConfig.load(args.config).to_dict() if args.config else {}
    for name in ("num_bins", "dim", "rank", "learning_rate", "phase_epochs", "anneal_epochs",
                 "batch_size", "restarts"):
        value = getattr(args, name)
        if value is not None:
            cfg[name] = value
    if args.lambdas:
        cfg["lambdas"] = args.lambdas
    cfg["seed"] = args.seed
    if args.static:
        cfg["static"] = True
    try:
        return TrainConfig.from_dict(cfg)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


def cmd_train(args):
    cfg = _train_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    g = normalize_time(load_events(args.events, weighted=args.weighted))
    parts = split(g, args.seed)
    stages = out / "stages"
    stages.mkdir(exist_ok=True)
    m, prior, report = fit(parts.residual, cfg, parts.masked_dyads, checkpoint_dir=stages)
    extra = {"events": str(Path(args.events).resolve()), "weighted": args.weighted,
             "seed": args.seed, "lambda": report.best_lambda, "config": cfg.to_dict()}
    save_checkpoint(out / "checkpoint.json", m, prior, extra)
    report.save(out / "anneal.json")
    (out / "split.json").write_text(json.dumps(parts.to_json()))
    (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2))
    _write_manifest(out, "train", args, ["checkpoint.json", "anneal.json", "split.json",
                                         "config.json", "stages/"])
    print(f"selected lambda={report.best_lambda:g} restart={report.best_restart} "
          f"objective={report.final_objective[report.best_restart]:.6f}")


def _load_ckpt(path):
    path = Path(path)
    if path.is_dir():
        path = path / "checkpoint.json"
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    return path, load_checkpoint(path)


def cmd_evaluate(args):
    path, (m, _, extra) = _load_ckpt(args.checkpoint)
    events = args.events or extra.get("events")
    if events is None:
        raise UsageError("--events is required for checkpoints without a recorded event file")
    split_seed = extra.get("seed", args.seed) if args.split_seed is None else args.split_seed
    g = normalize_time(load_events(events, weighted=extra.get("weighted", False)))
    parts = split(g, split_seed)
    if parts.residual.num_nodes != m.num_nodes:
        raise ValueError(f"checkpoint has {m.num_nodes} nodes but the split has "
                         f"{parts.residual.num_nodes}")
    metrics = [run_task(task, m, parts, args.seed, mode=args.scoring) for task in args.tasks]
    out = Path(args.out) if args.out else path.parent
    out.mkdir(parents=True, exist_ok=True)
    (out / "metrics.json").write_text(json.dumps(metrics, indent=2))
    _write_manifest(out, "evaluate", args, ["metrics.json"])
    for r in metrics:
        print(f"{r['task']}: roc_auc={r['roc_auc']:.4f} pr_auc={r['pr_auc']:.4f} "
              f"n_pos={r['n_pos']} n_neg={r['n_neg']}")


def cmd_animate(args):
    if args.frames < 1:
        raise UsageError("--frames must be at least 1")
    _, (m, _, _) = _load_ckpt(args.checkpoint)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    times = np.linspace(0.0, m.horizon, args.frames)
    files = []
    header = "node," + ",".join(f"x{d + 1}" for d in range(m.dim))
    for f, t in enumerate(times):
        P = positions(m, t)
        rows = np.column_stack([np.arange(m.num_nodes), P])
        name = f"frame_{f:04d}.csv"
        np.savetxt(out / name, rows, delimiter=",", header=header, comments="",
                   fmt=["%d"] + ["%.17g"] * m.dim)
        files.append(name)
    (out / "frames.json").write_text(json.dumps({"times": times.tolist(), "files": files}))
    _write_manifest(out, "animate", args, files + ["frames.json"])
    print(f"wrote {len(files)} frames to {out}")


# ---------------------------------------------------------------- parser

def build_parser():
    p = argparse.ArgumentParser(prog="pivem", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("--threads", type=int, default=None,
                   help="cap on BLAS/OpenMP threads (default: library default)")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("generate", help="sample a synthetic network")
    s.add_argument("--kind", choices=("prior", "block"), required=True,
                   help="prior-driven trajectories or temporal block structure")
    s.add_argument("--nodes", type=int, default=100, help="number of nodes")
    s.add_argument("--bins", type=int, default=100, help="time bins (prior kind)")
    s.add_argument("--rank", type=int, default=20, help="communities / node-factor rank (prior kind)")
    s.add_argument("--dim", type=int, default=2, help="latent dimension (prior kind)")
    s.add_argument("--time-scale", type=float, default=150.0,
                   help="generation timeline length before rescaling to [0, 1] (prior kind)")
    s.add_argument("--intervals", type=int, default=10, help="intervals (block kind)")
    s.add_argument("--groups", type=int, default=20, help="groups per interval (block kind)")
    s.add_argument("--rate", type=float, default=5.0, help="within-group rate (block kind)")
    s.add_argument("--per-interval", action="store_true",
                   help="read --rate as expected events per interval instead of per unit time")
    s.add_argument("--seed", type=int, default=0, help="random seed")
    s.add_argument("--out", required=True, help="run directory")
    s.set_defaults(func=cmd_generate)

    s = sub.add_parser("inspect", help="print summary statistics of an event file")
    s.add_argument("events", help="edge-list file (i j t [w])")
    s.add_argument("--weighted", action="store_true", help="fourth column is a repeat count")
    s.set_defaults(func=cmd_inspect)

    s = sub.add_parser("train", help="split an event file and fit the model")
    s.add_argument("--events", required=True, help="edge-list file")
    s.add_argument("--weighted", action="store_true", help="fourth column is a repeat count")
    s.add_argument("--out", required=True, help="run directory")
    s.add_argument("--config", help="JSON file with TrainConfig fields; flags override it")
    s.add_argument("--bins", dest="num_bins", type=int, help="time bins")
    s.add_argument("--dim", type=int, help="latent dimension")
    s.add_argument("--rank", type=int, help="node-factor rank")
    s.add_argument("--lr", dest="learning_rate", type=float, help="Adam learning rate")
    s.add_argument("--phase-epochs", type=int, help="epochs for each of the first two phases")
    s.add_argument("--anneal-epochs", type=int, help="epochs per prior weight")
    s.add_argument("--lambdas", type=float, nargs="+", help="decreasing prior-weight ladder")
    s.add_argument("--batch-size", type=int, help="nodes sampled per epoch")
    s.add_argument("--restarts", type=int, help="independent restarts")
    s.add_argument("--static", action="store_true", help="freeze velocities at zero")
    s.add_argument("--seed", type=int, default=0, help="seed for split and training")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("evaluate", help="score a trained checkpoint on the three tasks")
    s.add_argument("checkpoint", help="checkpoint file or train run directory")
    s.add_argument("--events", help="event file (defaults to the one recorded at training)")
    s.add_argument("--split-seed", type=int, help="split seed (defaults to the training seed)")
    s.add_argument("--tasks", nargs="+", choices=TASKS, default=list(TASKS), help="tasks to run")
    s.add_argument("--scoring", choices=SCORING_MODES, default="frozen",
                   help="how instances past the training horizon are scored")
    s.add_argument("--out", help="output directory (default: checkpoint directory)")
    s.add_argument("--seed", type=int, default=0, help="seed for instance sampling")
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("animate", help="export latent positions at uniform times as CSV")
    s.add_argument("checkpoint", help="checkpoint file or train run directory")
    s.add_argument("--frames", type=int, default=50, help="number of frames")
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--seed", type=int, default=0, help="accepted for uniformity; unused")
    s.set_defaults(func=cmd_animate)
    return p


def _limit_threads(n):
    if n is None:
        return None
    if n < 1:
        raise UsageError("--threads must be positive")
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=n)


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        limiter = _limit_threads(args.threads)
        try:
            args.func(args)
        finally:
            if limiter is not None:
                limiter.unregister()
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"pivem: error: {exc}", file=sys.stderr)
        return 2
    except (EventFileError, FileNotFoundError, ValueError, RuntimeError,
            np.linalg.LinAlgError, KeyError) as exc:
        print(f"pivem: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
