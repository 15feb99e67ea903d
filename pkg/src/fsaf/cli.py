"""Command-line entry point: ``fsaf train | adapt | evaluate | report``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import config as config_mod
from . import harness, meta

log = logging.getLogger("fsaf")


def _config(args) -> config_mod.ExperimentConfig:
    if getattr(args, "config", None):
        cfg = config_mod.load(args.config)
    else:
        cfg = config_mod.preset(args.preset)
    seed = harness.master_seed(cfg.seed)
    if seed != cfg.seed:
        log.info("master seed override from %s: %d", harness.SEED_ENV, seed)
        cfg = cfg.replace(seed=seed)
    return cfg


def cmd_train(args) -> int:
    cfg = _config(args)
    if args.iterations is not None:
        cfg = cfg.replace(iterations=args.iterations)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    config_mod.dump(cfg, out / "config.yaml")

    def progress(rec):
        log.info("iter %d  return %.2f  metric %.3f  (%.1fs)", rec["iteration"], rec["avg_return"], rec["metric"], rec["seconds"])

    result = meta.train(cfg, out, progress=progress if args.verbose else None)
    summary = {"best_iteration": result.best_iteration, "checkpoints": result.checkpoints, "config_hash": cfg.hash}
    (out / "summary.json").write_text(json.dumps(summary, indent=2))
    print(json.dumps(summary, indent=2))
    return 0


def cmd_adapt(args) -> int:
    cfg = _config(args)
    out = args.out or str(Path(args.ckpt).with_name(Path(args.ckpt).stem + f"_adapted_k{args.k}.npz"))
    harness.cmd_adapt(args.ckpt, args.shots, args.k, cfg, n_shots=args.n_shots, out=out)
    print(out)
    return 0


def cmd_evaluate(args) -> int:
    cfg = _config(args)
    net = particles = None
    if args.method == "fsaf":
        if not args.ckpt:
            raise SystemExit("evaluate: --ckpt is required for method fsaf")
        net, pset = meta.load_particles(args.ckpt)
        particles = pset.values()
    budget = args.budget or cfg.budget
    tasks = harness.resolve_tasks(args.tasks, args.dim or cfg.dim, args.grid_size or cfg.grid_size, budget, cfg.noise)
    records = harness.evaluate(
        args.method, tasks, args.trials, budget, cfg.seed, net, particles, args.delta, args.out,
        cfg.hash, args.ensemble or cfg.ensemble,
    )
    for task in tasks:
        rs = [r for r in records if r.task == task.name]
        if rs:
            print(f"{args.method}\t{task.name}\ttrials={len(rs)}\tmedian regret@T={harness.median_at(rs, budget):.6g}")
    return 0


def cmd_report(args) -> int:
    percentiles = [float(p) for p in args.percentiles.split(",") if p.strip()]
    records = harness.read_records(args.input)
    methods = args.methods.split(",") if args.methods else None
    tasks = args.tasks.split(",") if args.tasks else None
    out_dir = args.out or str(Path(args.input).with_suffix("")) + "_report"
    table = harness.report(records, percentiles, args.scale100, out_dir, methods, tasks)
    head = "\t".join(f"p{p:g}" for p in percentiles)
    print(f"method\ttask\t{head}")
    for (m, t), arr in table.items():
        print(f"{m}\t{t}\t" + "\t".join(f"{v:.4g}" for v in arr[-1]))
    print(f"written to {out_dir}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fsaf", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="YAML file with ExperimentConfig keys")
        sp.add_argument("--preset", default="desk", choices=sorted(config_mod.PRESETS))

    t = sub.add_parser("train", help="meta-train an FSAF ensemble")
    common(t)
    t.add_argument("--out", required=True)
    t.add_argument("--iterations", type=int)
    t.set_defaults(func=cmd_train)

    a = sub.add_parser("adapt", help="few-shot adapt a checkpoint to a task")
    common(a)
    a.add_argument("--ckpt", required=True)
    a.add_argument("--shots", required=True, help="task the shot functions are drawn from")
    a.add_argument("--n-shots", type=int, default=5)
    a.add_argument("--k", type=int, default=5)
    a.add_argument("--out")
    a.set_defaults(func=cmd_adapt)

    e = sub.add_parser("evaluate", help="run paired evaluation trials")
    common(e)
    e.add_argument("--method", required=True, choices=harness.METHODS)
    e.add_argument("--tasks", required=True, help="comma-separated task names")
    e.add_argument("--trials", type=int, default=100)
    e.add_argument("--budget", type=int)
    e.add_argument("--ckpt")
    e.add_argument("--delta", type=float, help="GP-UCB delta; grid-searched when omitted")
    e.add_argument("--dim", type=int)
    e.add_argument("--grid-size", type=int)
    e.add_argument("--ensemble", choices=("mean", "sample"))
    e.add_argument("--out", default="results.jsonl")
    e.set_defaults(func=cmd_evaluate)

    r = sub.add_parser("report", help="percentile tables from a results file")
    r.add_argument("--in", dest="input", required=True)
    r.add_argument("--percentiles", default="25,50,75,90")
    r.add_argument("--scale100", action="store_true", help="multiply regrets by 100")
    r.add_argument("--methods")
    r.add_argument("--tasks")
    r.add_argument("--out")
    r.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (FileNotFoundError, ValueError) as exc:
        print(f"fsaf {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
