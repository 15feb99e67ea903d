"""Evaluation protocol, few-shot adaptation, result records and reports."""

from __future__ import annotations

import csv
import json
import logging
import os
import time
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import gp
from .bdqn import ParticleSet
from .config import ExperimentConfig
from .env import AFPolicy, FSAFPolicy, RegretCurve, TaskSpec, parse_task, run_episode
from .meta import InnerLoop, TaskBuffers, adapt, load_particles
from .acquisition import UCB_DELTAS
from .qnet import QNetwork, save_checkpoint

log = logging.getLogger(__name__)

SEED_ENV = "FSAF_SEED"
METHODS = ("fsaf", "ei", "pi", "ucb", "mes", "random")

# independent random streams per (task, trial)
FUNCTION, EPISODE, SHOTS, TUNING = 0, 1, 2, 3


def master_seed(default: int = 0) -> int:
    value = os.environ.get(SEED_ENV)
    if value is None or value == "":
        return int(default)
    try:
        return int(value)
    except ValueError:
        raise ValueError(f"{SEED_ENV} must be an integer, got {value!r}") from None


def task_key(name: str) -> int:
    return zlib.crc32(name.encode())


def stream(master: int, task: str, trial: int, kind: int) -> np.random.Generator:
    """Counter-based stream; methods never consume from each other's streams."""
    return np.random.default_rng([int(master), task_key(task), int(trial), int(kind)])


def resolve_tasks(spec, dim: int = 1, grid_size: int = 64, budget: int = 30, noise: float = 1e-4) -> list:
    if isinstance(spec, TaskSpec):
        return [spec]
    if isinstance(spec, str):
        spec = [s for s in spec.split(",") if s.strip()]
    out = []
    for item in spec:
        out.append(item if isinstance(item, TaskSpec) else parse_task(item, dim, grid_size, budget, noise))
    return out


# ---------------------------------------------------------------------------
# trial records


@dataclass
class TrialRecord:
    method: str
    task: str
    seed: int
    curve: RegretCurve
    wall_clock: float
    config_hash: str = ""

    @property
    def key(self):
        return (self.method, self.task, self.seed)

    def to_json(self) -> str:
        return json.dumps({
            "method": self.method,
            "task": self.task,
            "seed": self.seed,
            "curve": self.curve.to_dict(),
            "wall_clock": self.wall_clock,
            "config_hash": self.config_hash,
        })

    @classmethod
    def from_json(cls, line: str) -> "TrialRecord":
        d = json.loads(line)
        return cls(d["method"], d["task"], int(d["seed"]), RegretCurve.from_dict(d["curve"]), float(d["wall_clock"]), d.get("config_hash", ""))


def read_records(path) -> list:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"results file not found: {path}")
    out = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                out.append(TrialRecord.from_json(line))
            except (json.JSONDecodeError, KeyError) as exc:
                # a partially written last line from an interrupted run
                log.warning("%s:%d: skipping unreadable record (%s)", path, lineno, exc)
    return out


class ResultsWriter:
    """Single writer appending one record per line; (method, task, seed) stay unique."""

    def __init__(self, path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self.keys = {r.key for r in read_records(self.path)} if self.path.exists() else set()

    def __contains__(self, key):
        return key in self.keys

    def write(self, record: TrialRecord):
        if record.key in self.keys:
            raise ValueError(f"duplicate trial record {record.key}")
        with open(self.path, "a") as fh:
            fh.write(record.to_json() + "\n")
        self.keys.add(record.key)


# ---------------------------------------------------------------------------
# evaluation


def _surrogate(task: TaskSpec, spec, master: int, n_fit: int = 5, n_points: int = 50) -> gp.KernelSpec:
    """The generating kernel on GP tasks, otherwise RBF fitted on validation draws."""
    if spec is not None:
        return spec
    scales, width = [], None
    for i in range(n_fit):
        rng = stream(master, task.name, i, SHOTS)
        box, _ = task.sample(rng)
        if box.discrete:
            idx = rng.choice(box.grid.shape[0], size=min(n_points, box.grid.shape[0]), replace=False)
            x, y = box.grid[idx], box.values[idx]
        else:
            x = box.lo + (box.hi - box.lo) * rng.random((n_points, box.dim))
            y = box(x)
        # inputs rescaled to the unit box so the lengthscale grid is meaningful
        width = box.hi - box.lo
        xu = (x - box.lo) / width
        scales.append(gp.fit_lengthscale(gp.Dataset(xu, y, 1e-4)).lengthscale)
    # back to the box's own coordinates
    return gp.KernelSpec("rbf", tuple(float(np.median(scales)) * width))


def make_eval_policy(method: str, net=None, particles=None, delta: float = 0.1, ensemble: str = "mean"):
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}; expected one of {METHODS}")
    if method == "fsaf":
        if net is None or particles is None:
            raise ValueError("method 'fsaf' needs a checkpoint")
        return FSAFPolicy(net, particles, mode="greedy", ensemble=ensemble)
    return AFPolicy(method, delta=delta)


def run_trial(method, task: TaskSpec, trial: int, budget: int, master: int, policy=None, surrogate=None, hierarchical=None) -> TrialRecord:
    """One paired trial: the function instance depends only on (master, task, trial)."""
    box, spec = task.sample(stream(master, task.name, trial, FUNCTION))
    sur = spec if spec is not None else surrogate
    if sur is None:
        sur = _surrogate(task, spec, master)
    t0 = time.perf_counter()
    curve, _ = run_episode(policy, box, budget, sur, stream(master, task.name, trial, EPISODE),
                           record_transitions=False, hierarchical=hierarchical)
    return TrialRecord(method, task.name, trial, curve, time.perf_counter() - t0)


def tune_ucb_delta(task: TaskSpec, budget: int, master: int, trials: int = 10, deltas=UCB_DELTAS, hierarchical=None) -> float:
    """Grid search of the GP-UCB confidence parameter on validation instances."""
    best, best_delta = np.inf, None
    sur = None
    for delta in deltas:
        regrets = []
        for i in range(trials):
            rng = stream(master, task.name, i, TUNING)
            box, spec = task.sample(rng)
            if sur is None and spec is None:
                sur = _surrogate(task, None, master)
            curve, _ = run_episode(AFPolicy("ucb", delta), box, budget, spec or sur, rng, record_transitions=False, hierarchical=hierarchical)
            regrets.append(curve.final_regret)
        med = float(np.median(regrets))
        if med < best:
            best, best_delta = med, delta
    return best_delta


def evaluate(
    method: str,
    tasks,
    trials: int = 100,
    budget: int = 30,
    master: int | None = None,
    net=None,
    particles=None,
    delta: float | None = None,
    out=None,
    config_hash: str = "",
    ensemble: str = "mean",
    hierarchical=None,
    start: int = 0,
) -> list:
    """Run ``trials`` paired episodes per task; optionally append to ``out``."""
    master = master_seed() if master is None else master
    tasks = resolve_tasks(tasks)
    writer = ResultsWriter(out) if out is not None else None
    records = []
    for task in tasks:
        d = delta
        if method == "ucb" and d is None:
            d = tune_ucb_delta(task, budget, master, hierarchical=hierarchical)
            log.info("ucb delta for %s: %g", task.name, d)
        policy = make_eval_policy(method, net, particles, 0.1 if d is None else d, ensemble)
        sur = None
        if task.kind != "gp":
            sur = _surrogate(task, None, master)
        for trial in range(start, start + trials):
            if writer is not None and (method, task.name, trial) in writer:
                continue
            rec = run_trial(method, task, trial, budget, master, policy, sur, hierarchical)
            rec.config_hash = config_hash
            records.append(rec)
            if writer is not None:
                writer.write(rec)
    return records


# ---------------------------------------------------------------------------
# few-shot adaptation


def build_shot_buffers(net, particles, task: TaskSpec, n_shots: int, cfg: ExperimentConfig, master: int) -> TaskBuffers:
    """Roll the current policy and the demo policy on ``n_shots`` functions.

    Episodes cycle over the shot functions until both buffers hold a batch.
    """
    if n_shots < 1:
        raise ValueError("at least one shot function is required")
    buffers = TaskBuffers.create(cfg.buffer_size)
    shots = []
    for i in range(n_shots):
        box, spec = task.sample(stream(master, task.name, i, SHOTS))
        if not box.discrete:
            box = box.discretize(cfg.grid_size)
        sur = spec if spec is not None else _surrogate(task, None, master)
        shots.append((box, sur))
    behaviour = FSAFPolicy(net, particles, mode="boltzmann", temperature=cfg.temperature)
    demo = AFPolicy("ei")
    rng = stream(master, task.name, 0, SHOTS + 100)
    need_demo = cfg.kappa > 0
    budget = min(task.budget, cfg.budget)
    i = 0
    while not buffers.ready(cfg.batch_size, need_demo):
        box, sur = shots[i % n_shots]
        _, trans = run_episode(behaviour, box, budget, sur, rng, record_transitions=True)
        buffers.q.extend(trans)
        if need_demo:
            _, dtrans = run_episode(demo, box, budget, sur, rng, record_transitions=True)
            buffers.demo.extend(dtrans)
        i += 1
        if budget < 2 and i > 10:
            raise ValueError("budget 1 episodes produce no transitions")
    return buffers


def adapt_particles(net: QNetwork, pset: ParticleSet, task: TaskSpec, n_shots: int, K: int, cfg: ExperimentConfig, master: int) -> ParticleSet:
    """K SVGD steps on buffers built from ``n_shots`` functions of ``task``; K = 0 is a no-op."""
    if K == 0:
        return pset.detached()
    buffers = build_shot_buffers(net, pset.values(), task, n_shots, cfg, master)
    rng = stream(master, task.name, 0, SHOTS + 200)
    return adapt(net, pset.detached(), buffers, K, InnerLoop.from_config(cfg), rng, differentiable=False).detached()


def cmd_adapt(ckpt, shots, K: int, cfg: ExperimentConfig, n_shots: int = 5, out=None, master: int | None = None):
    master = master_seed(cfg.seed) if master is None else master
    net, pset = load_particles(ckpt)
    (task,) = resolve_tasks(shots, cfg.dim, cfg.grid_size, cfg.budget, cfg.noise)[:1]
    adapted = adapt_particles(net, pset, task, n_shots, K, cfg, master)
    if out is not None:
        save_checkpoint(out, net, adapted.values(), adapted.targets, pset.iteration, cfg.hash,
                        extra={"adapted_on": task.name, "shots": n_shots, "K": K})
    return net, adapted


# ---------------------------------------------------------------------------
# reports


def percentile_table(records, percentiles=(25, 50, 75, 90), scale: float = 1.0) -> dict:
    """{(method, task): array (T, len(percentiles))} of regret percentiles per step.

    Linear interpolation between order statistics; the result does not depend
    on record order.
    """
    records = list(records)
    if not records:
        raise ValueError("no records to report")
    groups: dict = {}
    for r in records:
        groups.setdefault((r.method, r.task), []).append(r)
    out = {}
    for key in sorted(groups):
        rs = sorted(groups[key], key=lambda r: r.seed)
        T = min(len(r.curve.regret) for r in rs)
        R = np.stack([r.curve.regret[:T] for r in rs]) * scale
        out[key] = np.percentile(R, list(percentiles), axis=0, method="linear").T
    return out


def report(records, percentiles=(25, 50, 75, 90), scale100: bool = False, out_dir=None, methods=None, tasks=None) -> dict:
    """Aggregate percentiles; writes ``table.csv`` (final step) and ``series.csv``."""
    records = [r for r in records if (methods is None or r.method in methods) and (tasks is None or r.task in tasks)]
    if not records:
        raise ValueError("no records match the selection")
    table = percentile_table(records, percentiles, 100.0 if scale100 else 1.0)
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        cols = [f"p{p:g}" for p in percentiles]
        counts = {}
        for r in records:
            counts[(r.method, r.task)] = counts.get((r.method, r.task), 0) + 1
        with open(out_dir / "table.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["method", "task", "trials", "t", *cols])
            for (m, t), arr in table.items():
                w.writerow([m, t, counts[(m, t)], arr.shape[0], *(f"{v:.6g}" for v in arr[-1])])
        with open(out_dir / "series.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["method", "task", "t", *cols])
            for (m, t), arr in table.items():
                for step, row in enumerate(arr, 1):
                    w.writerow([m, t, step, *(f"{v:.6g}" for v in row)])
    return table


def median_at(records, t: int) -> float:
    return float(np.median([r.curve.regret[t - 1] for r in records]))
