"""Bayesian-MAML meta-training of the particle ensemble with the chaser loss.

For each sampled task the particles take K differentiable SVGD steps (the
chaser), then S further gradient-stopped steps (the leader).  The meta-loss
is the squared distance between chaser and leader, and its gradient with
respect to the initial particles updates the ensemble.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .bdqn import ParticleSet, ReplayBuffer, svgd_gradient, svgd_step, sync_targets, td_cost
from .config import ExperimentConfig
from .env import AFPolicy, FSAFPolicy, TaskSpec, run_episode, training_tasks
from .qnet import QNetwork, load_checkpoint, save_checkpoint

log = logging.getLogger(__name__)


class MetaGradientError(FloatingPointError):
    pass


@dataclass(frozen=True)
class InnerLoop:
    """Settings of one SVGD adaptation step."""

    eta: float = 0.01
    alpha: float = 1.0
    gamma: float = 0.98
    temperature: float = 1.0
    kappa: float = 1.0 / 128.0
    batch_size: int = 128
    max_grad_norm: float | None = None

    @classmethod
    def from_config(cls, cfg: ExperimentConfig) -> "InnerLoop":
        return cls(cfg.eta, cfg.alpha, cfg.gamma, cfg.temperature, cfg.kappa, cfg.batch_size, cfg.max_grad_norm)


@dataclass
class TaskBuffers:
    q: ReplayBuffer
    demo: ReplayBuffer

    @classmethod
    def create(cls, capacity: int = 1000) -> "TaskBuffers":
        return cls(ReplayBuffer(capacity, "Q"), ReplayBuffer(capacity, "demo"))

    def ready(self, batch_size: int, need_demo: bool) -> bool:
        return len(self.q) >= batch_size and (not need_demo or len(self.demo) >= batch_size)


def _draw(buffers: TaskBuffers, inner: InnerLoop, rng):
    q_batch = buffers.q.sample(inner.batch_size, rng)
    drawn = inner.kappa > 0 and rng.random() < inner.kappa
    demo_batch = buffers.demo.sample(inner.batch_size, rng) if drawn else None
    return q_batch, demo_batch, drawn


def svgd_update(net, pset, buffers, inner: InnerLoop, rng, differentiable: bool) -> ParticleSet:
    """One SVGD step on a fresh mini-batch (draws from ``rng``)."""
    q_batch, demo_batch, drawn = _draw(buffers, inner, rng)
    grads = svgd_gradient(
        net, pset, q_batch, demo_batch, inner.alpha, drawn, inner.gamma, inner.temperature,
        create_graph=differentiable, max_grad_norm=inner.max_grad_norm,
    )
    with ad.enable_grad() if differentiable else ad.no_grad():
        return svgd_step(pset, grads, inner.eta)


def adapt(net: QNetwork, init: ParticleSet, buffers: TaskBuffers, K: int, inner: InnerLoop, rng, differentiable: bool = True) -> ParticleSet:
    """K SVGD steps from ``init``; kept on the graph when ``differentiable``."""
    if K < 0:
        raise ValueError("K must be non-negative")
    if K and not buffers.ready(inner.batch_size, inner.kappa > 0):
        raise ValueError(
            f"buffers hold {len(buffers.q)} Q / {len(buffers.demo)} demo transitions; "
            f"need at least {inner.batch_size}"
        )
    pset = init
    for _ in range(K):
        pset = svgd_update(net, pset, buffers, inner, rng, differentiable)
    return pset


def leader(net: QNetwork, chaser: ParticleSet, buffers: TaskBuffers, S: int, inner: InnerLoop, rng) -> ParticleSet:
    """S further SVGD steps from the chaser, detached from the graph."""
    pset = chaser.detached()
    with ad.no_grad():
        for _ in range(S):
            pset = svgd_update(net, pset, buffers, inner, rng, differentiable=False)
    return pset.detached()


def chaser_loss(chaser: ParticleSet, lead: ParticleSet) -> ad.Node:
    """sum_n |theta_chaser_n - stopgrad(theta_leader_n)|^2."""
    if len(chaser) != len(lead):
        raise ValueError(f"particle counts differ: {len(chaser)} vs {len(lead)}")
    total = ad.constant(0.0)
    for a, b in zip(chaser.particles, lead.particles):
        total = ad.add(total, ad.sum(ad.square(ad.sub(a, b.value))))
    return total


def task_meta_gradient(net, pset: ParticleSet, buffers: TaskBuffers, cfg: ExperimentConfig, rng, task_name: str = "task"):
    """Gradient of one task's meta-loss with respect to the initial particles."""
    try:
        return _task_meta_gradient(net, pset, buffers, cfg, rng, task_name)
    except ad.GradientError as exc:
        raise MetaGradientError(f"non-finite meta-gradient on task {task_name!r}: {exc}") from exc


def _task_meta_gradient(net, pset, buffers, cfg, rng, task_name):
    inner = InnerLoop.from_config(cfg)
    exact = cfg.meta_grad == "exact"
    start = pset.as_variables() if exact else pset.detached()
    chaser = adapt(net, start, buffers, cfg.K, inner, rng, differentiable=exact)

    if cfg.meta_loss == "chaser":
        lead = leader(net, chaser, buffers, cfg.S, inner, rng)
        if exact:
            with ad.enable_grad():
                loss = chaser_loss(chaser, lead)
            grads = [g.value for g in ad.grad(loss, start.particles)] if loss.requires_grad else [np.zeros_like(p.value) for p in start.particles]
        else:
            loss = chaser_loss(chaser, lead)
            grads = [2.0 * (a.value - b.value) for a, b in zip(chaser.particles, lead.particles)]
    else:
        q_val = buffers.q.sample(inner.batch_size, rng)
        if exact:
            with ad.enable_grad():
                loss = ad.constant(0.0)
                for th, tg in zip(chaser.particles, chaser.targets):
                    loss = ad.add(loss, td_cost(net, th, tg, q_val, inner.gamma))
            grads = [g.value for g in ad.grad(loss, start.particles)]
        else:
            grads, total = [], 0.0
            for th, tg in zip(chaser.particles, chaser.targets):
                v = ad.variable(th.value)
                with ad.enable_grad():
                    c = td_cost(net, v, tg, q_val, inner.gamma)
                    grads.append(ad.grad(c, v).value)
                total += c.item()
            loss = ad.constant(total)

    if any(not np.all(np.isfinite(g)) for g in grads):
        raise MetaGradientError(f"non-finite meta-gradient on task {task_name!r}")
    return grads, float(loss.value)


class Adam:
    def __init__(self, lr: float, b1: float = 0.9, b2: float = 0.999, eps: float = 1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, b1, b2, eps
        self.m = self.v = None
        self.t = 0

    def step(self, params: list, grads: list) -> list:
        if self.m is None:
            self.m = [np.zeros_like(p) for p in params]
            self.v = [np.zeros_like(p) for p in params]
        self.t += 1
        out = []
        for i, (p, g) in enumerate(zip(params, grads)):
            self.m[i] = self.b1 * self.m[i] + (1 - self.b1) * g
            self.v[i] = self.b2 * self.v[i] + (1 - self.b2) * g * g
            mhat = self.m[i] / (1 - self.b1**self.t)
            vhat = self.v[i] / (1 - self.b2**self.t)
            out.append(p - self.lr * mhat / (np.sqrt(vhat) + self.eps))
        return out

    def state(self) -> dict:
        return {"t": self.t}


def apply_meta_gradient(pset: ParticleSet, grads, beta: float, optimizer=None) -> ParticleSet:
    """Theta <- Theta - beta * grad (plain) or an Adam step when given one."""
    values = pset.values()
    if optimizer is None:
        new = [p - beta * g for p, g in zip(values, grads)]
    else:
        new = optimizer.step(values, grads)
    return ParticleSet([ad.Node(v) for v in new], pset.targets, pset.iteration)


def meta_update(net, pset: ParticleSet, task_buffers: dict, cfg: ExperimentConfig, rng, optimizer=None):
    """One meta step on the summed per-task meta-losses.

    Returns ``(updated particles, {task: loss})``.
    """
    total = [np.zeros_like(p) for p in pset.values()]
    losses = {}
    for name, buffers in task_buffers.items():
        grads, loss = task_meta_gradient(net, pset, buffers, cfg, rng, name)
        losses[name] = loss
        total = [a + b for a, b in zip(total, grads)]
    return apply_meta_gradient(pset, total, cfg.beta, optimizer), losses


def select_checkpoint(log_records) -> int:
    """Iteration with the best average return; ties go to the later one.

    Accepts training-log records (dicts with ``iteration`` and
    ``avg_return``) or a bare sequence of returns indexed from 0.
    """
    records = list(log_records)
    if not records:
        raise ValueError("empty training log")
    best, best_it = -np.inf, None
    for i, rec in enumerate(records):
        value, it = (rec["avg_return"], rec["iteration"]) if isinstance(rec, dict) else (rec, i)
        if value >= best:
            best, best_it = value, it
    return best_it


# ---------------------------------------------------------------------------
# the full training loop


@dataclass
class TrainResult:
    net: QNetwork
    particles: ParticleSet
    log: list
    best_iteration: int | None
    checkpoints: dict = field(default_factory=dict)


def collect(task: TaskSpec, behaviour, buffers: TaskBuffers, cfg: ExperimentConfig, rng, min_transitions: int):
    """Roll behaviour and demo episodes on fresh instances of ``task``."""
    demo = AFPolicy("ei") if cfg.kappa > 0 else None
    regrets, returns = [], []
    n = 0
    while n < cfg.episodes_per_task or not buffers.ready(min_transitions, demo is not None):
        box, spec = task.sample(rng)
        curve, trans = run_episode(behaviour, box, task.budget, spec, rng, record_transitions=True)
        buffers.q.extend(trans)
        regrets.append(curve.regret[min(30, task.budget) - 1])
        returns.append(curve.total_return)
        if demo is not None:
            _, dtrans = run_episode(demo, box, task.budget, spec, rng, record_transitions=True)
            buffers.demo.extend(dtrans)
        n += 1
    return regrets, returns


def _metric(regret) -> float:
    return float(-np.log(max(regret, 1e-10)))


def train(cfg: ExperimentConfig, out_dir=None, tasks=None, progress=None, resume=None) -> TrainResult:
    """Meta-train an FSAF particle ensemble.

    Writes ``train_log.jsonl`` and checkpoints under ``out_dir`` when given.
    ``ckpt_XXXXXX.npz`` holds the parameters used for that iteration's
    rollouts; it is written whenever the iteration's average return ties or
    beats the best so far.  ``resume`` continues from a ``latest.npz``
    (particles, targets, iteration counter and rng state; replay buffers and
    optimizer moments start empty).
    """
    rng = np.random.default_rng(cfg.seed)
    net = QNetwork.preset(cfg.architecture)
    pset = ParticleSet.initialize(net, cfg.n_particles, rng)
    tasks = list(tasks) if tasks is not None else _config_tasks(cfg)
    buffers = {t.name: TaskBuffers.create(cfg.buffer_size) for t in tasks}
    optimizer = Adam(cfg.beta) if cfg.meta_optimizer == "adam" else None
    out = Path(out_dir) if out_dir is not None else None
    records, checkpoints = [], {}
    best_return, best_it, best_values = -np.inf, None, None
    first = 0
    if resume is not None:
        ck = load_checkpoint(resume)
        if ck["config_hash"] and ck["config_hash"] != cfg.hash:
            log.warning("resuming from %s written under a different config", resume)
        net = ck["net"]
        pset = ParticleSet([ad.Node(p) for p in ck["particles"]], ck["targets"], ck["iteration"])
        first = ck["iteration"]
        if ck.get("rng_state"):
            rng.bit_generator.state = ck["rng_state"]
        if out is not None and (out / "train_log.jsonl").exists():
            with open(out / "train_log.jsonl") as fh:
                records = [json.loads(line) for line in fh if line.strip()][:first]
            for rec in records:
                if rec["avg_return"] >= best_return:
                    best_return, best_it = rec["avg_return"], rec["iteration"]
    log_fh = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        log_fh = open(out / "train_log.jsonl", "w")
        for rec in records:
            log_fh.write(json.dumps(rec) + "\n")
    try:
        for it in range(first, cfg.iterations):
            t0 = time.perf_counter()
            k = min(cfg.tasks_per_iteration, len(tasks))
            chosen = [tasks[i] for i in rng.choice(len(tasks), size=k, replace=False)]
            behaviour = FSAFPolicy(net, pset.values(), mode="boltzmann", temperature=cfg.temperature)
            batch_buffers, task_returns, task_metric = {}, {}, {}
            all_regrets, all_returns = [], []
            for task in chosen:
                regrets, returns = collect(task, behaviour, buffers[task.name], cfg, rng, cfg.batch_size)
                batch_buffers[task.name] = buffers[task.name]
                task_returns[task.name] = float(np.mean(returns))
                task_metric[task.name] = float(np.mean([_metric(r) for r in regrets]))
                all_regrets += regrets
                all_returns += returns
            avg_return = float(np.mean(all_returns))
            if avg_return >= best_return:
                best_return, best_it = avg_return, it
                best_values = [p.copy() for p in pset.values()]
                if out is not None:
                    path = save_checkpoint(out / f"ckpt_{it:06d}.npz", net, best_values, pset.targets, it, cfg.hash)
                    checkpoints[it] = str(path)

            pset, losses = meta_update(net, pset, batch_buffers, cfg, rng, optimizer)
            pset.iteration = it + 1
            if pset.iteration % cfg.target_update_interval == 0:
                sync_targets(pset)
            rec = {
                "iteration": it,
                "tasks": [t.name for t in chosen],
                "task_returns": task_returns,
                "task_metric": task_metric,
                "avg_return": avg_return,
                "metric": float(np.mean([_metric(r) for r in all_regrets])),
                "losses": losses,
                "seconds": round(time.perf_counter() - t0, 3),
            }
            records.append(rec)
            if log_fh is not None:
                # wall-clock stays out of the log so reruns hash identically
                log_fh.write(json.dumps({k: v for k, v in rec.items() if k != "seconds"}) + "\n")
                log_fh.flush()
            if progress is not None:
                progress(rec)
            if out is not None and cfg.checkpoint_interval and pset.iteration % cfg.checkpoint_interval == 0:
                save_checkpoint(out / "latest.npz", net, pset.values(), pset.targets, pset.iteration, cfg.hash,
                                rng.bit_generator.state)
    finally:
        if log_fh is not None:
            log_fh.close()
    if out is not None:
        checkpoints["final"] = str(save_checkpoint(out / "final.npz", net, pset.values(), pset.targets, pset.iteration, cfg.hash, rng.bit_generator.state))
        if best_values is not None:
            checkpoints["best"] = str(save_checkpoint(out / "best.npz", net, best_values, pset.targets, best_it, cfg.hash))
    result = TrainResult(net, pset, records, best_it, checkpoints)
    result.best_particles = best_values if best_values is not None else pset.values()
    return result


def _config_tasks(cfg: ExperimentConfig) -> list:
    from .env import parse_task

    if cfg.tasks:
        return [parse_task(t, cfg.dim, cfg.grid_size, cfg.budget, cfg.noise) for t in cfg.tasks]
    return training_tasks(cfg.dim, cfg.grid_size, cfg.budget, cfg.noise)


def load_particles(path) -> tuple[QNetwork, ParticleSet]:
    ck = load_checkpoint(path)
    pset = ParticleSet([ad.Node(p) for p in ck["particles"]], ck["targets"], ck["iteration"])
    return ck["net"], pset
