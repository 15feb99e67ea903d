"""Acceptance gate: one PASS/FAIL line per criterion.

Criteria 6-8 train desk-scale ensembles (three seeds at N = 5 and N = 1).
Runs are cached under ``FSAF_ACCEPT_DIR`` (default ``.acceptance_runs`` next
to the tests) keyed by config hash, and interrupted runs resume from their
latest checkpoint.
"""

import os
import subprocess
import sys
import time
from pathlib import Path

import numpy as np
import pytest

from fsaf import acquisition as acq
from fsaf import autodiff as ad
from fsaf import bdqn, config, env, gp, harness, meta
from fsaf.bdqn import Batch, ParticleSet
from fsaf.gp import Dataset, GpPosterior
from fsaf.qnet import QNetwork, load_checkpoint

from conftest import rel_err

HERE = Path(__file__).parent
RUNS = Path(os.environ.get("FSAF_ACCEPT_DIR", HERE.parent / ".acceptance_runs"))
SEEDS = (0, 1, 2)
RESULTS: dict = {}


def verdict(n, ok, detail, seconds, limit):
    ok = bool(ok) and seconds <= limit
    RESULTS[n] = f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}  ({seconds:.1f}s, limit {limit:g}s)"
    print(RESULTS[n])
    assert ok, RESULTS[n]


# ---------------------------------------------------------------------------
# training runs shared by criteria 6-8


def desk_config(seed, n):
    return config.preset("desk", seed=seed, n_particles=n)


def ensure_run(seed, n):
    """Train (or reuse) a desk run; returns (out_dir, total training seconds)."""
    cfg = desk_config(seed, n)
    out = RUNS / f"desk_n{n}_s{seed}_{cfg.hash}"
    final = out / "final.npz"
    clock = out / "train_seconds.txt"
    spent = float(clock.read_text()) if clock.exists() else 0.0
    if final.exists() and load_checkpoint(final)["iteration"] == cfg.iterations:
        return out, spent
    latest = out / "latest.npz"
    t0 = time.perf_counter()
    meta.train(cfg, out, resume=latest if latest.exists() else None)
    # time before an interruption is lost; only completed segments count
    spent += time.perf_counter() - t0
    clock.write_text(f"{spent:.1f}")
    return out, spent


def train_log(out):
    import json

    with open(out / "train_log.jsonl") as fh:
        return [json.loads(line) for line in fh if line.strip()]


@pytest.fixture(scope="module")
def runs():
    RUNS.mkdir(parents=True, exist_ok=True)
    out = {}
    for n in (5, 1):
        for s in SEEDS:
            out[(n, s)] = ensure_run(s, n)
    return out


def pooled_regret(method, tasks, trials, budget, net=None, particles=None, master=0):
    vals = []
    for task in tasks:
        recs = harness.evaluate(method, [task], trials, budget, master, net, particles)
        vals += [r.curve.regret[budget - 1] for r in recs]
    return np.array(vals)


# ---------------------------------------------------------------------------
# 1-5: exact oracle checks


def test_criterion_01_gp_oracle():
    from test_gp import dense_oracle, random_instance

    t0 = time.perf_counter()
    worst = 0.0
    for seed in range(50):
        data, spec, q = random_instance(np.random.default_rng(seed))
        mean, sd, lml = dense_oracle(data.x, data.y, data.noise, spec, q)
        post = gp.posterior(data, spec, q)
        worst = max(worst, np.max(np.abs(post.mean - mean)), np.max(np.abs(post.std - sd)),
                    abs(gp.log_marginal_likelihood(data, spec) - lml))
    verdict(1, worst <= 1e-8, f"max abs error {worst:.2e} over 50 instances (tol 1e-8)", time.perf_counter() - t0, 10)


def test_criterion_02_af_closed_forms():
    t0 = time.perf_counter()
    rng = np.random.default_rng(2)
    worst = 0.0
    for _ in range(20):
        mu, sd, yb = rng.normal(), rng.uniform(0.1, 2.0), rng.normal()
        f = mu + sd * rng.standard_normal(10**6)
        p = GpPosterior(np.array([mu]), np.array([sd]))
        worst = max(worst, abs(acq.ei(p, yb).scores[0] - np.maximum(f - yb, 0).mean()),
                    abs(acq.pi(p, yb).scores[0] - (f > yb).mean()))
    e0 = acq.ei(GpPosterior(np.zeros(1), np.ones(1)), 0.0).scores[0]
    ok = worst <= 1e-2 and abs(e0 - 0.398942) <= 1e-6
    verdict(2, ok, f"max MC gap {worst:.2e} (tol 1e-2), EI(0, 1) = {e0:.7f}", time.perf_counter() - t0, 30)


def test_criterion_03_svgd():
    from test_bdqn import _svgd_run

    t0 = time.perf_counter()
    mu, var = 1.5, 0.7
    score = lambda x: -(x - mu) / var  # noqa: E731
    got = _svgd_run([np.array([-2.0])], score, 0.05, 100)[0]
    ref = np.array([-2.0])
    for _ in range(100):
        ref = ref + 0.05 * score(ref)
    gap = float(np.max(np.abs(got - ref)))
    mean = np.array([1.0, -1.0])
    cov = np.array([[1.0, 0.3], [0.3, 0.5]])
    P = np.linalg.inv(cov)
    rng = np.random.default_rng(0)
    X = [rng.normal(size=2) * 0.5 - 2.0 for _ in range(20)]
    out = _svgd_run(X, lambda x: -P @ (x - mean), 0.05, 500)
    dm = float(np.max(np.abs(out.mean(0) - mean)))
    ds = float(np.max(np.abs(out.std(0) - np.sqrt(np.diag(cov)))))
    ok = gap <= 1e-10 and dm <= 0.1 and ds <= 0.15
    verdict(3, ok, f"N=1 gap {gap:.1e}; 2-D mean err {dm:.3f}, std err {ds:.3f}", time.perf_counter() - t0, 60)


def test_criterion_04_meta_gradient():
    from test_meta import TOY, chaser_fd_check

    t0 = time.perf_counter()
    g, fd = chaser_fd_check(4, 2, coords=10)
    err = rel_err(g, fd)
    verdict(4, err <= 1e-3 and TOY.num_params <= 20,
            f"relative error {err:.2e} at 10 coordinates, {TOY.num_params} parameters (tol 1e-3)", time.perf_counter() - t0, 120)


def torch_q(torch, net, theta, rows, shared):
    adv, val = net._slices()

    def mlp(x, layers):
        for k, ((w0, w1, shape), (b0, b1)) in enumerate(layers):
            x = x @ theta[w0:w1].reshape(shape) + theta[b0:b1]
            if k < len(layers) - 1:
                x = torch.relu(x)
        return x

    B, M, _ = rows.shape
    A = mlp(torch.from_numpy(rows).reshape(B * M, 4), adv).reshape(B, M)
    V = mlp(torch.from_numpy(shared), val)
    return A - A.mean(dim=1, keepdim=True) + V


def test_criterion_05_dqn_degeneracy():
    torch = pytest.importorskip("torch")
    from helpers import random_batch

    t0 = time.perf_counter()
    worst = 0.0
    for seed in range(5):
        rng = np.random.default_rng(seed)
        net = QNetwork((8, 8))
        theta, target = net.init(rng), net.init(rng)
        batch: Batch = random_batch(rng, 32, M=10, terminal_every=5)
        alpha, gamma = float(rng.uniform(0.5, 2.0)), 0.98
        pset = ParticleSet([ad.Node(theta)], [target])
        (phi,) = bdqn.svgd_gradient(net, pset, batch, None, alpha, False, gamma)
        # independent oracle: torch autograd of the plain DQN loss
        th = torch.tensor(theta, requires_grad=True)
        with torch.no_grad():
            q_next = torch_q(torch, net, torch.from_numpy(target), batch.next_rows, batch.next_shared)
            y = torch.from_numpy(batch.rewards) + gamma * torch.where(
                torch.from_numpy(batch.terminal), torch.zeros(()), q_next.max(dim=1).values.double())
        q = torch_q(torch, net, th, batch.rows, batch.shared)
        q_sa = q[torch.arange(len(batch)), torch.from_numpy(batch.actions)]
        loss = ((y - q_sa) ** 2).mean()
        (g,) = torch.autograd.grad(loss, th)
        worst = max(worst, float(np.max(np.abs(phi.value - (-1.0 / alpha) * g.numpy()))))
    verdict(5, worst <= 1e-8, f"max abs gap to -(1/alpha) grad L_TD {worst:.2e} (tol 1e-8)", time.perf_counter() - t0, 10)


# ---------------------------------------------------------------------------
# 6-8: desk-scale reproductions


def test_criterion_06_training_progress(runs):
    tasks = env.training_tasks(1, 64, 30)
    lines, ok, worst = [], True, 0.0
    for s in SEEDS:
        t0 = time.perf_counter()
        out, train_s = runs[(5, s)]
        metric = np.array([r["metric"] for r in train_log(out)])
        first, last = metric[:50].mean(), metric[-50:].mean()
        net, pset = meta.load_particles(out / "best.npz")
        f = np.median(pooled_regret("fsaf", tasks, 50, 30, net, pset.values()))
        r = np.median(pooled_regret("random", tasks, 50, 30))
        ok &= bool(last > first and f < r)
        lines.append(f"seed {s}: metric {first:.2f} -> {last:.2f}, median regret fsaf {f:.3g} vs random {r:.3g}")
        worst = max(worst, train_s + time.perf_counter() - t0)
    verdict(6, ok, "; ".join(lines) + "; slowest seed", worst, 30 * 60)


def test_criterion_07_ensemble_ablation(runs):
    t0 = time.perf_counter()
    tasks = env.heldout_tasks(1, 64, 30)
    wins, lines = 0, []
    for s in SEEDS:
        reg = {}
        for n in (5, 1):
            net, pset = meta.load_particles(runs[(n, s)][0] / "best.npz")
            reg[n] = pooled_regret("fsaf", tasks, 100, 30, net, pset.values())
        wins += np.median(reg[5]) <= np.median(reg[1])
        lines.append(f"seed {s}: median N=5 {np.median(reg[5]):.3g} vs N=1 {np.median(reg[1]):.3g}"
                     f" (mean {reg[5].mean():.3g} vs {reg[1].mean():.3g})")
    seconds = time.perf_counter() - t0 + sum(runs[(n, s)][1] for n in (5, 1) for s in SEEDS)
    verdict(7, wins >= 2, f"{wins}/3 seeds with N=5 <= N=1; " + "; ".join(lines), seconds, 3600)


def test_criterion_08_few_shot(runs):
    t0 = time.perf_counter()
    out = runs[(5, 0)][0]
    cfg = desk_config(0, 5)
    task = env.parse_task("rbf-0.5-0.55", 1, 64, 30)
    net, pset = meta.load_particles(out / "best.npz")
    reg = {}
    for K in (0, 5):
        adapted = harness.adapt_particles(net, pset, task, 5, K, cfg, 0)
        reg[K] = pooled_regret("fsaf", [task], 100, 30, net, adapted.values())
    med = {K: np.median(r) for K, r in reg.items()}
    verdict(8, med[5] <= med[0], f"median regret K=5 {med[5]:.3g} vs K=0 {med[0]:.3g}"
            f" (mean {reg[5].mean():.3g} vs {reg[0].mean():.3g}) over 100 paired trials",
            time.perf_counter() - t0, 20 * 60)


# ---------------------------------------------------------------------------
# 9-10: protocol and invariants


def test_criterion_09_protocol(tmp_path):
    from test_harness import GOLDEN, golden_records

    t0 = time.perf_counter()
    cfg_ok = config.dump(config.preset("paper")) == (GOLDEN / "paper_config.yaml").read_text()
    path = tmp_path / "r.jsonl"
    w = harness.ResultsWriter(path)
    for r in golden_records():
        w.write(r)
    from fsaf import cli

    code = cli.main(["report", "--in", str(path), "--scale100", "--out", str(tmp_path / "rep")])
    rep_ok = code == 0 and (tmp_path / "rep" / "table.csv").read_text() == (GOLDEN / "report_table.csv").read_text()
    verdict(9, cfg_ok and rep_ok, f"paper config golden {'ok' if cfg_ok else 'differs'}, report golden {'ok' if rep_ok else 'differs'}",
            time.perf_counter() - t0, 5)


def test_criterion_10_invariants():
    import test_properties

    t0 = time.perf_counter()
    res = subprocess.run([sys.executable, "-m", "pytest", "-q", "-p", "no:cacheprovider", str(HERE / "test_properties.py")],
                         capture_output=True, text=True, cwd=HERE.parent)
    tail = res.stdout.strip().splitlines()[-1] if res.stdout.strip() else res.stderr[-200:]
    verdict(10, res.returncode == 0 and test_properties.N >= 100, f"{tail}; {test_properties.N} cases per property",
            time.perf_counter() - t0, 300)
