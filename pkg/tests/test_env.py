import numpy as np
import pytest

from fsaf import env, gp
from fsaf.env import AFPolicy, FixedPolicy, TaskSpec
from fsaf.gp import KernelSpec


def van_der_corput(n):
    out = []
    for i in range(1, n + 1):
        x, denom = 0.0, 1.0
        while i:
            denom *= 2
            x += (i & 1) / denom
            i >>= 1
        out.append(x)
    return np.array(out)


def test_sobol_1d_matches_van_der_corput():
    assert env.sobol_grid(1, 3).ravel().tolist() == [0.5, 0.75, 0.25]
    # unscrambled 1-D Sobol is the base-2 radical inverse in Gray-code order;
    # as a set, the first 2^k - 1 points agree
    assert sorted(env.sobol_grid(1, 63).ravel()) == sorted(van_der_corput(63))


def test_sobol_range_and_errors():
    g = env.sobol_grid(5, 200)
    assert g.shape == (200, 5) and np.all((g >= 0) & (g < 1))
    with pytest.raises(ValueError):
        env.sobol_grid(0, 5)
    with pytest.raises(ValueError):
        env.sobol_grid(2, 0)
    with pytest.raises(ValueError, match="d <="):
        env.sobol_grid(100000, 2)


def star_discrepancy_estimate(P, probes):
    # sup over anchored boxes [0, q) of |empirical - volume|, on probe corners
    inside = np.all(P[None, :, :] < probes[:, None, :], axis=2).mean(1)
    return np.max(np.abs(inside - probes.prod(1)))


def test_sobol_discrepancy_below_uniform():
    rng = np.random.default_rng(0)
    probes = np.vstack([rng.random((4000, 2)), env.sobol_grid(2, 256)])
    s = star_discrepancy_estimate(env.sobol_grid(2, 256), probes)
    u = np.median([star_discrepancy_estimate(rng.random((256, 2)), probes) for _ in range(20)])
    assert s < u


def test_reward():
    assert env.reward(0.0) == pytest.approx(-np.log(1e-10))
    vals = [env.reward(z) for z in (1e-10, 1e-5, 0.1, 1.0, 10.0)]
    assert all(a > b for a, b in zip(vals, vals[1:]))
    assert np.isfinite(env.reward(0.0))


def test_make_gp_task():
    grid = env.sobol_grid(1, 32)
    a = env.make_gp_task(KernelSpec("rbf", 0.2), grid, np.random.default_rng(1))
    b = env.make_gp_task(KernelSpec("rbf", 0.2), grid, np.random.default_rng(1))
    assert np.array_equal(a.values, b.values)
    assert np.all(a.f_star >= a.values)
    curve, _ = env.run_episode(FixedPolicy([int(np.argmax(a.values))]), a, 3, KernelSpec("rbf", 0.2), np.random.default_rng(0))
    assert curve.regret[1] == 0.0


def test_benchmark_raw_values():
    assert abs(env.raw_benchmark("ackley")(np.zeros((1, 2)))[0]) < 1e-12
    st = env.raw_benchmark("styblinski_tang")(np.full((1, 3), -2.903534))[0]
    assert st == pytest.approx(-39.166166 * 3, abs=1e-4)
    assert env.raw_benchmark("eggholder")(np.array([[512.0, 404.2319]]))[0] == pytest.approx(-959.6407, abs=1e-3)
    assert env.raw_benchmark("dixon_price")(env._dixon_price_opt(4)[None])[0] == pytest.approx(0.0, abs=1e-12)
    assert env.raw_benchmark("powell")(np.zeros((1, 10)))[0] == 0.0


@pytest.mark.parametrize("name", sorted(env.BENCHMARKS))
def test_benchmark_scaling(name):
    box = env.benchmark(name)
    assert box.values.min() == pytest.approx(-2.0, abs=1e-9)
    assert box.values.max() == pytest.approx(2.0, abs=1e-9)
    assert not box.discrete and box.dim == env.BENCHMARKS[name].default_dim


def test_benchmark_errors():
    with pytest.raises(ValueError, match="only defined"):
        env.benchmark("eggholder", 3)
    with pytest.raises(ValueError, match="unknown benchmark"):
        env.benchmark("rosenbrock")


def test_augment():
    box = env.benchmark("ackley")
    rng = np.random.default_rng(0)
    same = env.augment(box, rng, shift=np.zeros(2), scale=1.0)
    x = rng.uniform(-4, 4, size=(10, 2))
    assert np.array_equal(same(x), box(x))
    moved = env.augment(box, rng, shift=np.array([0.3, -0.2]), scale=1.0)
    assert moved(np.array([[0.3, -0.2]]))[0] == pytest.approx(2.0)
    assert moved.augmentation["shift"] == [0.3, -0.2]
    draws = [env.augment(box, np.random.default_rng(i)).augmentation for i in range(200)]
    shifts = np.array([d["shift"] for d in draws])
    scales = np.array([d["scale"] for d in draws])
    assert np.all(np.abs(shifts) <= 0.1 * 5.0) and np.all((scales >= 0.9) & (scales <= 1.1))


def test_augment_scale_multiplies_regret():
    grid = env.sobol_grid(1, 16)
    box = env.make_gp_task(KernelSpec("rbf", 0.2), grid, np.random.default_rng(2), noise=0.0)
    big = env.augment(box, np.random.default_rng(0), shift=np.zeros(1), scale=1.1)
    pol = FixedPolicy([3, 7, 1, 12])
    a, _ = env.run_episode(pol, box, 5, KernelSpec("rbf", 0.2), np.random.default_rng(5))
    b, _ = env.run_episode(pol, big, 5, KernelSpec("rbf", 0.2), np.random.default_rng(5))
    assert np.allclose(b.regret, 1.1 * a.regret)
    with pytest.raises(ValueError):
        env.augment(box, np.random.default_rng(0), shift=np.ones(1))


def test_csv_loader(tmp_path):
    p = tmp_path / "t.csv"
    p.write_text("a,b,y\n0,1,1\n1,0,2\n2,2,3\n")
    box = env.load_csv_blackbox(p)
    assert box.values.tolist() == [-2.0, 0.0, 2.0]
    assert box.grid.min() == 0.0 and box.grid.max() == 1.0
    curve, _ = env.run_episode(FixedPolicy([1]), box, 2, KernelSpec("rbf", 0.3), np.random.default_rng(0))
    assert curve.y[1] == 0.0
    sub = env.load_csv_blackbox(p, ["a"], "b")
    assert sub.dim == 1
    p.write_text("a,y\n0,1\n1,2\n0,5\n")
    with pytest.raises(ValueError, match=r"rows \[1, 3\]"):
        env.load_csv_blackbox(p)
    p.write_text("a,y\n0,1\nx,2\n")
    with pytest.raises(ValueError, match="line 3"):
        env.load_csv_blackbox(p)
    with pytest.raises(ValueError, match="unknown columns"):
        env.load_csv_blackbox(tmp_path / "t.csv", ["zz"])


def test_run_episode_basics():
    grid = env.sobol_grid(1, 16)
    box = env.make_gp_task(KernelSpec("rbf", 0.2), grid, np.random.default_rng(3), noise=0.0)
    curve, trans = env.run_episode(AFPolicy("ei"), box, 1, KernelSpec("rbf", 0.2), np.random.default_rng(0))
    assert len(curve.regret) == 1 and trans == []
    assert curve.regret[0] == pytest.approx(box.f_star - curve.y[0])
    oracle = FixedPolicy([int(np.argmax(box.values))])
    curve, _ = env.run_episode(oracle, box, 6, KernelSpec("rbf", 0.2), np.random.default_rng(0))
    assert np.all(curve.regret[1:] == 0)
    assert np.array_equal(curve.best_y, np.maximum.accumulate(curve.y))
    with pytest.raises(ValueError):
        env.run_episode(oracle, box, 0, KernelSpec("rbf", 0.2), np.random.default_rng(0))


def test_transitions():
    grid = env.sobol_grid(1, 16)
    box = env.make_gp_task(KernelSpec("rbf", 0.2), grid, np.random.default_rng(3))
    curve, trans = env.run_episode(AFPolicy("ei"), box, 8, KernelSpec("rbf", 0.2), np.random.default_rng(0), record_transitions=True)
    assert len(trans) == 7
    assert [t.terminal for t in trans] == [False] * 6 + [True]
    for k, tr in enumerate(trans):
        assert tr.action == curve.choice[k + 1]
        assert tr.reward == curve.reward[k + 1]
        assert tr.s.rows[0, 3] == pytest.approx((k + 2) / 8)
    for a, b in zip(trans, trans[1:]):
        assert a.s_next is b.s


def test_ei_beats_random_on_gp_tasks():
    task = env.parse_task("rbf-0.17-0.23", dim=1, grid_size=64, budget=30)
    med = {}
    for name in ("ei", "random"):
        regrets = []
        for seed in range(50):
            box, spec = task.sample(np.random.default_rng(seed))
            c, _ = env.run_episode(AFPolicy(name), box, 30, spec, np.random.default_rng(1000 + seed))
            regrets.append(c.final_regret)
        med[name] = np.median(regrets)
    assert med["ei"] < med["random"]


def test_hierarchical_argmax():
    target = np.array([0.337, -0.52])
    score = lambda p: -np.linalg.norm(p - target, axis=1)  # noqa: E731
    lo, hi = np.array([-1.0, -1.0]), np.array([1.0, 1.0])
    x, s = env.hierarchical_argmax(score, lo, hi, 200, 5, 100)
    spacing = 2.0 * 200 ** -0.5 / 100 ** 0.5
    assert np.linalg.norm(x - target) <= 2 * spacing
    coarse = env.to_box(env.sobol_grid(2, 200), lo, hi)
    assert s >= score(coarse).max()
    x2, s2 = env.hierarchical_argmax(score, lo, hi, 50, 50, 20)
    assert s2 >= score(env.to_box(env.sobol_grid(2, 50), lo, hi)).max()
    with pytest.raises(ValueError, match="degenerate"):
        env.hierarchical_argmax(score, hi, lo)


def test_continuous_episode_uses_hierarchical_gridding():
    task = env.parse_task("ackley", budget=4)
    box, _ = task.sample(np.random.default_rng(0))
    curve, _ = env.run_episode(AFPolicy("ei"), box, 4, KernelSpec("rbf", (2.0, 2.0)), np.random.default_rng(0),
                               hierarchical={"n_coarse": 200, "n_m": 3, "n_local": 50})
    assert len(curve.choice) == 4 and len(curve.choice[1]) == 2
    assert np.all(np.diff(curve.regret) <= 0) and np.all(curve.regret >= 0)


def test_parse_task_and_collections():
    assert len(env.training_tasks()) == 9 and len(env.heldout_tasks()) == 4
    t = env.parse_task("matern32-0.5-0.55", dim=2)
    assert t.dim == 2 and t.lengthscale_range == (0.5, 0.55)
    assert env.parse_task("powell").dim == 10
    assert env.parse_task("ackley@3").dim == 3
    assert env.parse_task("sm3-0.2-0.4-0.8").kernel.kind == "sm"
    with pytest.raises(ValueError, match="cannot parse"):
        env.parse_task("bogus")
    spec = env.training_tasks(1, 32, 10)[0]
    box, k = spec.sample(np.random.default_rng(0))
    assert 0.07 <= k.lengthscale <= 0.13 and box.grid.shape == (32, 1)


def test_heldout_lengthscales_outside_training_ranges():
    # rbf and matern held-out draws lie beyond every training range of their family
    for t in env.heldout_tasks():
        if t.kernel.kind == "sm":
            continue
        lo, hi = t.lengthscale_range
        train = [u.lengthscale_range for u in env.training_tasks() if u.kernel.kind == t.kernel.kind]
        assert train and all(hi < a or lo > b for a, b in train)
