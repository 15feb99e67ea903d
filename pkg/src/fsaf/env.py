"""Black-box functions and the Bayesian-optimisation episode engine."""

from __future__ import annotations

import csv
import functools
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.stats import qmc

from . import acquisition as acq
from . import gp
from .bdqn import Transition
from .gp import Dataset, KernelSpec
from .qnet import QNetwork, StateFeatures, ensemble_scores, featurize, pointwise_scores, select_action

REGRET_FLOOR = 1e-10
DEFAULT_NOISE = 1e-4
SCAN_POINTS = 2**15


def reward(regret: float) -> float:
    """-log of the simple regret, clipped below at REGRET_FLOOR."""
    return float(-np.log(max(regret, REGRET_FLOOR)))


# ---------------------------------------------------------------------------
# grids


def sobol_grid(d: int, n: int) -> np.ndarray:
    """First n unscrambled Sobol points in [0, 1)^d, skipping the origin."""
    if d < 1 or n < 1:
        raise ValueError(f"sobol_grid needs d >= 1 and n >= 1, got d={d}, n={n}")
    if d > qmc.Sobol.MAXDIM:
        raise ValueError(f"Sobol direction numbers support d <= {qmc.Sobol.MAXDIM}, got {d}")
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        eng = qmc.Sobol(d, scramble=False)
        eng.fast_forward(1)
        return eng.random(n)


def to_box(unit, lo, hi) -> np.ndarray:
    lo, hi = np.asarray(lo, float), np.asarray(hi, float)
    return lo + (hi - lo) * unit


# ---------------------------------------------------------------------------
# black boxes


@dataclass
class BlackBox:
    """A function to maximise.

    Discrete boxes are a value table over ``grid``; continuous ones carry an
    evaluator ``fn`` and use ``grid`` only as the reference set that defines
    ``f_star``.
    """

    name: str
    grid: np.ndarray
    values: np.ndarray
    lo: np.ndarray
    hi: np.ndarray
    fn: object = None
    noise: float = DEFAULT_NOISE
    augmentation: dict = field(default_factory=dict)

    def __post_init__(self):
        self.grid = np.atleast_2d(np.asarray(self.grid, dtype=float))
        self.values = np.asarray(self.values, dtype=float)
        self.lo = np.broadcast_to(np.asarray(self.lo, dtype=float), (self.dim,)).copy()
        self.hi = np.broadcast_to(np.asarray(self.hi, dtype=float), (self.dim,)).copy()

    @property
    def dim(self) -> int:
        return self.grid.shape[1]

    @property
    def discrete(self) -> bool:
        return self.fn is None

    @property
    def f_star(self) -> float:
        return float(np.max(self.values))

    def __call__(self, x) -> np.ndarray:
        if self.fn is None:
            raise TypeError(f"{self.name} is a lookup table; index it by grid row")
        return np.asarray(self.fn(np.atleast_2d(np.asarray(x, dtype=float))), dtype=float)

    def discretize(self, n: int) -> "BlackBox":
        """Lookup-table version on the first n Sobol points of the domain."""
        pts = to_box(sobol_grid(self.dim, n), self.lo, self.hi)
        return BlackBox(f"{self.name}@{n}", pts, self(pts), self.lo, self.hi, None, self.noise, dict(self.augmentation))


def make_gp_task(spec: KernelSpec, grid, rng: np.random.Generator, noise: float = DEFAULT_NOISE, name: str = "gp") -> BlackBox:
    grid = np.atleast_2d(np.asarray(grid, dtype=float))
    values = gp.sample_prior_function(spec, grid, rng)
    return BlackBox(name, grid, values, np.zeros(grid.shape[1]), np.ones(grid.shape[1]), None, noise)


# ---------------------------------------------------------------------------
# benchmark functions (minimisation form)


def _ackley(x):
    d = x.shape[1]
    a = -20.0 * np.exp(-0.2 * np.sqrt((x**2).sum(1) / d))
    return a - np.exp(np.cos(2 * np.pi * x).sum(1) / d) + 20.0 + np.e


def _eggholder(x):
    x1, x2 = x[:, 0], x[:, 1]
    return -(x2 + 47) * np.sin(np.sqrt(np.abs(x2 + x1 / 2 + 47))) - x1 * np.sin(np.sqrt(np.abs(x1 - (x2 + 47))))


def _dixon_price(x):
    i = np.arange(2, x.shape[1] + 1)
    return (x[:, 0] - 1) ** 2 + (i * (2 * x[:, 1:] ** 2 - x[:, :-1]) ** 2).sum(1)


def _styblinski_tang(x):
    return 0.5 * (x**4 - 16 * x**2 + 5 * x).sum(1)


def _powell(x):
    # complete groups of four coordinates only; trailing ones are inert
    out = np.zeros(x.shape[0])
    for g in range(x.shape[1] // 4):
        a, b, c, e = (x[:, 4 * g + k] for k in range(4))
        out += (a + 10 * b) ** 2 + 5 * (c - e) ** 2 + (b - 2 * c) ** 4 + 10 * (a - e) ** 4
    return out


def _dixon_price_opt(d):
    i = np.arange(1, d + 1)
    return 2.0 ** (-(2.0**i - 2) / 2.0**i)


@dataclass(frozen=True)
class _Bench:
    fn: object
    xlim: float
    default_dim: int
    fixed_dim: int | None
    optimizer: object


BENCHMARKS = {
    "ackley": _Bench(_ackley, 5.0, 2, None, lambda d: np.zeros(d)),
    "eggholder": _Bench(_eggholder, 512.0, 2, 2, lambda d: np.array([512.0, 404.2319])),
    "dixon_price": _Bench(_dixon_price, 10.0, 2, None, _dixon_price_opt),
    "styblinski_tang": _Bench(_styblinski_tang, 5.0, 2, None, lambda d: np.full(d, -2.903534)),
    "powell": _Bench(_powell, 5.0, 10, None, lambda d: np.zeros(d)),
}


def raw_benchmark(name: str):
    if name not in BENCHMARKS:
        raise ValueError(f"unknown benchmark {name!r}; expected one of {sorted(BENCHMARKS)}")
    return BENCHMARKS[name].fn


@functools.lru_cache(maxsize=None)
def _bench_scan(name: str, d: int):
    b = BENCHMARKS[name]
    lo, hi = -b.xlim, b.xlim
    pts = np.vstack([to_box(sobol_grid(d, SCAN_POINTS), lo, hi), b.optimizer(d)[None]])
    g = -b.fn(pts)
    return pts, float(g.min()), float(g.max())


def benchmark(name: str, d: int | None = None, noise: float = DEFAULT_NOISE) -> BlackBox:
    """Negated benchmark rescaled so its values on the reference scan span [-2, 2]."""
    if name not in BENCHMARKS:
        raise ValueError(f"unknown benchmark {name!r}; expected one of {sorted(BENCHMARKS)}")
    b = BENCHMARKS[name]
    d = b.default_dim if d is None else int(d)
    if b.fixed_dim is not None and d != b.fixed_dim:
        raise ValueError(f"{name} is only defined for d={b.fixed_dim}, got d={d}")
    if d < 1:
        raise ValueError("dimension must be positive")
    pts, gmin, gmax = _bench_scan(name, d)
    span = gmax - gmin

    def fn(x, _f=b.fn):
        return -2.0 + 4.0 * (-_f(x) - gmin) / span

    return BlackBox(name, pts, fn(pts), np.full(d, -b.xlim), np.full(d, b.xlim), fn, noise)


def augment(box: BlackBox, rng: np.random.Generator, translation: float = 0.1, scale_range=(0.9, 1.1), shift=None, scale=None) -> BlackBox:
    """Randomly translate inputs and rescale outputs.

    The shift per dimension is uniform in +/- ``translation`` times the
    half-width of the domain; the output scale is uniform in ``scale_range``.
    Explicit ``shift``/``scale`` override the draws.
    """
    half = 0.5 * (box.hi - box.lo)
    if shift is None:
        shift = rng.uniform(-translation, translation, size=box.dim) * half
    if scale is None:
        scale = float(rng.uniform(*scale_range))
    shift = np.asarray(shift, dtype=float)
    info = {"shift": shift.tolist(), "scale": float(scale)}

    if box.fn is not None:
        base = box.fn

        def fn(x):
            return scale * base(x - shift)

        ref = np.vstack([box.grid, box.grid[np.argmax(box.values)] + shift])
        inside = np.all((ref >= box.lo) & (ref <= box.hi), axis=1)
        ref = ref[inside]
        return BlackBox(box.name, ref, fn(ref), box.lo, box.hi, fn, box.noise, info)

    # lookup tables: translation moves the grid, the table is re-read at the shifted points
    if np.any(shift != 0):
        raise ValueError("cannot translate a lookup-table black box")
    return BlackBox(box.name, box.grid, scale * box.values, box.lo, box.hi, None, box.noise, info)


def load_csv_blackbox(path, feature_columns=None, objective_column=None, noise: float = 0.0) -> BlackBox:
    """Discrete black box from a CSV table (header row, comma-separated)."""
    path = Path(path)
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ValueError(f"{path}: empty file") from None
        header = [h.strip() for h in header]
        if objective_column is None:
            objective_column = header[-1]
        if feature_columns is None:
            feature_columns = [h for h in header if h != objective_column]
        missing = [c for c in [*feature_columns, objective_column] if c not in header]
        if missing:
            raise ValueError(f"{path}: unknown columns {missing}")
        if not feature_columns:
            raise ValueError(f"{path}: no feature columns selected")
        cols = [header.index(c) for c in feature_columns]
        ycol = header.index(objective_column)
        X, y = [], []
        for row in reader:
            lineno = reader.line_num
            if not row or all(not c.strip() for c in row):
                continue
            try:
                X.append([float(row[c]) for c in cols])
                y.append(float(row[ycol]))
            except (ValueError, IndexError):
                raise ValueError(f"{path}: line {lineno}: cannot parse selected columns") from None
    if not y:
        raise ValueError(f"{path}: no data rows")
    X, y = np.array(X), np.array(y)
    _, first, inverse, counts = np.unique(X, axis=0, return_index=True, return_inverse=True, return_counts=True)
    if np.any(counts > 1):
        dup = np.flatnonzero(counts[inverse.reshape(-1)] > 1)
        raise ValueError(f"{path}: duplicate feature rows at data rows {(dup + 1).tolist()}")
    xmin, xmax = X.min(0), X.max(0)
    Xn = (X - xmin) / np.where(xmax > xmin, xmax - xmin, 1.0)
    ymin, ymax = y.min(), y.max()
    yn = -2.0 + 4.0 * (y - ymin) / (ymax - ymin) if ymax > ymin else np.zeros_like(y)
    d = Xn.shape[1]
    return BlackBox(path.stem, Xn, yn, np.zeros(d), np.ones(d), None, noise)


# ---------------------------------------------------------------------------
# task specifications


@dataclass(frozen=True)
class TaskSpec:
    """A family of black-box functions to sample instances from."""

    name: str
    kind: str = "gp"
    kernel: KernelSpec | None = None
    lengthscale_range: tuple | None = None
    benchmark: str | None = None
    csv_path: str | None = None
    feature_columns: tuple | None = None
    objective_column: str | None = None
    dim: int = 1
    grid_size: int = 64
    budget: int = 30
    augment: bool = False
    translation: float = 0.1
    scale_range: tuple = (0.9, 1.1)
    noise: float = DEFAULT_NOISE

    def __post_init__(self):
        if self.budget < 1:
            raise ValueError("budget must be at least 1")
        if self.kind not in ("gp", "benchmark", "csv"):
            raise ValueError(f"unknown task kind {self.kind!r}")

    def kernel_for(self, rng: np.random.Generator) -> KernelSpec:
        if self.lengthscale_range is None:
            return self.kernel
        return self.kernel.with_lengthscale(float(rng.uniform(*self.lengthscale_range)))

    def grid(self) -> np.ndarray:
        return sobol_grid(self.dim, self.grid_size)

    def sample(self, rng: np.random.Generator):
        """Draw one instance; returns ``(box, surrogate kernel or None)``."""
        if self.kind == "gp":
            spec = self.kernel_for(rng)
            box = make_gp_task(spec, self.grid(), rng, self.noise, self.name)
            if self.augment:
                box = augment(box, rng, 0.0, self.scale_range, shift=np.zeros(self.dim))
            return box, spec
        if self.kind == "benchmark":
            box = benchmark(self.benchmark, self.dim, self.noise)
            if self.augment:
                box = augment(box, rng, self.translation, self.scale_range)
            return box, None
        box = load_csv_blackbox(self.csv_path, self.feature_columns, self.objective_column, self.noise)
        if self.augment:
            box = augment(box, rng, 0.0, self.scale_range, shift=np.zeros(box.dim))
        return box, None


TRAIN_LENGTHSCALES = ((0.07, 0.13), (0.17, 0.23), (0.27, 0.33))
TRAIN_SM_LENGTHSCALES = ((0.27, 0.33), (0.47, 0.53), (0.57, 0.63))
TRAIN_SM_PERIODS = (0.3, 0.6)


def training_tasks(dim: int = 3, grid_size: int = 200, budget: int = 100, noise: float = DEFAULT_NOISE) -> list:
    """The nine GP task families used for meta-training."""
    tasks = []
    for kind in ("rbf", "matern32"):
        for lo, hi in TRAIN_LENGTHSCALES:
            tasks.append(TaskSpec(f"{kind}-{lo}-{hi}", "gp", KernelSpec(kind, lo), (lo, hi), dim=dim, grid_size=grid_size, budget=budget, noise=noise))
    for lo, hi in TRAIN_SM_LENGTHSCALES:
        tasks.append(TaskSpec(f"sm-{lo}-{hi}", "gp", gp.spectral_mixture(TRAIN_SM_PERIODS, lo), (lo, hi), dim=dim, grid_size=grid_size, budget=budget, noise=noise))
    return tasks


def heldout_tasks(dim: int = 3, grid_size: int = 200, budget: int = 100, noise: float = DEFAULT_NOISE) -> list:
    """GP kernels never seen in training (lengthscales 0.5-0.55)."""
    rng_ = (0.5, 0.55)
    common = dict(dim=dim, grid_size=grid_size, budget=budget, noise=noise)
    return [
        TaskSpec("sm3-0.2-0.4-0.8", "gp", gp.spectral_mixture((0.2, 0.4, 0.8), 0.5), rng_, **common),
        TaskSpec("sm3-0.3-0.6-0.9", "gp", gp.spectral_mixture((0.3, 0.6, 0.9), 0.5), rng_, **common),
        TaskSpec("rbf-0.5-0.55", "gp", KernelSpec("rbf", 0.5), rng_, **common),
        TaskSpec("matern32-0.5-0.55", "gp", KernelSpec("matern32", 0.5), rng_, **common),
    ]


def parse_task(text: str, dim: int = 1, grid_size: int = 64, budget: int = 30, noise: float = DEFAULT_NOISE) -> TaskSpec:
    """Task from a short string.

    Forms: ``rbf-0.5-0.55`` / ``matern32-lo-hi`` / ``sm-lo-hi`` (GP families,
    optionally followed by ``@d``), one of the held-out or training names,
    a benchmark name (``ackley``, ``powell@10``...), or
    ``csv:path[:objective[:feat1,feat2]]``.
    """
    text = text.strip()
    if text.startswith("csv:"):
        parts = text[4:].split(":")
        feats = tuple(parts[2].split(",")) if len(parts) > 2 and parts[2] else None
        obj = parts[1] if len(parts) > 1 and parts[1] else None
        return TaskSpec(Path(parts[0]).stem, "csv", csv_path=parts[0], objective_column=obj, feature_columns=feats, budget=budget, noise=0.0)
    name, _, d = text.partition("@")
    d = int(d) if d else None
    if name in BENCHMARKS:
        b = BENCHMARKS[name]
        return TaskSpec(name, "benchmark", benchmark=name, dim=d or b.default_dim, grid_size=grid_size, budget=budget, augment=True, noise=noise)
    dd = d or dim
    known = {t.name: t for t in training_tasks(dd, grid_size, budget, noise) + heldout_tasks(dd, grid_size, budget, noise)}
    if name in known:
        return known[name]
    pieces = name.split("-")
    if len(pieces) == 3 and pieces[0] in ("rbf", "matern32", "sm"):
        lo, hi = float(pieces[1]), float(pieces[2])
        kernel = gp.spectral_mixture(TRAIN_SM_PERIODS, lo) if pieces[0] == "sm" else KernelSpec(pieces[0], lo)
        return TaskSpec(name, "gp", kernel, (lo, hi), dim=dd, grid_size=grid_size, budget=budget, noise=noise)
    raise ValueError(f"cannot parse task {text!r}")


# ---------------------------------------------------------------------------
# policies


@dataclass
class Step:
    t: int
    T: int
    data: Dataset
    surrogate: KernelSpec
    rng: np.random.Generator
    n_candidates: int
    post: gp.GpPosterior | None = None
    feats: StateFeatures | None = None
    cache: dict = field(default_factory=dict)

    @property
    def y_best(self) -> float:
        return float(np.max(self.data.y))

    def posterior(self, points) -> gp.GpPosterior:
        return gp.posterior(self.data, self.surrogate, points)


class AFPolicy:
    """Greedy maximiser of a classic acquisition function."""

    needs_features = False

    def __init__(self, name: str, delta: float = 0.1):
        if name not in ("ei", "pi", "ucb", "mes", "random"):
            raise ValueError(f"unknown acquisition function {name!r}")
        self.name = name
        self.delta = delta

    def _scores(self, step: Step, post: gp.GpPosterior) -> np.ndarray:
        if self.name == "ei":
            return acq.ei(post, step.y_best).scores
        if self.name == "pi":
            return acq.pi(post, step.y_best).scores
        if self.name == "ucb":
            return acq.ucb(post, acq.ucb_beta(step.t, step.n_candidates, self.delta)).scores
        if self.name == "mes":
            if "y_star" not in step.cache:
                step.cache["y_star"] = acq.sample_max_value(post, step.rng, step.y_best)
            return acq.mes_from_sample(post, step.cache["y_star"]).scores
        return acq.random_af(np.size(post.mean), step.rng).scores

    def select(self, step: Step) -> int:
        return int(np.argmax(self._scores(step, step.post)))

    def score_points(self, step: Step, points) -> np.ndarray:
        return self._scores(step, step.posterior(points))


class FixedPolicy:
    """Plays a fixed sequence of grid indices (testing aid)."""

    needs_features = False
    name = "fixed"

    def __init__(self, indices):
        self.indices = list(indices)

    def select(self, step: Step) -> int:
        return self.indices[(step.t - 2) % len(self.indices)]


class FSAFPolicy:
    """Acquisition by an ensemble of Q-network particles."""

    needs_features = True
    name = "fsaf"

    def __init__(self, net: QNetwork, particles, mode: str = "greedy", temperature: float = 1.0, ensemble: str = "mean"):
        self.net = net
        self.particles = [p.value if hasattr(p, "value") else np.asarray(p) for p in particles]
        self.mode = mode
        self.temperature = temperature
        self.ensemble = ensemble

    def select(self, step: Step) -> int:
        q = ensemble_scores(self.net, self.particles, step.feats, self.ensemble, step.rng)
        return select_action(q, self.mode, step.rng, self.temperature)

    def score_points(self, step: Step, points) -> np.ndarray:
        feats = featurize(step.posterior(points), step.y_best, step.t, step.T)
        if self.ensemble == "sample":
            if "particle" not in step.cache:
                step.cache["particle"] = int(step.rng.integers(len(self.particles)))
            return pointwise_scores(self.net, [self.particles[step.cache["particle"]]], feats)
        return pointwise_scores(self.net, self.particles, feats)


def make_policy(name: str, **kw):
    if name == "fsaf":
        return FSAFPolicy(**kw)
    return AFPolicy(name, **kw)


# ---------------------------------------------------------------------------
# episodes


@dataclass
class RegretCurve:
    t: np.ndarray
    choice: list
    y: np.ndarray
    best_y: np.ndarray
    regret: np.ndarray
    reward: np.ndarray

    @property
    def total_return(self) -> float:
        return float(self.reward[1:].sum())

    @property
    def final_regret(self) -> float:
        return float(self.regret[-1])

    def to_dict(self) -> dict:
        return {
            "t": self.t.tolist(),
            "choice": [c if isinstance(c, int) else list(map(float, c)) for c in self.choice],
            "y": self.y.tolist(),
            "best_y": self.best_y.tolist(),
            "regret": self.regret.tolist(),
            "reward": self.reward.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RegretCurve":
        return cls(
            np.asarray(d["t"], dtype=int),
            [c if isinstance(c, int) else list(c) for c in d["choice"]],
            np.asarray(d["y"], dtype=float),
            np.asarray(d["best_y"], dtype=float),
            np.asarray(d["regret"], dtype=float),
            np.asarray(d["reward"], dtype=float),
        )


def hierarchical_argmax(score_fn, lo, hi, n_coarse: int = 2000, n_m: int = 10, n_local: int = 1000):
    """Maximise a pointwise score over a box by two-level Sobol gridding.

    Returns ``(point, score)``.  Local boxes have half-width
    ``(hi - lo) * n_coarse ** (-1/d)`` and are clipped to the domain.
    """
    lo, hi = np.asarray(lo, float), np.asarray(hi, float)
    if np.any(lo >= hi):
        raise ValueError(f"degenerate box: lo={lo}, hi={hi}")
    d = lo.size
    coarse = to_box(sobol_grid(d, n_coarse), lo, hi)
    s = np.asarray(score_fn(coarse), dtype=float)
    best_i = int(np.argmax(s))
    best_x, best_s = coarse[best_i], s[best_i]
    top = np.argsort(-s, kind="stable")[: min(n_m, n_coarse)]
    half = (hi - lo) * n_coarse ** (-1.0 / d)
    unit = sobol_grid(d, n_local)
    for i in top:
        c = coarse[i]
        local = to_box(unit, np.maximum(lo, c - half), np.minimum(hi, c + half))
        ls = np.asarray(score_fn(local), dtype=float)
        j = int(np.argmax(ls))
        if ls[j] > best_s:
            best_x, best_s = local[j], ls[j]
    return best_x, float(best_s)


def run_episode(
    policy,
    box: BlackBox,
    T: int,
    surrogate: KernelSpec,
    rng: np.random.Generator,
    record_transitions: bool | None = None,
    hierarchical: dict | None = None,
):
    """Run one BO episode; returns ``(RegretCurve, transitions)``.

    Step 1 samples a uniformly random candidate.  Each later step computes
    the GP posterior, lets the policy choose, and observes a noisy value.
    Transitions are only produced on lookup-table boxes.
    """
    if T < 1:
        raise ValueError("budget T must be at least 1")
    if record_transitions is None:
        record_transitions = getattr(policy, "needs_features", False)
    discrete = box.discrete
    if not discrete and record_transitions:
        raise ValueError("transitions require a discrete candidate grid")
    f_star = box.f_star
    sd = np.sqrt(box.noise)
    data = Dataset.empty(box.dim, noise=max(box.noise, 0.0))
    hopts = {"n_coarse": 2000, "n_m": 10, "n_local": 1000, **(hierarchical or {})}

    if discrete:
        M = box.grid.shape[0]
        choice = int(rng.integers(M))
        x, fx = box.grid[choice], box.values[choice]
    else:
        x = to_box(rng.random(box.dim), box.lo, box.hi)
        fx = float(box(x)[0])
        choice = x.tolist()
        M = hopts["n_coarse"]

    ts, choices, ys, bests, regrets, rewards = [], [], [], [], [], []
    best_f = -np.inf
    transitions = []
    pending = None

    def observe(t, choice, x, fx):
        nonlocal data, best_f
        y = float(fx + sd * rng.standard_normal()) if sd > 0 else float(fx)
        data = data.append(x, y)
        best_f = max(best_f, float(fx))
        r = max(f_star - best_f, 0.0)
        ts.append(t)
        choices.append(choice)
        ys.append(y)
        bests.append(float(np.max(data.y)))
        regrets.append(r)
        rewards.append(reward(r))
        return r

    observe(1, choice, x, fx)
    for t in range(2, T + 1):
        step = Step(t, T, data, surrogate, rng, M)
        if discrete:
            step.post = step.posterior(box.grid)
            if record_transitions or getattr(policy, "needs_features", False):
                step.feats = featurize(step.post, step.y_best, t, T)
            if pending is not None:
                s, a, r = pending
                transitions.append(Transition(s, a, r, step.feats, False))
            a = int(policy.select(step))
            x, fx = box.grid[a], box.values[a]
            observe(t, a, x, fx)
            if record_transitions:
                pending = (step.feats, a, rewards[-1])
        else:
            x, _ = hierarchical_argmax(lambda p: policy.score_points(step, p), box.lo, box.hi, **hopts)
            observe(t, x.tolist(), x, float(box(x)[0]))
    if pending is not None:
        s, a, r = pending
        transitions.append(Transition(s, a, r, s, True))

    curve = RegretCurve(np.array(ts), choices, np.array(ys), np.array(bests), np.array(regrets), np.array(rewards))
    return curve, transitions
