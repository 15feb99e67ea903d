"""Gaussian-process kernels, exact posterior inference and prior sampling."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from scipy.linalg import cho_solve, solve_triangular

KINDS = ("rbf", "matern32", "sm")

JITTER_START = 1e-10
JITTER_MAX = 1e-4

#: lengthscale grid used by :func:`fit_lengthscale`
LENGTHSCALE_GRID = np.logspace(-2.0, 0.0, 50)
FIT_NOISE = 1e-4


class ConditioningError(np.linalg.LinAlgError):
    pass


@dataclass(frozen=True)
class SMComponent:
    weight: float
    period: float
    lengthscale: float


@dataclass(frozen=True)
class KernelSpec:
    """Kernel family and hyperparameters.

    ``lengthscale`` is a scalar or one value per input dimension.  For the
    spectral-mixture kind the envelope lengthscales live on the components.
    """

    kind: str = "rbf"
    lengthscale: float | tuple = 0.2
    variance: float = 1.0
    components: tuple = field(default_factory=tuple)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown kernel kind {self.kind!r}; expected one of {KINDS}")
        if self.variance <= 0:
            raise ValueError("kernel variance must be positive")
        if np.any(np.asarray(self.lengthscale, dtype=float) <= 0):
            raise ValueError("lengthscale must be positive")
        if self.kind == "sm":
            if not self.components:
                raise ValueError("spectral-mixture kernel needs at least one component")
            for c in self.components:
                if c.weight <= 0 or c.period <= 0 or c.lengthscale <= 0:
                    raise ValueError(f"non-positive spectral-mixture parameter in {c}")

    def with_lengthscale(self, ell) -> "KernelSpec":
        if self.kind == "sm":
            comps = tuple(replace(c, lengthscale=float(ell)) for c in self.components)
            return replace(self, components=comps)
        return replace(self, lengthscale=ell)


def spectral_mixture(periods, lengthscale, weights=None, variance=1.0) -> KernelSpec:
    weights = np.ones(len(periods)) if weights is None else np.asarray(weights, dtype=float)
    weights = weights / weights.sum()
    comps = tuple(SMComponent(float(w), float(p), float(lengthscale)) for w, p in zip(weights, periods))
    return KernelSpec("sm", lengthscale=float(lengthscale), variance=variance, components=comps)


@dataclass
class Dataset:
    x: np.ndarray
    y: np.ndarray
    noise: float = 1e-4

    def __post_init__(self):
        self.x = np.atleast_2d(np.asarray(self.x, dtype=float))
        self.y = np.asarray(self.y, dtype=float).reshape(-1)
        if self.y.size == 0:
            self.x = self.x.reshape(0, self.x.shape[-1] if self.x.size else 0)
        if self.x.shape[0] != self.y.size:
            raise ValueError(f"{self.x.shape[0]} inputs but {self.y.size} observations")
        if self.noise < 0:
            raise ValueError("noise variance must be non-negative")

    @classmethod
    def empty(cls, dim: int, noise: float = 1e-4) -> "Dataset":
        return cls(np.zeros((0, dim)), np.zeros(0), noise)

    def __len__(self):
        return self.y.size

    def append(self, x, y) -> "Dataset":
        x = np.asarray(x, dtype=float).reshape(1, -1)
        return Dataset(np.vstack([self.x.reshape(-1, x.shape[1]), x]), np.append(self.y, y), self.noise)


@dataclass
class GpPosterior:
    mean: np.ndarray
    std: np.ndarray


def _as_points(a) -> np.ndarray:
    a = np.asarray(a, dtype=float)
    if a.ndim == 1:
        a = a[:, None]
    return a


def kernel_matrix(spec: KernelSpec, A, B) -> np.ndarray:
    """Cross-covariance matrix ``K[i, j] = k(A[i], B[j])``."""
    A, B = _as_points(A), _as_points(B)
    if A.shape[1] != B.shape[1]:
        raise ValueError(f"dimension mismatch: {A.shape[1]} vs {B.shape[1]}")
    diff = A[:, None, :] - B[None, :, :]

    if spec.kind == "sm":
        # Product over input dimensions of a one-dimensional spectral mixture:
        #   sum_q w_q * exp(-r^2 / (2 l_q^2)) * cos(2 pi r / p_q)
        # i.e. Gaussian spectral densities centred at frequency 1/p_q with
        # spectral variance 1 / (4 pi^2 l_q^2).  Weights are normalized so
        # that k(x, x) equals the signal variance.
        w = np.array([c.weight for c in spec.components])
        w = w / w.sum()
        K = np.ones(diff.shape[:2])
        for d in range(diff.shape[2]):
            r = diff[:, :, d]
            acc = np.zeros_like(r)
            for wq, c in zip(w, spec.components):
                acc += wq * np.exp(-0.5 * (r / c.lengthscale) ** 2) * np.cos(2.0 * np.pi * r / c.period)
            K *= acc
        return spec.variance * K

    ell = np.broadcast_to(np.asarray(spec.lengthscale, dtype=float), (A.shape[1],))
    r2 = np.sum((diff / ell) ** 2, axis=-1)
    if spec.kind == "rbf":
        return spec.variance * np.exp(-0.5 * r2)
    r = np.sqrt(3.0 * r2)
    return spec.variance * (1.0 + r) * np.exp(-r)


def _cholesky(K: np.ndarray) -> np.ndarray:
    jitter = 0.0
    n = K.shape[0]
    while True:
        try:
            return np.linalg.cholesky(K + jitter * np.eye(n))
        except np.linalg.LinAlgError:
            jitter = JITTER_START if jitter == 0.0 else jitter * 10.0
            if jitter > JITTER_MAX * (1 + 1e-9):
                raise ConditioningError(
                    f"Cholesky failed for a {n}x{n} Gram matrix even with jitter {JITTER_MAX:g}"
                ) from None


def _factor(data: Dataset, spec: KernelSpec):
    K = kernel_matrix(spec, data.x, data.x) + data.noise * np.eye(len(data))
    L = _cholesky(K)
    alpha = cho_solve((L, True), data.y)
    return L, alpha


def posterior(data: Dataset, spec: KernelSpec, query) -> GpPosterior:
    query = _as_points(query)
    prior_var = spec.variance
    if len(data) == 0:
        n = query.shape[0]
        return GpPosterior(np.zeros(n), np.full(n, np.sqrt(prior_var)))
    L, alpha = _factor(data, spec)
    Ks = kernel_matrix(spec, data.x, query)
    mean = Ks.T @ alpha
    v = solve_triangular(L, Ks, lower=True, check_finite=False)
    var = prior_var - np.sum(v * v, axis=0)
    return GpPosterior(mean, np.sqrt(np.maximum(var, 0.0)))


def log_marginal_likelihood(data: Dataset, spec: KernelSpec) -> float:
    n = len(data)
    if n == 0:
        return 0.0
    L, alpha = _factor(data, spec)
    return float(-0.5 * data.y @ alpha - np.log(np.diag(L)).sum() - 0.5 * n * np.log(2.0 * np.pi))


def fit_lengthscale(data: Dataset, kind: str = "rbf", grid=None, base: KernelSpec | None = None) -> KernelSpec:
    """Pick the lengthscale with the highest marginal likelihood on a log grid.

    Noise is fixed at ``FIT_NOISE`` while fitting.  Ties go to the larger
    lengthscale.
    """
    if len(data) == 0:
        raise ValueError("cannot fit a lengthscale to an empty dataset")
    grid = LENGTHSCALE_GRID if grid is None else np.sort(np.asarray(grid, dtype=float))
    if base is None:
        base = spectral_mixture([0.3, 0.6], 1.0) if kind == "sm" else KernelSpec(kind)
    fit_data = Dataset(data.x, data.y, FIT_NOISE)
    best, best_ll = None, -np.inf
    for ell in grid:
        spec = base.with_lengthscale(float(ell))
        ll = log_marginal_likelihood(fit_data, spec)
        if ll >= best_ll:
            best, best_ll = spec, ll
    return best


def sample_prior_function(spec: KernelSpec, grid, rng: np.random.Generator) -> np.ndarray:
    """One draw of f ~ N(0, K) on the grid points."""
    grid = _as_points(grid)
    if grid.shape[0] == 0:
        raise ValueError("grid must be non-empty")
    L = _cholesky(kernel_matrix(spec, grid, grid))
    return L @ rng.standard_normal(grid.shape[0])
