"""Classic acquisition functions scored over a finite candidate set."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import log_ndtr, ndtr

from .gp import GpPosterior

SIGMA_EPS = 1e-12
UCB_DELTAS = (1e-1, 1e-2, 1e-3, 1e-4, 1e-5, 1e-6)
_SQRT_2PI = np.sqrt(2.0 * np.pi)


@dataclass
class AcquisitionScores:
    scores: np.ndarray
    tie_break: str = "lowest-index"

    @property
    def argmax(self) -> int:
        return int(np.argmax(self.scores))

    def __len__(self):
        return self.scores.size


def _pdf(z):
    return np.exp(-0.5 * z * z) / _SQRT_2PI


def _split(post: GpPosterior):
    mu = np.asarray(post.mean, dtype=float)
    sd = np.asarray(post.std, dtype=float)
    return mu, sd, sd >= SIGMA_EPS


def ei(post: GpPosterior, y_best: float) -> AcquisitionScores:
    mu, sd, ok = _split(post)
    imp = mu - y_best
    out = np.maximum(imp, 0.0)
    z = imp[ok] / sd[ok]
    out[ok] = imp[ok] * ndtr(z) + sd[ok] * _pdf(z)
    return AcquisitionScores(np.maximum(out, 0.0))


def pi(post: GpPosterior, y_best: float) -> AcquisitionScores:
    mu, sd, ok = _split(post)
    out = (mu > y_best).astype(float)
    out[ok] = ndtr((mu[ok] - y_best) / sd[ok])
    return AcquisitionScores(out)


def ucb(post: GpPosterior, beta: float) -> AcquisitionScores:
    if beta < 0:
        raise ValueError(f"beta must be non-negative, got {beta}")
    mu, sd, _ = _split(post)
    return AcquisitionScores(mu + beta * sd)


def ucb_beta(t: int, n_candidates: int, delta: float) -> float:
    """GP-UCB exploration weight sqrt(2 log(M t^2 pi^2 / (6 delta)))."""
    if not 0 < delta < 1:
        raise ValueError("delta must lie in (0, 1)")
    return float(np.sqrt(2.0 * np.log(n_candidates * t * t * np.pi**2 / (6.0 * delta))))


def _max_cdf(y, mu, sd):
    # log of prod_x Phi((y - mu) / sd), with deterministic points as steps
    with np.errstate(divide="ignore"):
        z = (y - mu) / np.maximum(sd, SIGMA_EPS)
    return log_ndtr(z).sum()


def _quantile(q, mu, sd, lo, hi, iters=100):
    logq = np.log(q)
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        if _max_cdf(mid, mu, sd) < logq:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def sample_max_value(post: GpPosterior, rng: np.random.Generator, y_best: float | None = None) -> float:
    """Draw y* from a Gumbel fitted to the approximate max-value distribution.

    The Gumbel location/scale come from the 25% and 75% quantiles of
    prod_x Phi((y - mu(x)) / sigma(x)), found by bisection.
    """
    mu, sd, _ = _split(post)
    lo = float(np.min(mu - 10.0 * sd)) - 1.0
    hi = float(np.max(mu + 10.0 * sd)) + 1.0
    y25 = _quantile(0.25, mu, sd, lo, hi)
    y75 = _quantile(0.75, mu, sd, lo, hi)
    spread = np.log(-np.log(0.25)) - np.log(-np.log(0.75))
    scale = max((y75 - y25) / spread, 1e-12)
    loc = y25 + scale * np.log(-np.log(0.25))
    u = rng.uniform(np.finfo(float).tiny, 1.0)
    y_star = loc - scale * np.log(-np.log(u))
    floor = float(np.max(mu)) if y_best is None else max(float(y_best), float(np.max(mu)))
    return float(max(y_star, floor + 1e-8))


def mes_from_sample(post: GpPosterior, y_star: float) -> AcquisitionScores:
    mu, sd, ok = _split(post)
    out = np.zeros_like(mu)
    g = (y_star - mu[ok]) / sd[ok]
    log_cdf = log_ndtr(g)
    ratio = np.exp(-0.5 * g * g - np.log(_SQRT_2PI) - log_cdf)
    out[ok] = g * ratio / 2.0 - log_cdf
    return AcquisitionScores(np.maximum(out, 0.0))


def mes(post: GpPosterior, y_best: float, rng: np.random.Generator) -> AcquisitionScores:
    """Max-value entropy search with a single Gumbel-sampled y*."""
    if np.size(post.mean) < 2:
        raise ValueError("MES needs at least two candidate points")
    return mes_from_sample(post, sample_max_value(post, rng, y_best))


def random_af(n: int, rng: np.random.Generator) -> AcquisitionScores:
    return AcquisitionScores(rng.random(n))
