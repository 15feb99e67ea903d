"""Bayesian deep Q-learning: replay buffers, TD cost, demo prior and SVGD.

Each particle's log-target is ``-C(theta) / alpha + delta(theta)``, with C the
mean-squared TD error against the particle's own target network and delta
the mean log-probability of demo actions under the particle's Boltzmann
policy.  Particles move along the Stein variational gradient

    g_n = 1/N sum_i [ grad log-target(theta_i) k(theta_i, theta_n)
                      + grad_{theta_i} k(theta_i, theta_n) ].

When ``create_graph`` is set the whole update stays on the autodiff graph,
so losses computed from updated particles can be differentiated with
respect to the particles before the update.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .qnet import QNetwork, StateFeatures, log_policy

BANDWIDTH_FLOOR = 1e-8


@dataclass
class Transition:
    s: StateFeatures
    action: int
    reward: float
    s_next: StateFeatures
    terminal: bool

    def __post_init__(self):
        if not 0 <= self.action < len(self.s):
            raise ValueError(f"action {self.action} outside a grid of {len(self.s)} points")


@dataclass
class Batch:
    rows: np.ndarray
    shared: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_rows: np.ndarray
    next_shared: np.ndarray
    terminal: np.ndarray

    @classmethod
    def from_transitions(cls, transitions) -> "Batch":
        transitions = list(transitions)
        if not transitions:
            raise ValueError("empty batch")
        return cls(
            rows=np.stack([t.s.rows for t in transitions]),
            shared=np.stack([t.s.shared for t in transitions]),
            actions=np.array([t.action for t in transitions], dtype=np.intp),
            rewards=np.array([t.reward for t in transitions], dtype=float),
            next_rows=np.stack([t.s_next.rows for t in transitions]),
            next_shared=np.stack([t.s_next.shared for t in transitions]),
            terminal=np.array([t.terminal for t in transitions], dtype=bool),
        )

    def __len__(self):
        return self.actions.size


class ReplayBuffer:
    """FIFO ring buffer of transitions."""

    def __init__(self, capacity: int = 1000, kind: str = "Q"):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        if kind not in ("Q", "demo"):
            raise ValueError(f"unknown buffer kind {kind!r}")
        self.capacity = capacity
        self.kind = kind
        self._items: deque = deque(maxlen=capacity)

    def __len__(self):
        return len(self._items)

    def __iter__(self):
        return iter(self._items)

    def add(self, transition: Transition):
        self._items.append(transition)

    def extend(self, transitions):
        for t in transitions:
            self.add(t)

    def sample(self, batch_size: int, rng: np.random.Generator) -> Batch:
        if len(self) < batch_size:
            raise ValueError(
                f"{self.kind} buffer holds {len(self)} transitions, fewer than the batch size {batch_size}"
            )
        idx = rng.choice(len(self), size=batch_size, replace=False)
        return Batch.from_transitions(self._items[i] for i in idx)


@dataclass
class ParticleSet:
    """N particles (autodiff nodes over flat parameter vectors) and their targets."""

    particles: list
    targets: list
    iteration: int = 0
    _meta: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if not self.particles:
            raise ValueError("a particle set needs at least one particle")
        if len(self.particles) != len(self.targets):
            raise ValueError("every particle needs exactly one target copy")
        self.particles = [ad.constant(p) for p in self.particles]
        self.targets = [np.asarray(t, dtype=float) for t in self.targets]

    @classmethod
    def initialize(cls, net: QNetwork, n: int, rng: np.random.Generator) -> "ParticleSet":
        ps = [net.init(rng) for _ in range(n)]
        return cls([ad.Node(p) for p in ps], [p.copy() for p in ps])

    def __len__(self):
        return len(self.particles)

    def values(self) -> list:
        return [p.value for p in self.particles]

    def detached(self) -> "ParticleSet":
        return ParticleSet([ad.Node(p.value.copy()) for p in self.particles], [t.copy() for t in self.targets], self.iteration)

    def as_variables(self) -> "ParticleSet":
        return ParticleSet([ad.variable(p.value) for p in self.particles], [t.copy() for t in self.targets], self.iteration)

    def with_particles(self, particles) -> "ParticleSet":
        return ParticleSet(list(particles), self.targets, self.iteration)


def sync_targets(pset: ParticleSet) -> ParticleSet:
    pset.targets = [p.value.copy() for p in pset.particles]
    return pset


def td_cost(net: QNetwork, particle, target, batch: Batch, gamma: float) -> ad.Node:
    """Mean squared TD error; the bootstrap term carries no gradient."""
    if len(batch) == 0:
        raise ValueError("empty batch")
    if not 0.0 <= gamma < 1.0:
        raise ValueError(f"discount must lie in [0, 1), got {gamma}")
    q_next = net.forward_np(np.asarray(target), batch.next_rows, batch.next_shared)
    bootstrap = np.where(batch.terminal, 0.0, q_next.max(axis=1))
    y = batch.rewards + gamma * bootstrap
    q = net.forward(particle, batch.rows, batch.shared)
    q_sa = ad.gather(q, batch.actions)
    return ad.mean(ad.square(ad.sub(y, q_sa)))


def demo_similarity(net: QNetwork, particle, demo: Batch, temperature: float = 1.0) -> ad.Node:
    """Mean log pi_theta(s, a) over demo state-action pairs."""
    if len(demo) == 0:
        raise ValueError("empty demo batch")
    q = net.forward(particle, demo.rows, demo.shared)
    return ad.mean(ad.gather(log_policy(q, temperature), demo.actions))


def median_bandwidth(X: np.ndarray) -> float:
    """med^2 / log(N + 1) over pairwise particle distances, floored."""
    n = X.shape[0]
    if n < 2:
        return 1.0
    iu = np.triu_indices(n, k=1)
    d2 = ((X[:, None, :] - X[None, :, :]) ** 2).sum(-1)[iu]
    med = np.median(np.sqrt(d2))
    return max(med * med / np.log(n + 1.0), BANDWIDTH_FLOOR)


def _bandwidth_node(D2: ad.Node, n: int):
    """Median heuristic on the graph, so exact meta-gradients see it too.

    The median picks one pair distance (two for an even pair count); the
    result is differentiable through those entries.  Falls back to the
    constant floor when the particles (nearly) coincide.
    """
    if n < 2:
        return 1.0
    iu, ju = np.triu_indices(n, k=1)
    d2 = D2.value[iu, ju]
    m = d2.size
    order = np.argsort(d2, kind="stable")
    mids = [order[(m - 1) // 2]] if m % 2 else [order[m // 2 - 1], order[m // 2]]
    if min(d2[k] for k in mids) <= 0.0:
        return BANDWIDTH_FLOOR
    dists = [ad.exp(ad.mul(ad.log(ad.index(D2, (iu[k], ju[k]))), 0.5)) for k in mids]
    med = dists[0] if len(dists) == 1 else ad.mul(ad.add(dists[0], dists[1]), 0.5)
    h = ad.mul(ad.square(med), 1.0 / np.log(n + 1.0))
    if h.item() < BANDWIDTH_FLOOR:
        return BANDWIDTH_FLOOR
    return h


def svgd_kernel(particles, h=None):
    """RBF kernel exp(-|a - b|^2 / h) over flattened particles.

    Returns ``(K, gradK)`` where ``K[i, n] = k(theta_i, theta_n)`` and
    ``gradK[i, n] = d k(theta_i, theta_n) / d theta_i``.  Without an explicit
    ``h`` the median heuristic is used and stays on the graph.
    """
    if len(particles) == 0:
        raise ValueError("svgd_kernel needs at least one particle")
    X = ad.stack([ad.constant(p) for p in particles])
    n, P = X.shape
    diff = ad.sub(ad.reshape(X, (n, 1, P)), ad.reshape(X, (1, n, P)))
    D2 = ad.sum(ad.square(diff), axis=2)
    if h is None:
        h = _bandwidth_node(D2, n)
    K = ad.exp(ad.neg(ad.div(D2, h)))
    gradK = ad.mul(diff, ad.reshape(ad.div(ad.mul(K, -2.0), h), (n, n, 1)))
    return K, gradK


def stein_direction(particles, scores, h: float | None = None) -> list:
    """Stein variational direction for every particle given per-particle scores."""
    n = len(particles)
    if n == 0:
        raise ValueError("no particles")
    K, gradK = svgd_kernel(particles, h)
    G = ad.stack([ad.constant(s) for s in scores])
    phi = ad.mul(ad.add(ad.matmul(ad.transpose(K), G), ad.sum(gradK, axis=0)), 1.0 / n)
    return [ad.index(phi, i) for i in range(n)]


def log_target(net, particle, target, q_batch, demo_batch, alpha, gamma, temperature) -> ad.Node:
    out = ad.mul(td_cost(net, particle, target, q_batch, gamma), -1.0 / alpha)
    if demo_batch is not None:
        out = ad.add(out, demo_similarity(net, particle, demo_batch, temperature))
    return out


def particle_scores(
    net: QNetwork,
    pset: ParticleSet,
    q_batch: Batch,
    demo_batch: Batch | None,
    alpha: float,
    gamma: float,
    temperature: float = 1.0,
    create_graph: bool = False,
    max_grad_norm: float | None = None,
) -> list:
    """Gradient of each particle's log-target with respect to that particle."""
    if alpha <= 0:
        raise ValueError(f"alpha must be positive, got {alpha}")
    out = []
    for theta, target in zip(pset.particles, pset.targets):
        if create_graph and theta.requires_grad:
            th = theta
        else:
            th = ad.variable(theta.value)
        with ad.enable_grad():
            lt = log_target(net, th, target, q_batch, demo_batch, alpha, gamma, temperature)
            g = ad.grad(lt, th, create_graph=create_graph and theta.requires_grad)
        if max_grad_norm is not None:
            norm = float(np.linalg.norm(g.value))
            if norm > max_grad_norm:
                g = ad.mul(g, max_grad_norm / norm)
        out.append(g)
    return out


def svgd_gradient(
    net: QNetwork,
    pset: ParticleSet,
    q_batch: Batch,
    demo_batch: Batch | None,
    alpha: float,
    kappa_drawn: bool,
    gamma: float,
    temperature: float = 1.0,
    create_graph: bool = False,
    max_grad_norm: float | None = None,
) -> list:
    """Per-particle Stein variational gradient of the KL-regularised objective.

    The demo term enters only when ``kappa_drawn``.
    """
    demo = demo_batch if kappa_drawn else None
    if kappa_drawn and demo_batch is None:
        raise ValueError("kappa_drawn requires a demo batch")
    scores = particle_scores(net, pset, q_batch, demo, alpha, gamma, temperature, create_graph, max_grad_norm)
    with ad.enable_grad() if create_graph else ad.no_grad():
        return stein_direction(pset.particles, scores)


def svgd_step(pset: ParticleSet, grads, eta: float) -> ParticleSet:
    """theta_n <- theta_n + eta * g_n, recorded on the graph when grad mode is on."""
    if eta <= 0:
        raise ValueError(f"step size must be positive, got {eta}")
    if len(grads) != len(pset):
        raise ValueError("one gradient per particle required")
    new = [ad.add(p, ad.mul(g, eta)) for p, g in zip(pset.particles, grads)]
    return pset.with_particles(new)
