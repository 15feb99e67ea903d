"""Shared builders for tests."""

import numpy as np

from fsaf.bdqn import Batch, Transition
from fsaf.qnet import StateFeatures


def random_state(rng, M=6, t=3, T=10):
    rows = np.empty((M, 4))
    rows[:, 0] = rng.normal(size=M)
    rows[:, 1] = rng.uniform(0, 1, size=M)
    y = float(rng.normal())
    rows[:, 2] = y
    rows[:, 3] = t / T
    return StateFeatures(rows, np.array([y, t / T]))


def random_transitions(rng, n, M=6, terminal_every=0):
    out = []
    for i in range(n):
        s, s2 = random_state(rng, M), random_state(rng, M)
        term = bool(terminal_every) and i % terminal_every == terminal_every - 1
        out.append(Transition(s, int(rng.integers(M)), float(rng.uniform(0, 5)), s2, term))
    return out


def random_batch(rng, n, M=6, terminal_every=0):
    return Batch.from_transitions(random_transitions(rng, n, M, terminal_every))


def constant_net_params(net, value):
    """Parameters whose Q-values are ``value`` everywhere (value-stream bias only)."""
    theta = np.zeros(net.num_params)
    theta[-1] = value
    return theta
