"""Dueling Q-networks used as a learned acquisition function.

Each candidate point x is described by (mu(x), sigma(x), y*, t/T).  The
advantage stream sees all four numbers, the value stream only the shared
pair (y*, t/T), and the Q-value of a point is

    Q = V(y*, t/T) + A(row) - mean_grid A.

Parameters are one flat float64 vector per network so that particles can be
compared and moved as plain vectors by SVGD.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .gp import GpPosterior

CHECKPOINT_VERSION = 1

PRESETS = {"desk": (32, 32), "paper": (200, 200, 200, 200)}


@dataclass
class StateFeatures:
    rows: np.ndarray  # (M, 4): mu, sigma, y*, t/T
    shared: np.ndarray  # (2,): y*, t/T

    def __len__(self):
        return self.rows.shape[0]


def featurize(post: GpPosterior, y_best: float, t: int, T: int) -> StateFeatures:
    if T < 1 or not 1 <= t <= T:
        raise ValueError(f"step t={t} outside 1..T={T}")
    mu = np.asarray(post.mean, dtype=float)
    sd = np.maximum(np.asarray(post.std, dtype=float), 0.0)
    frac = t / T
    rows = np.empty((mu.size, 4))
    rows[:, 0] = mu
    rows[:, 1] = sd
    rows[:, 2] = y_best
    rows[:, 3] = frac
    return StateFeatures(rows, np.array([y_best, frac], dtype=float))


def stack_features(feats) -> tuple[np.ndarray, np.ndarray]:
    feats = list(feats)
    return np.stack([f.rows for f in feats]), np.stack([f.shared for f in feats])


@dataclass(frozen=True)
class QNetwork:
    """Architecture of one dueling Q-network particle."""

    hidden: tuple = (32, 32)
    value_hidden: tuple | None = None

    @classmethod
    def preset(cls, name: str) -> "QNetwork":
        """A named preset, or hidden widths spelled like ``"16x16"``."""
        if name in PRESETS:
            return cls(PRESETS[name])
        try:
            return cls(tuple(int(w) for w in name.split("x")))
        except ValueError:
            raise ValueError(f"unknown architecture {name!r}; use {sorted(PRESETS)} or widths like '16x16'") from None

    def _layers(self, sizes):
        return list(zip(sizes[:-1], sizes[1:]))

    @property
    def advantage_layers(self):
        return self._layers((4, *self.hidden, 1))

    @property
    def value_layers(self):
        vh = self.hidden if self.value_hidden is None else self.value_hidden
        return self._layers((2, *vh, 1))

    @property
    def layer_shapes(self) -> list:
        return [("advantage", i, o) for i, o in self.advantage_layers] + [
            ("value", i, o) for i, o in self.value_layers
        ]

    @property
    def num_params(self) -> int:
        return sum(i * o + o for _, i, o in self.layer_shapes)

    def init(self, rng: np.random.Generator) -> np.ndarray:
        """Uniform fan-in initialisation: U(-1/sqrt(fan_in), 1/sqrt(fan_in))."""
        chunks = []
        for _, i, o in self.layer_shapes:
            bound = 1.0 / np.sqrt(i)
            chunks.append(rng.uniform(-bound, bound, size=i * o))
            chunks.append(rng.uniform(-bound, bound, size=o))
        return np.concatenate(chunks)

    def _slices(self):
        off = 0
        adv, val = [], []
        for stream, i, o in self.layer_shapes:
            w = (off, off + i * o, (i, o))
            off += i * o
            b = (off, off + o)
            off += o
            (adv if stream == "advantage" else val).append((w, b))
        return adv, val

    def _check(self, theta):
        n = np.shape(theta.value if isinstance(theta, ad.Node) else theta)
        if n != (self.num_params,):
            raise ValueError(f"parameter vector has shape {n}, expected ({self.num_params},)")

    # -- differentiable path ------------------------------------------------

    def _mlp(self, theta, x, layers):
        h = ad.constant(x)
        for k, ((w0, w1, wshape), (b0, b1)) in enumerate(layers):
            W = ad.reshape(ad.index(theta, slice(w0, w1)), wshape)
            b = ad.index(theta, slice(b0, b1))
            h = ad.add(ad.matmul(h, W), b)
            if k < len(layers) - 1:
                h = ad.relu(h)
        return h

    def forward(self, theta, rows, shared) -> ad.Node:
        """Q-values for a batch: rows (B, M, 4), shared (B, 2) -> (B, M)."""
        theta = ad.constant(theta)
        self._check(theta)
        rows = np.asarray(rows, dtype=float)
        shared = np.asarray(shared, dtype=float)
        if rows.ndim != 3 or rows.shape[2] != 4:
            raise ValueError(f"feature rows must have shape (B, M, 4), got {rows.shape}")
        B, M, _ = rows.shape
        adv_layers, val_layers = self._slices()
        A = ad.reshape(self._mlp(theta, rows.reshape(B * M, 4), adv_layers), (B, M))
        V = self._mlp(theta, shared.reshape(B, 2), val_layers)
        centred = ad.sub(A, ad.mean(A, axis=1, keepdims=True))
        return ad.add(centred, V)

    # -- plain numpy path (rollouts, targets) -------------------------------

    def _mlp_np(self, theta, x, layers):
        h = x
        for k, ((w0, w1, wshape), (b0, b1)) in enumerate(layers):
            h = h @ theta[w0:w1].reshape(wshape) + theta[b0:b1]
            if k < len(layers) - 1:
                h = np.maximum(h, 0.0)
        return h

    def advantage_np(self, theta, rows) -> np.ndarray:
        rows = np.asarray(rows, dtype=float)
        lead = rows.shape[:-1]
        return self._mlp_np(theta, rows.reshape(-1, 4), self._slices()[0]).reshape(lead)

    def value_np(self, theta, shared) -> np.ndarray:
        shared = np.asarray(shared, dtype=float)
        lead = shared.shape[:-1]
        return self._mlp_np(theta, shared.reshape(-1, 2), self._slices()[1]).reshape(lead)

    def forward_np(self, theta, rows, shared) -> np.ndarray:
        theta = np.asarray(theta, dtype=float)
        self._check(theta)
        A = self.advantage_np(theta, rows)
        V = self.value_np(theta, shared)
        return A - A.mean(axis=-1, keepdims=True) + V[..., None]


def q_values(net: QNetwork, theta, feats: StateFeatures) -> np.ndarray:
    """Per-point Q-values of one particle for one state."""
    theta = theta.value if isinstance(theta, ad.Node) else theta
    return net.forward_np(theta, feats.rows[None], feats.shared[None])[0]


def log_policy(q, temperature: float = 1.0):
    """log softmax(q / temperature) along the last axis (Node or array)."""
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    if isinstance(q, ad.Node):
        z = ad.mul(q, 1.0 / temperature)
        return ad.sub(z, ad.logsumexp(z, axis=-1, keepdims=True))
    z = np.asarray(q, dtype=float) / temperature
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def policy(q, temperature: float = 1.0) -> np.ndarray:
    """Boltzmann distribution over the grid."""
    return np.exp(log_policy(np.asarray(q, dtype=float), temperature))


def select_action(q, mode: str = "greedy", rng: np.random.Generator | None = None, temperature: float = 1.0) -> int:
    q = np.asarray(q, dtype=float)
    if q.size == 0:
        raise ValueError("cannot select an action on an empty grid")
    if mode == "greedy":
        return int(np.argmax(q))
    if mode == "boltzmann":
        return int(rng.choice(q.size, p=policy(q, temperature)))
    raise ValueError(f"unknown action-selection mode {mode!r}")


def ensemble_scores(net: QNetwork, particles, feats: StateFeatures, mode: str = "mean", rng=None) -> np.ndarray:
    """Acquisition scores of the particle ensemble.

    ``mean`` averages Q over particles; ``sample`` uses one particle drawn
    uniformly at random.
    """
    thetas = [p.value if isinstance(p, ad.Node) else p for p in particles]
    if not thetas:
        raise ValueError("empty particle set")
    if mode == "sample":
        return q_values(net, thetas[int(rng.integers(len(thetas)))], feats)
    if mode != "mean":
        raise ValueError(f"unknown ensemble mode {mode!r}")
    return np.mean([q_values(net, th, feats) for th in thetas], axis=0)


def pointwise_scores(net: QNetwork, particles, feats: StateFeatures) -> np.ndarray:
    """Ensemble mean of V + A without the grid centring.

    Differs from :func:`ensemble_scores` by a constant per state, so the
    argmax agrees, but scores of separately evaluated candidate sets stay
    comparable (needed by hierarchical gridding).
    """
    out = 0.0
    for p in particles:
        th = p.value if isinstance(p, ad.Node) else p
        out = out + net.advantage_np(th, feats.rows) + net.value_np(th, feats.shared[None])[0]
    return out / len(particles)


# -- checkpoints ------------------------------------------------------------


def config_hash(config: dict) -> str:
    blob = json.dumps(config, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def save_checkpoint(path, net: QNetwork, particles, targets, iteration: int, cfg_hash: str = "", rng_state=None, extra=None):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    meta = {
        "version": CHECKPOINT_VERSION,
        "config_hash": cfg_hash,
        "hidden": list(net.hidden),
        "value_hidden": None if net.value_hidden is None else list(net.value_hidden),
        "layer_shapes": [list(s) for s in net.layer_shapes],
        "iteration": int(iteration),
        "rng_state": rng_state,
        "extra": extra or {},
    }
    P = np.stack([p.value if isinstance(p, ad.Node) else np.asarray(p) for p in particles])
    Tg = np.stack([np.asarray(t) for t in targets])
    with open(path, "wb") as fh:
        np.savez(fh, meta=np.array(json.dumps(meta)), particles=P, targets=Tg)
    return path


def load_checkpoint(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    with np.load(path, allow_pickle=False) as z:
        meta = json.loads(str(z["meta"]))
        particles = [row.copy() for row in z["particles"]]
        targets = [row.copy() for row in z["targets"]]
    if meta.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {meta.get('version')}")
    vh = meta["value_hidden"]
    net = QNetwork(tuple(meta["hidden"]), None if vh is None else tuple(vh))
    return {"net": net, "particles": particles, "targets": targets, **meta}
