"""Mean-field Q-learning over linear features.

One :class:`QModel` covers three learners that differ only in what the
Q-function sees besides the agent's own observation:

* ``mtmfq``: one mean action per type, ``Q(s, a, mean_1, ..., mean_M)``
* ``mfq``: a single mean action over all neighbours (``M = 1``)
* ``il``: no mean action at all (``M = 0``)

Mean actions are passed around as ``(M, U)`` arrays whose rows lie on the
probability simplex over a ``U``-action vocabulary.
"""

from __future__ import annotations

import itertools
import struct
from dataclasses import dataclass, field
from math import comb
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

MTMFQ, MFQ, IL = "mtmfq", "mfq", "il"
ALGORITHMS = (MTMFQ, MFQ, IL)

SIMPLEX_TOL = 1e-9


def mean_actions(neighbor_actions_by_type: Sequence[Sequence[int]], action_count: int) -> np.ndarray:
    """Empirical one-hot action distribution per type; an empty type gets the uniform vector."""
    out = np.empty((len(neighbor_actions_by_type), action_count))
    for m, acts in enumerate(neighbor_actions_by_type):
        acts = np.asarray(acts, dtype=np.int64)
        if acts.size == 0:
            out[m] = 1.0 / action_count
        else:
            if acts.min() < 0 or acts.max() >= action_count:
                raise ValueError("action id out of range")
            out[m] = np.bincount(acts, minlength=action_count) / acts.size
    return out


def batched_mean_actions(neighbors: np.ndarray, labels: np.ndarray, num_types: int,
                         actions: np.ndarray, action_count: int) -> np.ndarray:
    """Per-agent, per-type mean actions from a neighbour matrix.

    ``neighbors`` is ``(n, n)`` bool, ``labels`` the type of every agent, ``actions``
    every agent's last action in vocabulary coordinates. Returns ``(n, M, U)``.
    """
    n = len(actions)
    onehot = np.zeros((n, action_count))
    onehot[np.arange(n), actions] = 1.0
    nb = neighbors.astype(float)
    out = np.empty((n, num_types, action_count))
    for m in range(num_types):
        counts = nb @ (onehot * (labels == m)[:, None])
        total = counts.sum(axis=1, keepdims=True)
        with np.errstate(invalid="ignore", divide="ignore"):
            out[:, m, :] = np.where(total > 0, counts / total, 1.0 / action_count)
    return out


def on_simplex(p: np.ndarray, tol: float = SIMPLEX_TOL) -> bool:
    p = np.asarray(p)
    return bool(np.all(p >= -tol) and np.all(np.abs(p.sum(axis=-1) - 1.0) <= tol))


def boltzmann_policy(q: np.ndarray, beta: float) -> np.ndarray:
    """Softmax of ``beta * q`` along the last axis (max-subtracted)."""
    z = beta * np.asarray(q, dtype=float)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def td_target(reward, gamma: float, value_next, done):
    reward = np.asarray(reward, dtype=float)
    keep = 1.0 - np.asarray(done, dtype=float)
    out = reward + gamma * keep * np.asarray(value_next, dtype=float)
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class LinearFeatures:
    """Per-action linear heads over ``[obs, mean_1, ..., mean_M]``.

    The full feature vector for action ``a`` is the input placed in block ``a``
    of an ``action_count * block`` vector (input outer-product one-hot action).
    """

    obs_dim: int
    action_count: int
    num_types: int
    mean_dim: int

    kind = "linear"

    @property
    def block(self) -> int:
        return self.obs_dim + self.num_types * self.mean_dim

    @property
    def dim(self) -> int:
        return self.action_count * self.block

    def inputs(self, obs: np.ndarray, means: np.ndarray) -> np.ndarray:
        """Stack obs and flattened means; works for single rows and batches."""
        obs = np.asarray(obs, dtype=float)
        means = np.asarray(means, dtype=float)
        lead = obs.shape[:-1]
        if obs.shape[-1] != self.obs_dim:
            raise ValueError(f"obs has dim {obs.shape[-1]}, expected {self.obs_dim}")
        if means.shape[len(lead):] != (self.num_types, self.mean_dim):
            raise ValueError(f"mean actions have shape {means.shape[len(lead):]}, "
                             f"expected {(self.num_types, self.mean_dim)}")
        return np.concatenate([obs, means.reshape(lead + (self.num_types * self.mean_dim,))], axis=-1)

    def featurize(self, obs, action: int, means) -> np.ndarray:
        if not 0 <= action < self.action_count:
            raise ValueError(f"action {action} out of range")
        phi = np.zeros(self.dim)
        phi[action * self.block:(action + 1) * self.block] = self.inputs(obs, means)
        return phi

    def q_all(self, weights: np.ndarray, obs, means) -> np.ndarray:
        x = self.inputs(obs, means)
        return x @ weights.reshape(self.action_count, self.block).T

    def q_taken(self, weights, obs, actions, means) -> np.ndarray:
        x = self.inputs(obs, means)
        w = weights.reshape(self.action_count, self.block)
        return np.einsum("kb,kb->k", x, w[actions])

    def accumulate(self, out: np.ndarray, obs, actions, means, coef) -> None:
        """``out += sum_k coef_k * featurize(obs_k, actions_k, means_k)``."""
        x = self.inputs(obs, means)
        view = out.reshape(self.action_count, self.block)
        np.add.at(view, actions, np.asarray(coef)[:, None] * x)


@dataclass(frozen=True)
class TabularFeatures:
    """Exact one-hot features over (discrete obs, action, rounded mean actions).

    Observations are integer vectors with ``obs_levels[i]`` values per entry.
    Each mean-action row is rounded to counts out of ``resolution`` (largest
    remainder), so ``resolution = 1`` snaps to simplex vertices and
    ``resolution = n`` represents n neighbours exactly.
    """

    obs_levels: tuple[int, ...]
    action_count: int
    num_types: int
    mean_dim: int
    resolution: int
    _index: dict = field(default=None, init=False, repr=False, compare=False)

    kind = "tabular"

    def __post_init__(self) -> None:
        object.__setattr__(self, "obs_levels", tuple(int(v) for v in self.obs_levels))
        comps = _compositions(self.resolution, self.mean_dim)
        object.__setattr__(self, "_index", {c: i for i, c in enumerate(comps)})

    @property
    def n_obs(self) -> int:
        return int(np.prod(self.obs_levels, dtype=np.int64)) if self.obs_levels else 1

    @property
    def n_mean_keys(self) -> int:
        return comb(self.resolution + self.mean_dim - 1, self.mean_dim - 1) ** self.num_types

    @property
    def dim(self) -> int:
        return self.n_obs * self.action_count * self.n_mean_keys

    def round_means(self, means: np.ndarray) -> tuple[tuple[int, ...], ...]:
        means = np.asarray(means, dtype=float).reshape(self.num_types, self.mean_dim)
        keys = []
        for row in means:
            scaled = row * self.resolution
            base = np.floor(scaled + 1e-9).astype(np.int64)
            short = self.resolution - int(base.sum())
            if short > 0:
                order = np.argsort(-(scaled - base), kind="stable")
                base[order[:short]] += 1
            keys.append(tuple(int(v) for v in base))
        return tuple(keys)

    def _cell(self, obs, means) -> int:
        obs = np.asarray(obs, dtype=np.int64).ravel()
        if len(obs) != len(self.obs_levels):
            raise ValueError(f"obs has dim {len(obs)}, expected {len(self.obs_levels)}")
        o = 0
        for v, levels in zip(obs, self.obs_levels):
            if not 0 <= v < levels:
                raise ValueError("discrete obs out of range")
            o = o * levels + int(v)
        c = 0
        per = comb(self.resolution + self.mean_dim - 1, self.mean_dim - 1)
        for key in self.round_means(means):
            c = c * per + self._index[key]
        return o * self.n_mean_keys + c

    def index(self, obs, action: int, means) -> int:
        if not 0 <= action < self.action_count:
            raise ValueError(f"action {action} out of range")
        cell = self._cell(obs, means)
        o, c = divmod(cell, self.n_mean_keys)
        return (o * self.action_count + action) * self.n_mean_keys + c

    def featurize(self, obs, action: int, means) -> np.ndarray:
        phi = np.zeros(self.dim)
        phi[self.index(obs, action, means)] = 1.0
        return phi

    def q_all(self, weights, obs, means) -> np.ndarray:
        obs = np.asarray(obs)
        means = np.asarray(means)
        if obs.ndim == 2:
            if means.ndim == 2:
                means = np.broadcast_to(means, (len(obs),) + means.shape)
            return np.stack([self.q_all(weights, o, m) for o, m in zip(obs, means)])
        return np.array([weights[self.index(obs, a, means)] for a in range(self.action_count)])

    def q_taken(self, weights, obs, actions, means) -> np.ndarray:
        return np.array([weights[self.index(o, int(a), m)]
                         for o, a, m in zip(obs, actions, means)])

    def accumulate(self, out, obs, actions, means, coef) -> None:
        for o, a, m, c in zip(obs, actions, means, coef):
            out[self.index(o, int(a), m)] += c


def _compositions(total: int, parts: int) -> list[tuple[int, ...]]:
    out = []
    for bars in itertools.combinations(range(total + parts - 1), parts - 1):
        prev, comp = -1, []
        for b in bars + (total + parts - 1,):
            comp.append(b - prev - 1)
            prev = b
        out.append(tuple(comp))
    return out


@dataclass
class QModel:
    algorithm: str
    features: LinearFeatures | TabularFeatures
    weights: np.ndarray
    target_weights: np.ndarray

    def __post_init__(self) -> None:
        if self.algorithm not in ALGORITHMS:
            raise ValueError(f"unknown algorithm {self.algorithm!r}")
        m = self.features.num_types
        if self.algorithm == MFQ and m != 1:
            raise ValueError("MFQ models use exactly one mean action")
        if self.algorithm == IL and m != 0:
            raise ValueError("IL models take no mean action")
        if self.algorithm == MTMFQ and m < 1:
            raise ValueError("MTMFQ needs at least one type")
        if self.weights.shape != (self.features.dim,) or self.target_weights.shape != self.weights.shape:
            raise ValueError("weight vectors must match the feature dimension")

    @classmethod
    def create(cls, algorithm: str, obs_dim: int, action_count: int, mean_dim: int,
               num_types: int = 1) -> "QModel":
        m = {MFQ: 1, IL: 0}.get(algorithm, num_types)
        feats = LinearFeatures(obs_dim, action_count, m, mean_dim)
        return cls(algorithm, feats, np.zeros(feats.dim), np.zeros(feats.dim))

    @classmethod
    def tabular(cls, algorithm: str, obs_levels: Sequence[int], action_count: int,
                mean_dim: int, num_types: int = 1, resolution: int = 1) -> "QModel":
        m = {MFQ: 1, IL: 0}.get(algorithm, num_types)
        feats = TabularFeatures(tuple(obs_levels), action_count, m, mean_dim, resolution)
        return cls(algorithm, feats, np.zeros(feats.dim), np.zeros(feats.dim))

    @property
    def num_types(self) -> int:
        return self.features.num_types

    @property
    def action_count(self) -> int:
        return self.features.action_count

    def copy(self) -> "QModel":
        return QModel(self.algorithm, self.features, self.weights.copy(), self.target_weights.copy())


def featurize(model: QModel, obs, action: int, means) -> np.ndarray:
    return model.features.featurize(obs, action, _means(model, means))


def _means(model: QModel, means) -> np.ndarray:
    if means is None:
        means = np.zeros((0, model.features.mean_dim))
    means = np.asarray(means, dtype=float)
    if model.algorithm == IL:
        # IL ignores whatever mean actions the caller supplies
        return np.zeros(means.shape[:-2] + (0, model.features.mean_dim))
    return means


def q_values(model: QModel, obs, means, target: bool = False) -> np.ndarray:
    w = model.target_weights if target else model.weights
    return model.features.q_all(w, obs, _means(model, means))


def value_estimate(model: QModel, next_obs, next_means, beta: float) -> np.ndarray:
    """Boltzmann-weighted value of the next state under the target weights."""
    q = q_values(model, next_obs, next_means, target=True)
    return (boltzmann_policy(q, beta) * q).sum(axis=-1)


def select_action(model: QModel, obs, means, beta: float, rng: np.random.Generator):
    """Sample from the Boltzmann policy; batched rows draw one uniform each, in order."""
    p = boltzmann_policy(q_values(model, obs, means), beta)
    return sample_rows(p, rng)


def sample_rows(p: np.ndarray, rng: np.random.Generator):
    single = p.ndim == 1
    p = np.atleast_2d(p)
    u = rng.random(len(p))
    cdf = np.cumsum(p, axis=1)
    idx = (cdf < (u * cdf[:, -1])[:, None]).sum(axis=1)
    idx = np.minimum(idx, p.shape[1] - 1)
    return int(idx[0]) if single else idx


@dataclass
class Batch:
    obs: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_obs: np.ndarray
    means: np.ndarray
    next_means: np.ndarray
    done: np.ndarray

    def __len__(self) -> int:
        return len(self.actions)


def td_loss(model: QModel, batch: Batch, gamma: float, beta: float,
            weights: Optional[np.ndarray] = None):
    """Mean squared TD error; targets come from the target weights. Returns (loss, errors, targets)."""
    f = model.features
    w = model.weights if weights is None else weights
    v = value_estimate(model, batch.next_obs, batch.next_means, beta)
    y = td_target(batch.rewards, gamma, v, batch.done)
    q = f.q_taken(w, batch.obs, batch.actions, _means(model, batch.means))
    err = np.atleast_1d(y - q)
    return float(np.mean(err ** 2)), err, np.atleast_1d(y)


def td_gradient(model: QModel, batch: Batch, gamma: float, beta: float,
                weights: Optional[np.ndarray] = None) -> np.ndarray:
    """Gradient of :func:`td_loss` w.r.t. the online weights (targets held fixed)."""
    _, err, _ = td_loss(model, batch, gamma, beta, weights)
    grad = np.zeros_like(model.weights)
    model.features.accumulate(grad, batch.obs, batch.actions, _means(model, batch.means),
                              -2.0 * err / len(err))
    return grad


def q_update(model: QModel, batch: Batch, alpha: float, beta: float, gamma: float = 0.95) -> float:
    """One gradient step of size ``alpha / 2`` on the mean squared TD error.

    The half step makes a single one-hot entry reproduce ``Q <- (1 - alpha) Q + alpha y``.
    Returns the loss before the step.
    """
    if len(batch) == 0:
        raise ValueError("empty minibatch")
    loss, err, _ = td_loss(model, batch, gamma, beta)
    if alpha:
        model.features.accumulate(model.weights, batch.obs, batch.actions,
                                  _means(model, batch.means), alpha * err / len(err))
    return loss


def soft_update(model: QModel, tau: float) -> np.ndarray:
    if not 0.0 <= tau <= 1.0:
        raise ValueError("tau must lie in [0, 1]")
    model.target_weights = tau * model.weights + (1.0 - tau) * model.target_weights
    return model.target_weights


@dataclass(frozen=True)
class Hyperparams:
    alpha: float = 0.1
    gamma: float = 0.95
    tau: float = 0.01
    beta0: float = 0.3
    beta_growth: float = 1.003
    replay_capacity: int = 50_000
    batch_size: int = 64
    radius: int = 6
    num_types: int = 2
    history: int = 20
    cluster_stride: int = 5
    cluster_restarts: int = 3
    faceoff_beta: float = 100.0
    updates_per_episode: int = 1

    def __post_init__(self) -> None:
        # alpha = 0 is allowed as a frozen-learning control
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")
        if self.updates_per_episode < 1 or self.batch_size < 1:
            raise ValueError("need at least one update of at least one sample")
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError("gamma must lie in [0, 1)")
        if not 0.0 < self.tau <= 1.0:
            raise ValueError("tau must lie in (0, 1]")
        if self.beta0 < 0 or self.beta_growth < 1.0:
            raise ValueError("beta must start >= 0 and never decrease")

    def beta(self, episode: int) -> float:
        return self.beta0 * self.beta_growth ** episode


class ReplayBuffer:
    """Fixed-capacity ring of transitions for one group."""

    def __init__(self, capacity: int, obs_dim: int, num_types: int, mean_dim: int) -> None:
        self.capacity = int(capacity)
        self.obs = np.zeros((capacity, obs_dim))
        self.next_obs = np.zeros((capacity, obs_dim))
        self.actions = np.zeros(capacity, dtype=np.int64)
        self.rewards = np.zeros(capacity)
        self.means = np.zeros((capacity, num_types, mean_dim))
        self.next_means = np.zeros((capacity, num_types, mean_dim))
        self.done = np.zeros(capacity, dtype=bool)
        self._next = 0
        self.size = 0

    def __len__(self) -> int:
        return self.size

    def add(self, obs, actions, rewards, next_obs, means, next_means, done) -> None:
        """Append a batch of rows, overwriting the oldest when full."""
        k = len(actions)
        if k == 0:
            return
        if k > self.capacity:
            sl = slice(k - self.capacity, k)
            obs, actions, rewards, next_obs = obs[sl], actions[sl], rewards[sl], next_obs[sl]
            means, next_means, done = means[sl], next_means[sl], done[sl]
            k = self.capacity
        idx = (self._next + np.arange(k)) % self.capacity
        self.obs[idx] = obs
        self.actions[idx] = actions
        self.rewards[idx] = rewards
        self.next_obs[idx] = next_obs
        self.means[idx] = means
        self.next_means[idx] = next_means
        self.done[idx] = done
        self._next = int((self._next + k) % self.capacity)
        self.size = min(self.capacity, self.size + k)

    def sample(self, k: int, rng: np.random.Generator) -> Batch:
        if self.size == 0:
            raise ValueError("cannot sample from an empty replay buffer")
        idx = rng.choice(self.size, size=min(k, self.size), replace=False)
        return Batch(self.obs[idx], self.actions[idx], self.rewards[idx], self.next_obs[idx],
                     self.means[idx], self.next_means[idx], self.done[idx])


# -- persistence -----------------------------------------------------------

MAGIC = b"MTMQ"
FORMAT_VERSION = 1
_ALGO_CODE = {MTMFQ: 0, MFQ: 1, IL: 2}
_KIND_CODE = {"linear": 0, "tabular": 1}


class ModelFormatError(ValueError):
    pass


def save_model(model: QModel, path: str | Path) -> None:
    """Header then little-endian float64 weights and target weights."""
    f = model.features
    levels = f.obs_levels if f.kind == "tabular" else ()
    header = struct.pack("<4sIIIIIIIIQ", MAGIC, FORMAT_VERSION, _ALGO_CODE[model.algorithm],
                         _KIND_CODE[f.kind], f.num_types, f.action_count, f.mean_dim,
                         getattr(f, "obs_dim", 0), getattr(f, "resolution", 0), f.dim)
    extra = struct.pack(f"<I{len(levels)}I", len(levels), *levels)
    with open(path, "wb") as fh:
        fh.write(header + extra)
        fh.write(model.weights.astype("<f8").tobytes())
        fh.write(model.target_weights.astype("<f8").tobytes())


def load_model(path: str | Path) -> QModel:
    data = Path(path).read_bytes()
    head = struct.calcsize("<4sIIIIIIIIQ")
    if len(data) < head + 4:
        raise ModelFormatError(f"{path}: truncated model file")
    magic, version, algo, kind, m, a, u, obs_dim, res, dim = struct.unpack_from("<4sIIIIIIIIQ", data)
    if magic != MAGIC:
        raise ModelFormatError(f"{path}: not a model file")
    if version != FORMAT_VERSION:
        raise ModelFormatError(f"{path}: unsupported format version {version}")
    (nlev,) = struct.unpack_from("<I", data, head)
    levels = struct.unpack_from(f"<{nlev}I", data, head + 4)
    off = head + 4 + 4 * nlev
    if len(data) != off + 16 * dim:
        raise ModelFormatError(f"{path}: weight payload has wrong length")
    algorithm = {v: k for k, v in _ALGO_CODE.items()}[algo]
    if kind == _KIND_CODE["linear"]:
        feats = LinearFeatures(obs_dim, a, m, u)
    else:
        feats = TabularFeatures(tuple(levels), a, m, u, res)
    if feats.dim != dim:
        raise ModelFormatError(f"{path}: header dimensions are inconsistent")
    w = np.frombuffer(data, dtype="<f8", count=dim, offset=off).astype(float)
    wt = np.frombuffer(data, dtype="<f8", count=dim, offset=off + 8 * dim).astype(float)
    return QModel(algorithm, feats, w, wt)
