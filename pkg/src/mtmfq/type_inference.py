"""Inferring agent types from behaviour when they are not known up front.

Every agent's recent actions go into a ring buffer; the normalised action
histograms are clustered with k-means and the new labels are permuted to
agree as much as possible with the previous clustering.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

MAX_ITER = 100


class ActionHistoryBuffer:
    """Last ``capacity`` action ids of each agent."""

    def __init__(self, num_agents: int, capacity: int, action_count: int) -> None:
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self.action_count = action_count
        self._ring = np.zeros((num_agents, capacity), dtype=np.int64)
        self._len = np.zeros(num_agents, dtype=np.int64)
        self._head = np.zeros(num_agents, dtype=np.int64)

    @property
    def num_agents(self) -> int:
        return len(self._len)

    def record(self, agent_id: int, action: int) -> "ActionHistoryBuffer":
        self.record_many(np.array([agent_id]), np.array([action]))
        return self

    def record_many(self, agent_ids: np.ndarray, actions: np.ndarray) -> None:
        agent_ids = np.asarray(agent_ids, dtype=np.int64)
        actions = np.asarray(actions, dtype=np.int64)
        if actions.size and (actions.min() < 0 or actions.max() >= self.action_count):
            raise ValueError("invalid action id")
        if agent_ids.size and (agent_ids.min() < 0 or agent_ids.max() >= self.num_agents):
            raise KeyError("unknown agent id")
        self._ring[agent_ids, self._head[agent_ids]] = actions
        self._head[agent_ids] = (self._head[agent_ids] + 1) % self.capacity
        self._len[agent_ids] = np.minimum(self._len[agent_ids] + 1, self.capacity)

    def history(self, agent_id: int) -> list[int]:
        """Buffered actions, oldest first."""
        k = int(self._len[agent_id])
        start = (int(self._head[agent_id]) - k) % self.capacity
        return [int(self._ring[agent_id, (start + i) % self.capacity]) for i in range(k)]

    def counts(self, agent_ids: Optional[Sequence[int]] = None) -> np.ndarray:
        """Raw action counts; all zero for agents with nothing recorded."""
        ids = np.arange(self.num_agents) if agent_ids is None else np.asarray(agent_ids)
        valid = np.arange(self.capacity)[None, :] < self._len[ids, None]
        out = np.zeros((len(ids), self.action_count))
        rows = np.repeat(np.arange(len(ids)), self.capacity)
        np.add.at(out, (rows, self._ring[ids].ravel()), valid.ravel().astype(float))
        return out

    def frequencies(self, agent_ids: Optional[Sequence[int]] = None) -> np.ndarray:
        c = self.counts(agent_ids)
        total = c.sum(axis=1, keepdims=True)
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(total > 0, c / total, 1.0 / self.action_count)


def record_action(buffer: ActionHistoryBuffer, agent_id: int, action: int) -> ActionHistoryBuffer:
    return buffer.record(agent_id, action)


def action_frequency(buffer: ActionHistoryBuffer, agent_id: int) -> np.ndarray:
    """Normalised histogram of the agent's buffered actions (uniform when empty)."""
    return buffer.frequencies([agent_id])[0]


@dataclass
class TypeAssignment:
    agent_ids: np.ndarray
    labels: np.ndarray
    centroids: np.ndarray
    inertia: float = 0.0

    @property
    def num_types(self) -> int:
        return len(self.centroids)

    def as_dict(self) -> dict[int, int]:
        return dict(zip(self.agent_ids.tolist(), self.labels.tolist()))

    def restrict(self, agent_ids: Sequence[int]) -> "TypeAssignment":
        keep = np.isin(self.agent_ids, agent_ids)
        return TypeAssignment(self.agent_ids[keep], self.labels[keep], self.centroids, self.inertia)


def _sq_dist(x: np.ndarray, c: np.ndarray) -> np.ndarray:
    return ((x[:, None, :] - c[None, :, :]) ** 2).sum(axis=2)


def _farthest_point_init(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    idx = [int(rng.integers(len(x)))]
    d = ((x - x[idx[0]]) ** 2).sum(axis=1)
    for _ in range(1, k):
        nxt = int(np.argmax(d))  # ties resolve to the lowest index
        idx.append(nxt)
        d = np.minimum(d, ((x - x[nxt]) ** 2).sum(axis=1))
    return x[idx].copy()


def lloyd(x: np.ndarray, centroids: np.ndarray, max_iter: int = MAX_ITER):
    """Plain Lloyd iterations. Returns (labels, centroids, inertia history)."""
    labels = None
    history = []
    for _ in range(max_iter):
        d = _sq_dist(x, centroids)
        new = np.argmin(d, axis=1)
        history.append(float(d[np.arange(len(x)), new].sum()))
        if labels is not None and np.array_equal(new, labels):
            break
        labels = new
        for m in range(len(centroids)):
            members = x[labels == m]
            if len(members):
                centroids[m] = members.mean(axis=0)
    d = _sq_dist(x, centroids)
    inertia = float(d[np.arange(len(x)), labels].sum())
    history.append(inertia)
    return labels, centroids, history


def kmeans(vectors: np.ndarray, num_types: int, seed: int = 0, restarts: int = 3,
           agent_ids: Optional[Sequence[int]] = None) -> TypeAssignment:
    """Best of ``restarts`` seeded farthest-point Lloyd runs by within-cluster sum of squares."""
    x = np.asarray(vectors, dtype=float)
    if x.ndim != 2 or len(x) == 0:
        raise ValueError("need a nonempty 2-D array of vectors")
    if num_types < 1:
        raise ValueError("need at least one type")
    ids = np.arange(len(x)) if agent_ids is None else np.asarray(agent_ids, dtype=np.int64)
    rng = np.random.default_rng(seed)
    best = None
    for _ in range(max(1, restarts)):
        labels, cents, hist = lloyd(x, _farthest_point_init(x, num_types, rng))
        if best is None or hist[-1] < best.inertia - 1e-12:
            best = TypeAssignment(ids, labels, cents, hist[-1])
    return best


def relabel(new: TypeAssignment, previous: Optional[TypeAssignment]) -> TypeAssignment:
    """Permute ``new``'s labels to maximise agreement with ``previous`` (greedy on overlaps)."""
    if previous is None or len(previous.agent_ids) == 0:
        return new
    if set(new.agent_ids.tolist()) != set(previous.agent_ids.tolist()):
        raise ValueError("relabel needs assignments over the same agents")
    k = new.num_types
    prev_of = dict(zip(previous.agent_ids.tolist(), previous.labels.tolist()))
    prev_labels = np.array([prev_of[a] for a in new.agent_ids.tolist()])
    kp = max(k, previous.num_types)
    table = np.zeros((k, kp), dtype=np.int64)
    np.add.at(table, (new.labels, prev_labels), 1)
    mapping = {}
    used = set()
    for flat in np.argsort(-table, axis=None, kind="stable"):
        i, j = divmod(int(flat), kp)
        if i in mapping or j in used or j >= k:
            continue
        mapping[i] = j
        used.add(j)
    free = iter(j for j in range(k) if j not in used)
    for i in range(k):
        if i not in mapping:
            mapping[i] = next(free)
    perm = np.array([mapping[i] for i in range(k)])
    centroids = np.empty_like(new.centroids)
    centroids[perm] = new.centroids
    return TypeAssignment(new.agent_ids.copy(), perm[new.labels], centroids, new.inertia)


def purity(labels: Sequence[int], truth: Sequence[int]) -> float:
    """Fraction of agents in their cluster's majority true class."""
    labels = np.asarray(labels)
    truth = np.asarray(truth)
    if labels.size == 0:
        return float("nan")
    total = 0
    for m in np.unique(labels):
        total += np.bincount(truth[labels == m]).max()
    return total / labels.size
