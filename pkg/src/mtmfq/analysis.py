"""Numerical checks of the mean-field approximation bounds and the spin game.

Average-deviation bounds (single vs. multiple types), the smoothness bound on
a decomposable quadratic Q-function, and an exact scalar trace of the
two-action spin game under single-type and multi-type mean-field updates.
Everything here is a pure function of its inputs.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

BOUND_TOL = 1e-12
SMOOTH_TOL = 1e-9


@dataclass
class DeviationReport:
    n: int
    counts: np.ndarray  # K_i per type
    deviations_single: np.ndarray  # ||a_k - global mean|| per agent
    deviations_multi: np.ndarray  # ||a_k - own type mean|| per agent
    eps: np.ndarray  # realised average deviation within each type
    gaps: np.ndarray  # ||type mean - global mean||
    lhs_single: float
    lhs_multi: float
    rhs_single: float
    rhs_multi: float


def average_deviation(actions: np.ndarray, types: Sequence[int]) -> DeviationReport:
    a = np.asarray(actions, dtype=float)
    if a.ndim != 2 or len(a) == 0:
        raise ValueError("need a nonempty (N, D) array of one-hot actions")
    t = np.asarray(types, dtype=np.int64)
    if t.shape != (len(a),):
        raise ValueError("need one type label per agent")
    n = len(a)
    k = int(t.max()) + 1
    counts = np.bincount(t, minlength=k)
    global_mean = a.mean(axis=0)
    type_means = np.zeros((k, a.shape[1]))
    for m in range(k):
        if counts[m]:
            type_means[m] = a[t == m].mean(axis=0)
    dev_single = np.linalg.norm(a - global_mean, axis=1)
    dev_multi = np.linalg.norm(a - type_means[t], axis=1)
    eps = np.array([dev_multi[t == m].mean() if counts[m] else 0.0 for m in range(k)])
    gaps = np.array([np.linalg.norm(type_means[m] - global_mean) if counts[m] else 0.0
                     for m in range(k)])
    w = counts / n
    return DeviationReport(
        n=n, counts=counts, deviations_single=dev_single, deviations_multi=dev_multi,
        eps=eps, gaps=gaps,
        lhs_single=float(dev_single.mean()), lhs_multi=float(dev_multi.mean()),
        rhs_single=float(np.sum(w * eps) + np.sum(w * gaps)),
        rhs_multi=float(np.sum(w * eps)),
    )


def check_theorem1(report: DeviationReport) -> tuple[float, float, bool]:
    """Types pooled into one mean field: lhs uses the global mean."""
    return report.lhs_single, report.rhs_single, report.lhs_single <= report.rhs_single + BOUND_TOL


def check_theorem2(report: DeviationReport) -> tuple[float, float, bool]:
    """Types kept apart: lhs uses each agent's own type mean."""
    return report.lhs_multi, report.rhs_multi, report.lhs_multi <= report.rhs_multi + BOUND_TOL


@dataclass
class SmoothnessInstance:
    """A quadratic ``Q(z) = c + g.z + z'Hz/2`` shared by every subset of the partition.

    ``actions`` is ``(X, M, D)``: the one-hot action of each subset's
    representative of every type.
    """

    hessian: np.ndarray
    grad: np.ndarray
    const: float
    actions: np.ndarray

    @property
    def smoothness(self) -> float:
        return float(np.max(np.abs(np.linalg.eigvalsh(self.hessian))))

    def q(self, z: np.ndarray) -> np.ndarray:
        return self.const + z @ self.grad + 0.5 * np.einsum("...i,ij,...j->...", z, self.hessian, z)

    def flat_actions(self) -> np.ndarray:
        return self.actions.reshape(len(self.actions), -1)

    def mean_point(self) -> np.ndarray:
        # per-type means, concatenated
        return self.actions.mean(axis=0).ravel()

    def realized_eps(self) -> float:
        return float(np.linalg.norm(self.flat_actions() - self.mean_point(), axis=1).mean())


def check_theorem3(inst: SmoothnessInstance) -> tuple[float, float, bool]:
    """Returns (|Q - Q_mtmf|, L * eps / 2, holds)."""
    exact = float(np.mean(inst.q(inst.flat_actions())))
    approx = float(inst.q(inst.mean_point()))
    err = abs(exact - approx)
    bound = 0.5 * inst.smoothness * inst.realized_eps()
    return err, bound, err <= bound + SMOOTH_TOL


def squared_deviation_bound(inst: SmoothnessInstance) -> float:
    """``L/2 * mean ||delta||^2``: the remainder bound that holds for every instance.

    ``check_theorem3`` uses the mean deviation norm instead, which can be
    smaller whenever ``||delta|| > 1``.
    """
    dev = np.linalg.norm(inst.flat_actions() - inst.mean_point(), axis=1)
    return float(0.5 * inst.smoothness * np.mean(dev ** 2))


def random_deviation_instance(rng: np.random.Generator, max_agents: int = 20,
                              max_actions: int = 5, num_types: int = 2):
    n = int(rng.integers(num_types, max_agents + 1))
    d = int(rng.integers(2, max_actions + 1))
    types = np.concatenate([np.arange(num_types), rng.integers(0, num_types, n - num_types)])
    rng.shuffle(types)
    actions = np.eye(d)[rng.integers(0, d, n)]
    return actions, types


def random_smoothness_instance(rng: np.random.Generator, zero_hessian: bool = False) -> SmoothnessInstance:
    m = int(rng.integers(1, 4))
    d = int(rng.integers(2, 6))
    x = int(rng.integers(1, 9))
    dim = m * d
    if zero_hessian:
        h = np.zeros((dim, dim))
    else:
        a = rng.normal(size=(dim, dim))
        h = (a + a.T) / 2 * rng.uniform(0.1, 5.0)
    acts = np.eye(d)[rng.integers(0, d, size=(x, m))]
    return SmoothnessInstance(h, rng.normal(size=dim), float(rng.normal()), acts)


@dataclass
class BoundRow:
    instance: int
    theorem: int
    lhs: float
    rhs_single: float
    rhs_multi: float
    holds: bool


def deviation_suite(instances: int, seed: int) -> list[BoundRow]:
    rng = np.random.default_rng(seed)
    rows = []
    for i in range(instances):
        actions, types = random_deviation_instance(rng)
        rep = average_deviation(actions, types)
        for thm, check in ((1, check_theorem1), (2, check_theorem2)):
            lhs, _, ok = check(rep)
            rows.append(BoundRow(i, thm, lhs, rep.rhs_single, rep.rhs_multi, ok))
    return rows


@dataclass
class SmoothRow:
    instance: int
    control: bool
    error: float
    bound: float
    smoothness: float
    eps: float
    holds: bool
    squared_bound: float


def smoothness_suite(instances: int, controls: int, seed: int) -> list[SmoothRow]:
    rng = np.random.default_rng(seed)
    rows = []
    for i in range(instances + controls):
        ctrl = i >= instances
        inst = random_smoothness_instance(rng, zero_hessian=ctrl)
        err, bound, ok = check_theorem3(inst)
        rows.append(SmoothRow(i, ctrl, err, bound, inst.smoothness, inst.realized_eps(), ok,
                              squared_deviation_bound(inst)))
    return rows


# -- spin game --------------------------------------------------------------

UP, DOWN = 0, 1
ACTION_NAMES = ("up", "down")
# neighbours A (left), B (top) form type 1; C (right), D (bottom) type 2
GRID_A = (UP, UP, DOWN, DOWN)
GRID_B = (DOWN, DOWN, UP, UP)


def spin_reward(action: int, neighbours: Sequence[int]) -> float:
    a, b, c, d = neighbours
    if action == c == d:
        return -2.0
    if action == a == b:
        return 2.0
    return 0.0


def spin_grid(stage: int) -> tuple[str, tuple[int, ...]]:
    """Stages are 1-based; every third stage is grid B."""
    return ("B", GRID_B) if stage % 3 == 0 else ("A", GRID_A)


def spin_key(algorithm: str, neighbours: Sequence[int]) -> tuple[int, ...]:
    up = [int(v == UP) for v in neighbours]
    if algorithm == "mfq":
        return (sum(up),)
    if algorithm == "mtmfq":
        return (up[0] + up[1], up[2] + up[3])
    raise ValueError(f"spin game supports mfq and mtmfq, not {algorithm!r}")


@dataclass
class SpinStage:
    stage: int
    grid: str
    key: tuple[int, ...]
    q_up: float
    q_down: float
    chosen: int
    correct: bool


@dataclass
class SpinGameTrace:
    algorithm: str
    alpha: float
    stages: list[SpinStage] = field(default_factory=list)

    @property
    def mistakes(self) -> int:
        return sum(not s.correct for s in self.stages)


def greedy(q_up: float, q_down: float) -> int:
    return DOWN if q_down > q_up else UP


def spin_game_trace(algorithm: str, stages: int, alpha: float = 0.1) -> SpinGameTrace:
    """Stateless tabular updates ``Q <- Q + alpha (r - Q)`` for both actions at every stage."""
    if stages < 1:
        raise ValueError("need at least one stage")
    table: dict[tuple, float] = {}
    trace = SpinGameTrace(algorithm, alpha)
    for s in range(1, stages + 1):
        grid, nb = spin_grid(s)
        key = spin_key(algorithm, nb)
        for a in (UP, DOWN):
            q = table.get((a,) + key, 0.0)
            table[(a,) + key] = q + alpha * (spin_reward(a, nb) - q)
        q_up, q_down = table[(UP,) + key], table[(DOWN,) + key]
        best = max((UP, DOWN), key=lambda a: spin_reward(a, nb))
        chosen = greedy(q_up, q_down)
        trace.stages.append(SpinStage(s, grid, key, q_up, q_down, chosen, chosen == best))
    return trace


# -- CSV --------------------------------------------------------------------

def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "1" if v else "0"
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def write_csv(path: str | Path, header: Sequence[str], rows: Iterable[Sequence]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_fmt(v) for v in r])


def write_bound_csv(rows: Sequence[BoundRow], path) -> None:
    write_csv(path, ["instance", "theorem", "lhs", "rhs_single", "rhs_multi", "holds"],
              ((r.instance, r.theorem, r.lhs, r.rhs_single, r.rhs_multi, r.holds) for r in rows))


def write_smooth_csv(rows: Sequence[SmoothRow], path) -> None:
    write_csv(path, ["instance", "control", "error", "bound", "L", "eps", "holds",
                     "squared_bound"],
              ((r.instance, r.control, r.error, r.bound, r.smoothness, r.eps, r.holds,
                r.squared_bound) for r in rows))


def write_spin_csv(traces: Sequence[SpinGameTrace], path) -> None:
    write_csv(path, ["stage", "algorithm", "q_up", "q_down", "chosen", "correct"],
              ((s.stage, t.algorithm, s.q_up, s.q_down, ACTION_NAMES[s.chosen], s.correct)
               for t in traces for s in t.stages))
