"""Episode loop, self-play training and frozen-policy faceoffs.

Every group owns one :class:`~mtmfq.learning.QModel` shared by its agents and
one replay buffer. At each step, agents look at their neighbours' previous
actions, form per-type mean actions (types = groups when known, k-means
clusters when not), sample Boltzmann actions and the engine advances. Models
are updated only between episodes.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from . import engine
from .analysis import (DOWN, UP, SpinGameTrace, SpinStage, spin_grid, spin_reward, greedy)
from .engine import WorldState
from .learning import (IL, MFQ, MTMFQ, Batch, Hyperparams, QModel, ReplayBuffer,
                       batched_mean_actions, boltzmann_policy, load_model, q_update, q_values,
                       sample_rows, save_model, soft_update)
from .scenarios import KNOWN_TYPES, UNKNOWN_TYPES, ScenarioConfig, is_predator
from .type_inference import ActionHistoryBuffer, TypeAssignment, kmeans, purity, relabel

log = logging.getLogger(__name__)

# sector and food counts are scaled down so linear features stay O(1)
COUNT_SCALE = 0.25

ROLES = {"world": 11, "policy": 23, "replay": 37, "kmeans": 41, "faceoff": 53}


def derive_seed(seed: int, role: str, index: int = 0) -> int:
    """Seed for one component: hash of (top-level seed, fixed role offset, index)."""
    ss = np.random.SeedSequence([int(seed) & (2**64 - 1), ROLES[role], int(index)])
    return int(ss.generate_state(1, np.uint64)[0])


class ScenarioMismatch(ValueError):
    pass


def feature_dims(config: ScenarioConfig) -> tuple[int, int]:
    """(observation dim, mean-action vocabulary size)."""
    return engine.observation_size(config), engine.action_vocabulary(config).size


def observations(world: WorldState, radius: int) -> np.ndarray:
    obs = engine.observe_all(world, radius)
    counts = world.config.num_groups * engine.NUM_SECTORS + 1
    obs[:, :counts] *= COUNT_SCALE
    return obs


def new_model(config: ScenarioConfig, group: int, algorithm: str, num_types: Optional[int] = None) -> QModel:
    obs_dim, vocab = feature_dims(config)
    if num_types is None:
        num_types = config.num_groups if config.mode == KNOWN_TYPES else 2
    n_actions = len(engine.legal_actions(config, group))
    return QModel.create(algorithm, obs_dim, n_actions, vocab, num_types)


def check_models(config: ScenarioConfig, models: Sequence[QModel],
                 type_state: Optional["TypeState"] = None) -> None:
    if len(models) != config.num_groups:
        raise ScenarioMismatch(f"need {config.num_groups} models, got {len(models)}")
    obs_dim, vocab = feature_dims(config)
    for g, m in enumerate(models):
        f = m.features
        if f.kind != "linear" or f.obs_dim != obs_dim or f.mean_dim != vocab:
            raise ScenarioMismatch(f"group {g}: model feature dims do not match the scenario")
        if f.action_count != len(engine.legal_actions(config, g)):
            raise ScenarioMismatch(f"group {g}: model has {f.action_count} actions")
        if m.algorithm == MTMFQ:
            want = config.num_groups if config.mode == KNOWN_TYPES else (
                type_state.num_types if type_state is not None else m.num_types)
            if m.num_types != want:
                raise ScenarioMismatch(f"group {g}: MTMFQ model has M={m.num_types}, need {want}")


@dataclass
class TypeState:
    """Unknown-type bookkeeping for one episode."""

    buffer: ActionHistoryBuffer
    num_types: int
    stride: int
    restarts: int
    seed: int
    labels: np.ndarray
    assignment: Optional[TypeAssignment] = None
    clusterings: int = 0
    history: list = field(default_factory=list)
    keep_history: bool = False

    @classmethod
    def for_world(cls, world: WorldState, hyper: Hyperparams, seed: int,
                  keep_history: bool = False) -> "TypeState":
        vocab = engine.action_vocabulary(world.config)
        return cls(ActionHistoryBuffer(world.num_agents, hyper.history, vocab.size),
                   hyper.num_types, hyper.cluster_stride, hyper.cluster_restarts, seed,
                   np.zeros(world.num_agents, dtype=np.int64), keep_history=keep_history)

    def update(self, world: WorldState, acted: np.ndarray, union_actions: np.ndarray) -> None:
        self.buffer.record_many(acted, union_actions[acted])
        if world.step % self.stride:
            return
        ids = world.alive_ids()
        if ids.size == 0:
            return
        fresh = kmeans(self.buffer.frequencies(ids), self.num_types,
                       seed=self.seed + self.clusterings, restarts=self.restarts, agent_ids=ids)
        self.clusterings += 1
        prev = self.assignment.restrict(ids) if self.assignment is not None else None
        self.assignment = relabel(fresh, prev)
        self.labels[ids] = self.assignment.labels
        if self.keep_history:
            self.history.extend((world.step, int(a), int(t))
                                for a, t in zip(ids, self.assignment.labels))

    def purity(self, world: WorldState) -> float:
        if self.assignment is None:
            return float("nan")
        truth = np.array([int(is_predator(world.config, int(world.group[a])))
                          for a in self.assignment.agent_ids])
        return purity(self.assignment.labels, truth)


@dataclass
class EpisodeMetrics:
    episode: int
    rewards: np.ndarray  # per group, summed over agents and steps
    alive: np.ndarray
    steps: int
    transitions: int
    loss: np.ndarray = None
    purity: float = float("nan")


def _partition(model: QModel, config: ScenarioConfig) -> str:
    """Which labelling splits a model's neighbours into mean-action types."""
    if model.algorithm == MFQ:
        return "single"
    if model.algorithm == IL:
        return "none"
    return "group" if config.mode == KNOWN_TYPES else "cluster"


def _all_means(world, neighbors, union_last, kinds, type_state, vocab_size, num_groups):
    out = {}
    n = world.num_agents
    for kind in kinds:
        if kind == "group":
            out[kind] = batched_mean_actions(neighbors, world.group, num_groups, union_last, vocab_size)
        elif kind == "cluster":
            out[kind] = batched_mean_actions(neighbors, type_state.labels, type_state.num_types,
                                             union_last, vocab_size)
        elif kind == "single":
            out[kind] = batched_mean_actions(neighbors, np.zeros(n, dtype=np.int64), 1,
                                             union_last, vocab_size)
        else:
            out[kind] = np.zeros((n, 0, vocab_size))
    return out


def run_episode(world: WorldState, models: Sequence[QModel], hyper: Hyperparams, beta: float,
                rng: np.random.Generator, type_state: Optional[TypeState] = None,
                replays: Optional[Sequence[ReplayBuffer]] = None, episode: int = 0,
                events: Optional[list] = None) -> EpisodeMetrics:
    """Play one episode to termination, optionally storing transitions per group."""
    config = world.config
    g_count = config.num_groups
    if (type_state is not None) != (config.mode == UNKNOWN_TYPES):
        raise ScenarioMismatch("type_state must be given exactly when types are unknown")
    check_models(config, models, type_state)
    vocab = engine.action_vocabulary(config)
    kinds = [_partition(m, config) for m in models]
    needed = sorted(set(kinds))
    radius = hyper.radius

    def snapshot():
        union_last = np.empty(world.num_agents, dtype=np.int64)
        for g in range(g_count):
            rows = world.group == g
            union_last[rows] = vocab.to_union[g][world.last_action[rows]]
        nb = engine.neighbor_matrix(world, radius)
        return observations(world, radius), _all_means(world, nb, union_last, needed,
                                                      type_state, vocab.size, g_count)

    totals = np.zeros(g_count)
    transitions = 0
    obs, means = snapshot()
    while not world.is_done():
        live = world.alive.copy()
        actions = np.zeros(world.num_agents, dtype=np.int64)
        rows_by_group = []
        for g in range(g_count):
            rows = np.flatnonzero(live & (world.group == g))
            rows_by_group.append(rows)
            if rows.size:
                q = q_values(models[g], obs[rows], means[kinds[g]][rows])
                actions[rows] = sample_rows(boltzmann_policy(q, beta), rng)
        world, rewards, evs = engine.step(world, actions)
        if events is not None:
            events.extend(evs)
        totals += np.bincount(world.group[live], weights=rewards[live], minlength=g_count)
        if type_state is not None:
            union_now = np.empty(world.num_agents, dtype=np.int64)
            for g in range(g_count):
                rows = world.group == g
                union_now[rows] = vocab.to_union[g][actions[rows]]
            type_state.update(world, np.flatnonzero(live), union_now)
        next_obs, next_means = snapshot()
        if replays is not None:
            for g, rows in enumerate(rows_by_group):
                if rows.size:
                    k = kinds[g]
                    replays[g].add(obs[rows], actions[rows], rewards[rows], next_obs[rows],
                                   means[k][rows], next_means[k][rows], ~world.alive[rows])
                    transitions += rows.size
        obs, means = next_obs, next_means

    return EpisodeMetrics(episode, totals, world.alive_counts().astype(float), world.step,
                          transitions,
                          purity=type_state.purity(world) if type_state is not None else float("nan"))


@dataclass
class TrainRun:
    config: ScenarioConfig
    algorithms: tuple[str, ...]
    hyper: Hyperparams
    episodes: int
    seed: int
    models: list[QModel]
    metrics: list[EpisodeMetrics] = field(default_factory=list)

    def group_rewards(self, group: int) -> np.ndarray:
        return np.array([m.rewards[group] for m in self.metrics])


def _make_replays(config, models, hyper):
    obs_dim, vocab = feature_dims(config)
    return [ReplayBuffer(hyper.replay_capacity, obs_dim, m.num_types, vocab) for m in models]


def train(config: ScenarioConfig, algorithms: Sequence[str], hyper: Hyperparams, episodes: int,
          seed: int, out_dir: Optional[str | Path] = None,
          progress: Optional[Callable[[EpisodeMetrics], None]] = None,
          models: Optional[list[QModel]] = None) -> TrainRun:
    """Self-play training: every group learns its own model with its own algorithm."""
    if episodes < 1:
        raise ValueError("need at least one episode")
    if len(algorithms) != config.num_groups:
        raise ScenarioMismatch(f"need {config.num_groups} algorithms, got {len(algorithms)}")
    if models is None:
        models = [new_model(config, g, a, hyper.num_types if config.mode == UNKNOWN_TYPES else None)
                  for g, a in enumerate(algorithms)]
    replays = _make_replays(config, models, hyper)
    policy_rng = np.random.default_rng(derive_seed(seed, "policy"))
    replay_rng = np.random.default_rng(derive_seed(seed, "replay"))
    run = TrainRun(config, tuple(algorithms), hyper, episodes, seed, models)
    for ep in range(episodes):
        beta = hyper.beta(ep)
        world = engine.reset(config, derive_seed(seed, "world", ep))
        ts = (TypeState.for_world(world, hyper, derive_seed(seed, "kmeans", ep) % (2**32))
              if config.mode == UNKNOWN_TYPES else None)
        m = run_episode(world, models, hyper, beta, policy_rng, ts, replays, episode=ep)
        losses = np.zeros(config.num_groups)
        for g, model in enumerate(models):
            if len(replays[g]) == 0:
                continue
            n_updates = hyper.updates_per_episode
            acc = 0.0
            for _ in range(n_updates):
                acc += q_update(model, replays[g].sample(hyper.batch_size, replay_rng),
                                hyper.alpha, beta, hyper.gamma)
                soft_update(model, hyper.tau)
            losses[g] = acc / n_updates
        m.loss = losses
        run.metrics.append(m)
        if progress is not None:
            progress(m)
    if out_dir is not None:
        save_run(run, out_dir)
    return run


def save_run(run: TrainRun, out_dir: str | Path) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for g, model in enumerate(run.models):
        p = out / f"model_group{g}.bin"
        save_model(model, p)
        paths.append(p)
    write_metrics_csv(run, out / "metrics.csv")
    if run.config.mode == UNKNOWN_TYPES:
        with open(out / "purity.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["episode", "purity"])
            for m in run.metrics:
                w.writerow([m.episode, repr(float(m.purity))])
    return paths


def write_metrics_csv(run: TrainRun, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["episode", "group", "algorithm", "cumulative_reward", "loss", "alive_at_end"])
        for m in run.metrics:
            for g in range(run.config.num_groups):
                w.writerow([m.episode, g, run.algorithms[g], repr(float(m.rewards[g])),
                            repr(float(m.loss[g])), int(m.alive[g])])


@dataclass
class FaceoffResult:
    games: int
    wins: np.ndarray  # per group
    mean_reward: np.ndarray  # per group per game
    entrant_wins: np.ndarray  # per entrant; equals ``wins`` without rotation
    rows: list = field(default_factory=list)


def faceoff(config: ScenarioConfig, models: Sequence[QModel], games: int, seed: int,
            hyper: Optional[Hyperparams] = None,
            rotation_pool: Optional[Sequence[Sequence[QModel]]] = None) -> FaceoffResult:
    """Frozen-policy tournament; winners are the groups with the most agents alive.

    With ``rotation_pool`` (entrant -> per-group models) the entrant playing
    group ``g`` in block ``b`` is ``(g - b) mod G``, changing every ``games / 4`` games.
    ``models`` is ignored in that case.
    """
    hyper = hyper or Hyperparams()
    g_count = config.num_groups
    wins = np.zeros(g_count, dtype=np.int64)
    entrant_wins = np.zeros(g_count, dtype=np.int64)
    reward_sum = np.zeros(g_count)
    rows = []
    if games <= 0:
        return FaceoffResult(0, wins, reward_sum, entrant_wins, rows)
    block = max(1, -(-games // 4))
    for game in range(games):
        if rotation_pool is not None:
            b = game // block
            lineup = [(g - b) % g_count for g in range(g_count)]
            game_models = [rotation_pool[e][g] for g, e in enumerate(lineup)]
        else:
            lineup = list(range(g_count))
            game_models = list(models)
        world = engine.reset(config, derive_seed(seed, "faceoff", game))
        rng = np.random.default_rng(derive_seed(seed, "policy", game))
        ts = (TypeState.for_world(world, hyper, derive_seed(seed, "kmeans", game) % (2**32))
              if config.mode == UNKNOWN_TYPES else None)
        m = run_episode(world, game_models, hyper, hyper.faceoff_beta, rng, ts, None, episode=game)
        top = m.alive.max()
        winners = np.flatnonzero(m.alive == top)
        wins[winners] += 1
        for g in winners:
            entrant_wins[lineup[g]] += 1
        reward_sum += m.rewards
        rows.append((game, winners.tolist(), m.alive.astype(int).tolist(), m.rewards.tolist()))
    return FaceoffResult(games, wins, reward_sum / games, entrant_wins, rows)


def write_faceoff_csv(result: FaceoffResult, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["game", "winner_groups", "alive_counts", "rewards"])
        for game, winners, alive, rewards in result.rows:
            w.writerow([game, " ".join(map(str, winners)), " ".join(map(str, alive)),
                        " ".join(repr(float(r)) for r in rewards)])


def load_models(paths: Sequence[str | Path]) -> list[QModel]:
    return [load_model(p) for p in paths]


# -- spin game through the learning stack -----------------------------------

def spin_game_model_trace(algorithm: str, stages: int, alpha: float = 0.1) -> SpinGameTrace:
    """The spin game played by a tabular :class:`QModel` updated with :func:`q_update`.

    Mean actions are the neighbours' one-hot spins averaged per type (A, B vs.
    C, D) for MTMFQ or over all four for MFQ, rounded exactly at their
    neighbour-count resolution. Each stage applies one single-entry update per
    action with a terminal target equal to the reward.
    """
    if algorithm == MTMFQ:
        model = QModel.tabular(MTMFQ, (), 2, 2, num_types=2, resolution=2)
    elif algorithm == MFQ:
        model = QModel.tabular(MFQ, (), 2, 2, resolution=4)
    else:
        raise ValueError("spin game supports mfq and mtmfq")
    onehot = np.eye(2)
    trace = SpinGameTrace(algorithm, alpha)
    for s in range(1, stages + 1):
        grid, nb = spin_grid(s)
        spins = onehot[list(nb)]
        if algorithm == MTMFQ:
            means = np.stack([spins[:2].mean(axis=0), spins[2:].mean(axis=0)])
        else:
            means = spins.mean(axis=0, keepdims=True)
        for a in (UP, DOWN):
            batch = Batch(np.zeros((1, 0)), np.array([a]), np.array([spin_reward(a, nb)]),
                          np.zeros((1, 0)), means[None], means[None], np.array([True]))
            q_update(model, batch, alpha, beta=0.0, gamma=0.0)
        q = q_values(model, np.zeros(0), means)
        best = max((UP, DOWN), key=lambda a: spin_reward(a, nb))
        chosen = greedy(q[UP], q[DOWN])
        key = model.features.round_means(means)
        trace.stages.append(SpinStage(s, grid, tuple(k[0] for k in key), float(q[UP]),
                                      float(q[DOWN]), chosen, chosen == best))
    return trace
