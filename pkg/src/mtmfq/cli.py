"""Command-line entry point: ``mtmfq {train,faceoff,analyze,spin}``.

Settings are resolved in three layers: built-in defaults, an optional YAML run
file (``--config``), then explicit flags. The resolved settings are echoed to
``<out>/resolved_config.yaml`` next to every artifact.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import yaml

from . import analysis, harness
from .learning import ALGORITHMS, MFQ, MTMFQ, Hyperparams
from .scenarios import BUILDERS, ConfigError, ScenarioConfig, load_scenario, scenario_by_name

log = logging.getLogger("mtmfq")

COMMANDS = ("train", "faceoff", "analyze", "spin")


@dataclass
class RunConfig:
    command: str
    scenario: str = "multi_battle"
    scale: str = "desk"
    max_steps: Optional[int] = None
    algorithms: list = field(default_factory=list)
    models: list = field(default_factory=list)
    seed: int = 0
    out: str = "runs/out"
    episodes: int = 300
    games: int = 200
    alpha: float = 0.1
    gamma: float = 0.95
    tau: float = 0.01
    beta0: float = 0.3
    beta_growth: float = 1.003
    types: int = 2
    radius: int = 6
    batch_size: int = 64
    rotate: bool = False
    instances: int = 1000
    controls: int = 100
    algo: str = "both"
    stages: int = 3

    def hyperparams(self) -> Hyperparams:
        return Hyperparams(alpha=self.alpha, gamma=self.gamma, tau=self.tau, beta0=self.beta0,
                           beta_growth=self.beta_growth, num_types=self.types,
                           radius=self.radius, batch_size=self.batch_size)

    def scenario_config(self) -> ScenarioConfig:
        if self.scenario in BUILDERS:
            return scenario_by_name(self.scenario, self.scale, self.max_steps)
        path = Path(self.scenario)
        if not path.exists():
            raise ConfigError(f"scenario {self.scenario!r} is neither a known name nor a file")
        config = load_scenario(path)
        if self.max_steps is not None:
            config = dataclasses.replace(config, max_steps=self.max_steps)
        return config


FIELDS = {f.name for f in dataclasses.fields(RunConfig)}


def _key_lines(text: str) -> dict[str, int]:
    node = yaml.compose(text)
    if not isinstance(node, yaml.MappingNode):
        return {}
    return {k.value: k.start_mark.line + 1 for k, _ in node.value}


def _load_run_file(path: str) -> dict:
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file {path} does not exist")
    text = p.read_text()
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: parse error: {exc}") from None
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: expected key: value pairs at top level")
    lines = _key_lines(text)
    for key in data:
        if key not in FIELDS:
            raise ConfigError(f"{path}:{lines.get(key, '?')}: unknown key {key!r}")
    return data


def _split(v) -> list:
    if isinstance(v, str):
        return [s for s in v.replace(",", " ").split() if s]
    return list(v)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML run file; flags override its values")
    common.add_argument("--scenario", help="scenario name or path to a scenario YAML")
    common.add_argument("--scale", choices=("desk", "full"))
    common.add_argument("--max-steps", dest="max_steps", type=int)
    common.add_argument("--seed", type=int)
    common.add_argument("--out")
    common.add_argument("--episodes", type=int)
    common.add_argument("--games", type=int)
    common.add_argument("--alpha", type=float)
    common.add_argument("--gamma", type=float)
    common.add_argument("--tau", type=float)
    common.add_argument("--beta0", type=float)
    common.add_argument("--beta-growth", dest="beta_growth", type=float)
    common.add_argument("--types", type=int, help="number of inferred types (unknown-type mode)")
    common.add_argument("--radius", type=int)
    common.add_argument("--batch-size", dest="batch_size", type=int)
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="mtmfq", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("train", parents=[common], help="self-play training")
    p.add_argument("--algos", dest="algorithms", help="one algorithm per group, comma separated")
    p = sub.add_parser("faceoff", parents=[common], help="frozen-policy tournament")
    p.add_argument("--models", nargs="+", help="model file per group (per entrant with --rotate)")
    p.add_argument("--rotate", action="store_true", default=None,
                   help="rotate entrants over groups every games/4; --models then lists "
                        "entrant directories holding model_group<g>.bin")
    p = sub.add_parser("analyze", parents=[common], help="randomised bound checks")
    p.add_argument("--instances", type=int)
    p.add_argument("--controls", type=int)
    p = sub.add_parser("spin", parents=[common], help="spin-game trace")
    p.add_argument("--algo", choices=("mfq", "mtmfq", "both"))
    p.add_argument("--stages", type=int)
    return parser


def parse_config(argv: Sequence[str]) -> RunConfig:
    args = build_parser().parse_args(argv)
    values: dict = {}
    if args.config:
        values.update(_load_run_file(args.config))
        if values.get("command", args.command) != args.command:
            raise ConfigError(f"config file is for {values['command']!r}, not {args.command!r}")
    flags = {k: v for k, v in vars(args).items() if k in FIELDS and v is not None}
    values.update(flags)
    values["command"] = args.command
    for key in ("algorithms", "models"):
        if key in values:
            values[key] = _split(values[key])
    try:
        cfg = RunConfig(**values)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None
    _validate(cfg)
    return cfg


def _validate(cfg: RunConfig) -> None:
    if cfg.command not in COMMANDS:
        raise ConfigError(f"unknown command {cfg.command!r}")
    if not -(2**63) <= int(cfg.seed) < 2**64:
        raise ConfigError("seed must fit in 64 bits")
    bad = [a for a in cfg.algorithms if a not in ALGORITHMS]
    if bad:
        raise ConfigError(f"unknown algorithm(s) {bad}; choose from {list(ALGORITHMS)}")
    missing = [m for m in cfg.models if not Path(m).exists()]
    if missing:
        raise ConfigError(f"model file(s) not found: {missing}")
    if cfg.command == "faceoff" and not cfg.models:
        raise ConfigError("faceoff needs --models")
    if cfg.command == "spin" and cfg.stages < 1:
        raise ConfigError("stages must be >= 1")


def _echo(cfg: RunConfig, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / "resolved_config.yaml").write_text(
        yaml.safe_dump(dataclasses.asdict(cfg), sort_keys=True), newline="\n")


def _status(name: str, ok: bool, detail: str) -> str:
    return f"{name}: {'PASS' if ok else 'FAIL'} ({detail})"


def execute(cfg: RunConfig) -> int:
    out = Path(cfg.out)
    _echo(cfg, out)
    return {"train": _train, "faceoff": _faceoff, "analyze": _analyze, "spin": _spin}[cfg.command](cfg, out)


def _train(cfg: RunConfig, out: Path) -> int:
    config = cfg.scenario_config()
    algos = cfg.algorithms or [MTMFQ] * config.num_groups
    if len(algos) == 1:
        algos = algos * config.num_groups
    hyper = cfg.hyperparams()
    started = time.time()

    def progress(m):
        log.info("episode %d rewards %s alive %s", m.episode, np.round(m.rewards, 2), m.alive)

    run = harness.train(config, algos, hyper, cfg.episodes, cfg.seed, out_dir=out, progress=progress)
    last = run.metrics[-1]
    print(f"trained {cfg.episodes} episodes of {config.name} in {time.time() - started:.1f}s; "
          f"final rewards {' '.join(f'{r:.2f}' for r in last.rewards)}")
    return 0


def _faceoff(cfg: RunConfig, out: Path) -> int:
    config = cfg.scenario_config()
    hyper = cfg.hyperparams()
    if cfg.rotate:
        pool = [harness.load_models([Path(d) / f"model_group{g}.bin" for g in range(config.num_groups)])
                for d in cfg.models]
        result = harness.faceoff(config, [], cfg.games, cfg.seed, hyper, rotation_pool=pool)
    else:
        result = harness.faceoff(config, harness.load_models(cfg.models), cfg.games, cfg.seed, hyper)
    harness.write_faceoff_csv(result, out / "faceoff.csv")
    print(f"games {result.games}; wins per group {result.wins.tolist()}; "
          f"wins per entrant {result.entrant_wins.tolist()}")
    return 0


def _analyze(cfg: RunConfig, out: Path) -> int:
    rows = analysis.deviation_suite(cfg.instances, cfg.seed)
    analysis.write_bound_csv(rows, out / "bounds.csv")
    smooth = analysis.smoothness_suite(cfg.instances, cfg.controls, cfg.seed)
    analysis.write_smooth_csv(smooth, out / "smoothness.csv")
    ok = True
    for thm in (1, 2):
        bad = sum(not r.holds for r in rows if r.theorem == thm)
        ok &= bad == 0
        print(_status(f"theorem{thm}", bad == 0, f"{bad} violations / {cfg.instances}"))
    order = sum(r.rhs_multi > r.rhs_single + analysis.BOUND_TOL for r in rows)
    ok &= order == 0
    print(_status("rhs_multi<=rhs_single", order == 0, f"{order} violations"))
    bad3 = sum(not r.holds for r in smooth if not r.control)
    ctrl = max((r.error for r in smooth if r.control), default=0.0)
    ok &= bad3 == 0 and ctrl <= analysis.BOUND_TOL
    print(_status("theorem3", bad3 == 0, f"{bad3} violations / {cfg.instances}"))
    print(_status("theorem3-controls", ctrl <= analysis.BOUND_TOL, f"max error {ctrl:.3g}"))
    return 0 if ok else 1


def _spin(cfg: RunConfig, out: Path) -> int:
    algos = [MFQ, MTMFQ] if cfg.algo == "both" else [cfg.algo]
    traces = []
    ok = True
    for algo in algos:
        oracle = analysis.spin_game_trace(algo, cfg.stages, cfg.alpha)
        learned = harness.spin_game_model_trace(algo, cfg.stages, cfg.alpha)
        agree = all(abs(a.q_up - b.q_up) <= 1e-12 and abs(a.q_down - b.q_down) <= 1e-12
                    and a.chosen == b.chosen for a, b in zip(oracle.stages, learned.stages))
        ok &= agree
        traces.append(learned)
        print(_status(f"spin {algo}", agree,
                      f"{oracle.mistakes} wrong of {cfg.stages}; QModel matches scalar oracle"))
    analysis.write_spin_csv(traces, out / "spin.csv")
    return 0 if ok else 1


def main(argv: Optional[Sequence[str]] = None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        cfg = parse_config(argv)
    except ConfigError as exc:
        print(f"mtmfq: error: {exc}", file=sys.stderr)
        return 2
    logging.basicConfig(level=logging.INFO if "-v" in argv or "--verbose" in argv else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return execute(cfg)
    except (ConfigError, ValueError, OSError) as exc:
        print(f"mtmfq {cfg.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
