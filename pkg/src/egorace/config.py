"""Run configuration: one TOML file, CLI flags on top.

Precedence, lowest first: built-in defaults, the config file, command-line
flags. Unknown keys anywhere are errors.
"""

from __future__ import annotations

import dataclasses
from dataclasses import asdict, dataclass, field, fields, replace
from importlib import resources
from pathlib import Path

import tomlkit

from egorace.distributed import HarnessConfig, RolloutConfig
from egorace.neural import ABLATIONS, NetConfig
from egorace.qrsac import LearnerConfig


class RunConfigError(ValueError):
    pass


@dataclass(frozen=True)
class TrainSection:
    epochs: int = 500
    checkpoint_every: int = 50
    buffer_capacity: int = 100_000


@dataclass(frozen=True)
class EvalSection:
    track: str = "oval"
    laps: int = 4
    n_opponents: int = 19
    start_mode: str = "back_of_grid"
    opponent_power_scale: float = 1.0
    episodes: int = 50
    seed_base: int = 10_000
    collision_ceiling: float = 5.0
    max_steps: int | None = None


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    out: str = "runs/default"
    race: RolloutConfig = field(default_factory=RolloutConfig)
    net: NetConfig = field(default_factory=NetConfig)
    learner: LearnerConfig = field(default_factory=LearnerConfig)
    harness: HarnessConfig = field(default_factory=HarnessConfig)
    train: TrainSection = field(default_factory=TrainSection)
    eval: EvalSection = field(default_factory=EvalSection)

    def learner_config(self) -> LearnerConfig:
        return replace(self.learner, net=self.net, seed=self.seed)

    def rollout_config(self) -> RolloutConfig:
        return replace(self.race, seed=self.seed, with_global=not self.net.symmetric_critic)


_SECTIONS = {"race": RolloutConfig, "net": NetConfig, "learner": LearnerConfig,
             "harness": HarnessConfig, "train": TrainSection, "eval": EvalSection}
# learner fields that live in other sections
_LEARNER_SKIP = {"net", "seed"}
_RACE_SKIP = {"seed", "with_global"}


def _section_fields(cls) -> dict[str, dataclasses.Field]:
    skip = _LEARNER_SKIP if cls is LearnerConfig else _RACE_SKIP if cls is RolloutConfig else set()
    return {f.name: f for f in fields(cls) if f.name not in skip}


def _coerce(cls, name, value):
    if cls is RolloutConfig and name == "curriculum":
        try:
            return tuple((int(start), tuple(int(c) for c in counts)) for start, counts in value)
        except (TypeError, ValueError) as exc:
            raise RunConfigError("race.curriculum must be a list of [first_epoch, [counts...]]") from exc
    return value


def _build(cls, table: dict, where: str):
    known = _section_fields(cls)
    unknown = sorted(set(table) - set(known))
    if unknown:
        raise RunConfigError(f"unknown key(s) in [{where}]: {', '.join(unknown)}")
    kwargs = {k: _coerce(cls, k, v) for k, v in table.items()}
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise RunConfigError(f"[{where}]: {exc}") from exc


def from_dict(data: dict) -> RunConfig:
    top = {"seed", "out"} | set(_SECTIONS)
    unknown = sorted(set(data) - top)
    if unknown:
        raise RunConfigError(f"unknown top-level key(s): {', '.join(unknown)}")
    kwargs = {k: data[k] for k in ("seed", "out") if k in data}
    for name, cls in _SECTIONS.items():
        table = data.get(name, {})
        if not isinstance(table, dict):
            raise RunConfigError(f"[{name}] must be a table")
        kwargs[name] = _build(cls, table, name)
    return RunConfig(**kwargs)


def to_dict(cfg: RunConfig) -> dict:
    out = {"seed": cfg.seed, "out": cfg.out}
    for name, cls in _SECTIONS.items():
        obj = getattr(cfg, name)
        table = {}
        for k in _section_fields(cls):
            v = getattr(obj, k)
            if v is None:
                continue  # TOML has no null; absent means default
            if k == "curriculum":
                v = [[start, list(counts)] for start, counts in v]
            table[k] = v
        out[name] = table
    return out


BUNDLED_CONFIGS = ("desk",)


def resolve_config_path(ref: str) -> Path:
    if ref in BUNDLED_CONFIGS:
        return Path(str(resources.files("egorace") / "configs" / f"{ref}.toml"))
    return Path(ref)


def load_config(ref: str | None) -> RunConfig:
    if ref is None:
        return RunConfig()
    path = resolve_config_path(ref)
    try:
        text = path.read_text()
    except OSError as exc:
        raise RunConfigError(f"cannot read config {path}: {exc.strerror or exc}") from exc
    try:
        data = tomlkit.parse(text).unwrap()
    except Exception as exc:  # tomlkit raises its own parse errors
        raise RunConfigError(f"{path}: {exc}") from exc
    return from_dict(data)


def dumps(cfg: RunConfig) -> str:
    return tomlkit.dumps(to_dict(cfg))


def apply_overrides(cfg: RunConfig, *, seed=None, epochs=None, workers=None, ablations=(),
                    episodes=None, collision_ceiling=None, out=None) -> RunConfig:
    if seed is not None:
        cfg = replace(cfg, seed=seed)
    if out is not None:
        cfg = replace(cfg, out=out)
    if epochs is not None:
        cfg = replace(cfg, train=replace(cfg.train, epochs=epochs))
    if workers is not None:
        cfg = replace(cfg, harness=replace(cfg.harness, n_workers=workers))
    if episodes is not None:
        cfg = replace(cfg, eval=replace(cfg.eval, episodes=episodes))
    if collision_ceiling is not None:
        cfg = replace(cfg, eval=replace(cfg.eval, collision_ceiling=collision_ceiling))
    net = cfg.net
    for ab in ablations:
        if ab in ABLATIONS:
            net = replace(net, **{ab: True})
        elif ab.startswith("hidden_size="):
            net = replace(net, hidden_size=int(ab.split("=", 1)[1]))
        else:
            raise RunConfigError(f"unknown ablation {ab!r}; choose from {', '.join(ABLATIONS)} "
                                 "or hidden_size=<n>")
    return replace(cfg, net=net)


def snapshot_dict(cfg: RunConfig) -> dict:
    """Everything needed to rerun, including derived seeds."""
    d = to_dict(cfg)
    d["learner"]["seed"] = cfg.learner_config().seed
    return d
