"""Run configuration: one JSON document describing a full experiment."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

from .concepts import ConceptRegistry, default_registry
from .diffusion import NoiseSchedule, make_schedule
from .nn import Architecture
from .pipeline import PretrainConfig
from .unlearning import UnlearnConfig

DEFAULT_TASKS = ("tench", "beagle", "garbage_truck")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ScheduleConfig:
    T: int = 200
    # the usual 1e-4..0.02 over 1000 steps, rescaled to T = 200 so that alpha_bar_T is ~3e-5
    beta_start: float = 5e-4
    beta_end: float = 0.1

    def build(self) -> NoiseSchedule:
        return make_schedule(self.T, self.beta_start, self.beta_end)


@dataclass(frozen=True)
class ArchConfig:
    hidden_dims: tuple[int, ...] = (64, 64)
    cond_embed_dim: int = 8
    time_embed_dim: int = 8

    def build(self, reg: ConceptRegistry) -> Architecture:
        return Architecture(reg.data_dim, tuple(self.hidden_dims), reg.cond_vocab,
                            self.cond_embed_dim, self.time_embed_dim)


@dataclass(frozen=True)
class UnlearnSection:
    tasks: tuple[str, ...] = DEFAULT_TASKS
    params: UnlearnConfig = field(default_factory=UnlearnConfig)


@dataclass(frozen=True)
class EvalConfig:
    n_eval: int = 200


@dataclass(frozen=True)
class RunConfig:
    seed: int = 1
    # "default", a path to a registry JSON file, or an inline registry document
    registry: str | dict = "default"
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    arch: ArchConfig = field(default_factory=ArchConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    unlearn: UnlearnSection = field(default_factory=UnlearnSection)
    eval: EvalConfig = field(default_factory=EvalConfig)
    output_dir: str = "runs/default"

    def load_registry(self) -> ConceptRegistry:
        if isinstance(self.registry, dict):
            return ConceptRegistry.from_json(self.registry)
        if self.registry == "default":
            return default_registry()
        return ConceptRegistry.load(self.registry)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        unl = d.pop("unlearn")
        d["unlearn"] = {"tasks": list(unl["tasks"]), **unl["params"]}
        d["arch"]["hidden_dims"] = list(d["arch"]["hidden_dims"])
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def digest(self) -> str:
        canonical = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode()).hexdigest()[:16]

    def header(self) -> str:
        return f"config_hash={self.digest()} seed={self.seed}"

    def replace(self, **kw) -> RunConfig:
        return dataclasses.replace(self, **kw)

    def with_unlearn(self, **kw) -> RunConfig:
        tasks = kw.pop("tasks", self.unlearn.tasks)
        try:
            params = dataclasses.replace(self.unlearn.params, **kw)
        except (TypeError, ValueError) as err:
            raise ConfigError(str(err)) from err
        return self.replace(unlearn=UnlearnSection(tuple(tasks), params))


def _build(cls, raw, section: str, convert=None):
    if not isinstance(raw, dict):
        raise ConfigError(f"{section}: expected an object")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(raw) - names)
    if unknown:
        raise ConfigError(f"{section}: unknown keys {unknown}")
    kw = dict(raw)
    if convert:
        kw = convert(kw)
    try:
        return cls(**kw)
    except (TypeError, ValueError) as err:
        raise ConfigError(f"{section}: {err}") from err


def _int(value, name):
    if isinstance(value, bool) or not isinstance(value, int):
        raise ConfigError(f"{name} must be an integer")
    return value


def from_dict(raw: dict) -> RunConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    top = {f.name for f in dataclasses.fields(RunConfig)}
    unknown = sorted(set(raw) - top)
    if unknown:
        raise ConfigError(f"unknown keys {unknown}")
    base = RunConfig()
    kw = {}
    if "seed" in raw:
        kw["seed"] = _int(raw["seed"], "seed")
        if kw["seed"] < 0:
            raise ConfigError("seed must be non-negative")
    if "registry" in raw:
        if not isinstance(raw["registry"], (str, dict)):
            raise ConfigError("registry must be 'default', a path or an object")
        # canonical JSON form so that parse(serialize(cfg)) == cfg
        kw["registry"] = json.loads(json.dumps(raw["registry"]))
    if "output_dir" in raw:
        kw["output_dir"] = str(raw["output_dir"])
    if "schedule" in raw:
        kw["schedule"] = _build(ScheduleConfig, raw["schedule"], "schedule")
    if "arch" in raw:
        kw["arch"] = _build(ArchConfig, raw["arch"], "arch",
                            lambda d: {**d, "hidden_dims": tuple(d["hidden_dims"])} if "hidden_dims" in d else d)
    if "pretrain" in raw:
        kw["pretrain"] = _build(PretrainConfig, {**dataclasses.asdict(base.pretrain), **raw["pretrain"]}, "pretrain")
    if "eval" in raw:
        kw["eval"] = _build(EvalConfig, raw["eval"], "eval")
    if "unlearn" in raw:
        unl = dict(raw["unlearn"]) if isinstance(raw["unlearn"], dict) else raw["unlearn"]
        if not isinstance(unl, dict):
            raise ConfigError("unlearn: expected an object")
        tasks = unl.pop("tasks", list(DEFAULT_TASKS))
        if not isinstance(tasks, list) or not tasks or not all(isinstance(t, (str, int)) for t in tasks):
            raise ConfigError("unlearn.tasks must be a non-empty list of concept names or ids")
        params = _build(UnlearnConfig, unl, "unlearn")
        kw["unlearn"] = UnlearnSection(tuple(str(t) for t in tasks), params)
    cfg = base.replace(**kw)
    validate(cfg)
    return cfg


def validate(cfg: RunConfig) -> None:
    """Cross-section checks that need the registry."""
    try:
        reg = cfg.load_registry()
        cfg.arch.build(reg)
        cfg.schedule.build()
        for name in cfg.unlearn.tasks:
            if not reg.is_subconcept(reg.token(name)):
                raise ConfigError(f"task {name!r} is not a subconcept")
    except ConfigError:
        raise
    except (ValueError, KeyError, TypeError) as err:
        raise ConfigError(str(err)) from err
    if cfg.eval.n_eval < 1:
        raise ConfigError("eval.n_eval must be >= 1")
    if len(set(cfg.unlearn.tasks)) != len(cfg.unlearn.tasks):
        raise ConfigError("unlearn.tasks must be distinct")


def parse(text: str) -> RunConfig:
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as err:
        raise ConfigError(f"invalid JSON: {err}") from err
    return from_dict(raw)


def load(path) -> RunConfig:
    return parse(Path(path).read_text())
