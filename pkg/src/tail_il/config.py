"""Experiment configuration: JSON documents validated against typed sections.

Two profiles ship with the package. ``paper-defaults`` uses the reference
architecture and optimizer settings; ``desk-defaults`` shrinks the model and
schedule so a full curriculum trains on a laptop CPU in minutes. A config
file may name a profile and override any subset of its fields.
"""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Mapping

from .adapters import AdapterConfigError, AdapterSpec, adapter_shapes
from .bench import KINDS, BenchConfig, BenchError
from .policy import PolicySpec, SpecError
from .train import TrainConfig


class ConfigError(ValueError):
    pass


def _strict(cls, d: Mapping, where: str):
    if not isinstance(d, Mapping):
        raise ConfigError(f"{where}: expected an object, got {type(d).__name__}")
    known = {f.name for f in fields(cls)}
    unknown = set(d) - known
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")
    try:
        return cls(**d)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


@dataclass(frozen=True)
class Seeds:
    data_seed: int = 1000
    train_seed: int = 0
    eval_seed: int = 2000

    def __post_init__(self):
        vals = [self.data_seed, self.train_seed, self.eval_seed]
        if any(not isinstance(v, int) or v < 0 for v in vals):
            raise ConfigError("seeds must be non-negative integers")
        if len(set(vals)) != 3:
            raise ConfigError(f"data_seed, train_seed and eval_seed must be distinct, got {vals}")


@dataclass(frozen=True)
class SuiteDef:
    id: str
    kind: str
    n_tasks: int = 4

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"suite {self.id!r}: unknown kind {self.kind!r}")
        if self.n_tasks < 1:
            raise ConfigError(f"suite {self.id!r}: n_tasks must be >= 1")
        if not self.id or "/" in self.id:
            raise ConfigError(f"bad suite id {self.id!r}")


@dataclass(frozen=True)
class BenchSection:
    env: BenchConfig = BenchConfig()
    seeds: Seeds = Seeds()
    pretrain: SuiteDef = SuiteDef("pretrain", "pretrain", 8)
    suites: tuple[SuiteDef, ...] = ()

    def suite(self, sid: str) -> SuiteDef:
        if sid == self.pretrain.id:
            return self.pretrain
        for s in self.suites:
            if s.id == sid:
                return s
        raise ConfigError(f"unknown suite {sid!r}")


@dataclass(frozen=True)
class CurriculumSection:
    strategy: str = "tail-lora"
    stages: tuple[str, ...] = ("spatial", "goal", "object")
    pretrain_epochs: int = 40
    seeds: tuple[int, ...] = (0, 21, 42)
    ranks: tuple[int, ...] = (2, 4, 8, 16)


@dataclass(frozen=True)
class ExperimentConfig:
    profile: str
    policy: PolicySpec
    adapter: AdapterSpec
    train: TrainConfig
    bench: BenchSection
    curriculum: CurriculumSection

    def to_dict(self) -> dict:
        return json.loads(json.dumps(asdict(self)))

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()

    def with_seed(self, train_seed: int) -> "ExperimentConfig":
        seeds = replace(self.bench.seeds, train_seed=train_seed)
        return replace(self, bench=replace(self.bench, seeds=seeds),
                       train=replace(self.train, seed=train_seed))

    def suite_seed(self, suite_id: str) -> int:
        """Per-suite task-generation seed derived from the data seed."""
        h = hashlib.sha256(f"{self.bench.seeds.data_seed}/{suite_id}".encode()).digest()
        return int.from_bytes(h[:4], "little") & 0x7FFFFFFF


# --------------------------------------------------------------------------- profiles

_ADAPT_SUITES = [
    {"id": "spatial", "kind": "spatial", "n_tasks": 4},
    {"id": "goal", "kind": "goal", "n_tasks": 4},
    {"id": "object", "kind": "object", "n_tasks": 4},
    {"id": "living", "kind": "pretrain", "n_tasks": 4},
    {"id": "study", "kind": "pretrain", "n_tasks": 4},
    {"id": "long_horizon", "kind": "long_horizon", "n_tasks": 4},
]

PROFILES: dict[str, dict] = {
    "desk-defaults": {
        "policy": {"embed_dim": 64, "decoder_layers": 2, "decoder_heads": 4, "perception_layers": 2,
                   "perception_heads": 4, "perception_patches": 2, "perception_in_dim": 32,
                   "max_seq_len": 8, "max_prefix_len": 32, "mlp_ratio": 2},
        "adapter": {"roboadapter_size": 32},
        "train": {"epochs": 30, "long_horizon_epochs": 30, "batch_size": 64, "lr": 3e-3,
                  "warmup_steps": 20, "eval_every_epochs": 5},
        "bench": {"env": {"demo_noise": 0.1}, "suites": _ADAPT_SUITES},
        "curriculum": {"stages": ["spatial", "goal", "object"], "pretrain_epochs": 40},
    },
    "paper-defaults": {
        "policy": {"embed_dim": 768, "decoder_layers": 6, "decoder_heads": 8, "perception_layers": 12,
                   "perception_heads": 12, "perception_patches": 49, "perception_in_dim": 49 * 64,
                   "max_seq_len": 8, "max_prefix_len": 64, "mlp_ratio": 4, "film_hidden": 512,
                   "head_hidden": 512},
        "adapter": {"roboadapter_perception_layers": [0, 1, 5, 6, 10, 11]},
        "train": {"epochs": 100, "long_horizon_epochs": 50, "lr": 1e-4, "weight_decay": 0.1,
                  "warmup_steps": 500, "eval_every_epochs": 5},
        "bench": {"env": {"n_objects": 8, "embed_dim": 768, "perception_dim": 49 * 64, "horizon": 60,
                          "demo_noise": 0.1},
                  "pretrain": {"id": "pretrain", "kind": "pretrain", "n_tasks": 40},
                  "suites": [dict(s, n_tasks=8) for s in _ADAPT_SUITES]},
        "curriculum": {"stages": ["spatial", "goal", "object", "living", "study"], "pretrain_epochs": 100},
    },
}


def _merge(base: dict, over: Mapping) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, Mapping) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def build_config(doc: Mapping | None = None, profile: str | None = None) -> ExperimentConfig:
    """Validate a config document (optionally layered over a named profile)."""
    doc = dict(doc or {})
    top = {"profile", "policy", "adapter", "train", "bench", "curriculum"}
    unknown = set(doc) - top
    if unknown:
        raise ConfigError(f"unknown top-level keys {sorted(unknown)}")
    name = profile or doc.get("profile", "desk-defaults")
    if name not in PROFILES:
        raise ConfigError(f"unknown profile {name!r}; expected one of {sorted(PROFILES)}")
    d = _merge(PROFILES[name], {k: v for k, v in doc.items() if k != "profile"})

    try:
        policy = PolicySpec.from_dict(d.get("policy", {}))
    except (SpecError, TypeError) as exc:
        raise ConfigError(f"policy: {exc}") from exc
    try:
        adapter = AdapterSpec.from_dict(d.get("adapter", {}))
    except (AdapterConfigError, TypeError) as exc:
        raise ConfigError(f"adapter: {exc}") from exc
    train = _strict(TrainConfig, d.get("train", {}), "train")

    b = dict(d.get("bench", {}))
    unknown = set(b) - {"env", "seeds", "pretrain", "suites"}
    if unknown:
        raise ConfigError(f"bench: unknown keys {sorted(unknown)}")
    try:
        env = BenchConfig.from_dict(b.get("env", {}))
    except (BenchError, TypeError) as exc:
        raise ConfigError(f"bench.env: {exc}") from exc
    seeds = _strict(Seeds, b.get("seeds", {}), "bench.seeds")
    pre = _strict(SuiteDef, b.get("pretrain", asdict(BenchSection.pretrain)), "bench.pretrain")
    suites = tuple(_strict(SuiteDef, s, f"bench.suites[{i}]") for i, s in enumerate(b.get("suites", [])))
    ids = [pre.id] + [s.id for s in suites]
    if len(set(ids)) != len(ids):
        raise ConfigError(f"duplicate suite ids in {ids}")
    bench = BenchSection(env, seeds, pre, suites)

    c = dict(d.get("curriculum", {}))
    for k in ("stages", "seeds", "ranks"):
        if k in c:
            c[k] = tuple(c[k])
    cur = _strict(CurriculumSection, c, "curriculum")

    train = replace(train, seed=seeds.train_seed)
    cfg = ExperimentConfig(name, policy, adapter, train, bench, cur)
    validate(cfg)
    return cfg


def validate(cfg: ExperimentConfig) -> None:
    """Cross-section consistency checks."""
    p, e = cfg.policy, cfg.bench.env
    if e.embed_dim != p.embed_dim:
        raise ConfigError(f"bench.env.embed_dim {e.embed_dim} must equal policy.embed_dim {p.embed_dim}")
    if e.perception_dim != p.perception_in_dim:
        raise ConfigError(f"bench.env.perception_dim {e.perception_dim} must equal policy.perception_in_dim "
                          f"{p.perception_in_dim}")
    if p.state_dim != 3 or p.action_dim != 3:
        raise ConfigError("the bench emits 3-d proprio states and 3-d actions")
    if not 0 < e.n_train <= e.n_demos:
        raise ConfigError("need 0 < n_train <= n_demos")
    known = {s.id for s in cfg.bench.suites}
    for st in cfg.curriculum.stages:
        if st not in known:
            raise ConfigError(f"curriculum stage {st!r} is not a defined suite")
    for s in cfg.bench.suites:
        if s.kind == "object" and s.n_tasks > e.n_objects:
            raise ConfigError(f"suite {s.id!r}: object suites need n_tasks <= n_objects ({e.n_objects})")
    if cfg.adapter.methods:
        try:
            adapter_shapes(cfg.adapter, p)
        except AdapterConfigError as exc:
            raise ConfigError(f"adapter: {exc}") from exc
    if any(r < 1 for r in cfg.curriculum.ranks):
        raise ConfigError("ranks must be >= 1")
    from .continual import StrategyError, parse_strategy

    try:
        parse_strategy(cfg.curriculum.strategy, cfg.adapter)
    except StrategyError as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path: str | Path | None = None, profile: str | None = None) -> ExperimentConfig:
    if path is None:
        return build_config({}, profile)
    try:
        doc = json.loads(Path(path).read_text())
    except FileNotFoundError as exc:
        raise ConfigError(f"config file {path} not found") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
    return build_config(doc, profile)


def config_from_echo(echo: Mapping) -> ExperimentConfig:
    """Rebuild a config from its own ``to_dict`` output."""
    return build_config({k: v for k, v in echo.items()})


def profile_doc(name: str) -> dict:
    return build_config({}, name).to_dict()
