"""Pipeline configuration: one JSON document with full defaults."""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field, fields

import numpy as np

from .graph import GraphConfig
from .losses import LossWeights
from .optim import DriftConfig, PretrainConfig, ScheduleConfig
from .scene import ConfigError, SceneConfig
from .uncertainty import UncertaintyConfig

STAGES = ("scene", "pretrain", "drift", "optimize")


@dataclass
class EvalConfig:
    pck_fraction: float = 0.05
    pck_abs: float | None = None


@dataclass
class PipelineConfig:
    scene: SceneConfig = field(default_factory=SceneConfig)
    uncertainty: UncertaintyConfig = field(default_factory=UncertaintyConfig)
    graph: GraphConfig = field(default_factory=GraphConfig)
    losses: LossWeights = field(default_factory=LossWeights)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    drift: DriftConfig = field(default_factory=DriftConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    seed: int = 0
    output_dir: str = "out"

    def to_dict(self):
        return _encode(self)

    @classmethod
    def from_dict(cls, d):
        return _decode(cls, d, "")

    def to_json(self):
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)

    @classmethod
    def from_json(cls, text):
        return cls.from_dict(json.loads(text))

    def hash(self):
        """Short sha256 of the canonical serialization, ignoring the output directory."""
        d = self.to_dict()
        d.pop("output_dir")
        blob = json.dumps(d, sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def stage_seed(self, stage):
        """Seed of one pipeline stage, split from the root seed.  The scene uses the root seed."""
        if stage == "scene":
            return int(self.seed)
        ss = np.random.SeedSequence([int(self.seed), STAGES.index(stage)])
        return int(ss.generate_state(1, dtype=np.uint32)[0])

    def resolved(self):
        """Copy with every stage seed filled in from the root seed."""
        c = PipelineConfig.from_dict(self.to_dict())
        c.scene.seed = c.stage_seed("scene")
        c.pretrain.seed = c.stage_seed("pretrain")
        c.drift.seed = c.stage_seed("drift")
        c.schedule.seed = c.stage_seed("optimize")
        return c

    def validate(self):
        self.scene.validate()
        self.uncertainty.validate()
        self.graph.validate()
        self.losses.validate()
        self.schedule.validate()


def _encode(obj):
    if dataclasses.is_dataclass(obj):
        return {f.name: _encode(getattr(obj, f.name)) for f in fields(obj)}
    if isinstance(obj, tuple):
        return [_encode(x) for x in obj]
    return obj


def _decode(cls, d, path):
    if not isinstance(d, dict):
        raise ConfigError(f"{path or 'config'}: expected an object")
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(d) - set(known))
    if unknown:
        raise ConfigError(f"unknown config keys at {path or 'top level'}: {unknown}")
    defaults = cls()
    kw = {}
    for name, val in d.items():
        cur = getattr(defaults, name)
        sub = f"{path}.{name}" if path else name
        if dataclasses.is_dataclass(cur):
            kw[name] = _decode(type(cur), val, sub)
        elif isinstance(cur, tuple):
            kw[name] = tuple(val)
        else:
            kw[name] = val
    return cls(**kw)


def apply_override(cfg: PipelineConfig, assignment: str) -> PipelineConfig:
    """Apply one `dotted.key=value` override (value parsed as JSON, else taken as a string)."""
    if "=" not in assignment:
        raise ConfigError(f"override {assignment!r} is not of the form key=value")
    key, raw = assignment.split("=", 1)
    try:
        val = json.loads(raw)
    except json.JSONDecodeError:
        val = raw
    d = cfg.to_dict()
    node = d
    parts = key.strip().split(".")
    for p in parts[:-1]:
        if p not in node or not isinstance(node[p], dict):
            raise ConfigError(f"unknown config key {key!r}")
        node = node[p]
    if parts[-1] not in node:
        raise ConfigError(f"unknown config key {key!r}")
    node[parts[-1]] = val
    return PipelineConfig.from_dict(d)
