"""JSON run configuration with strict key checking.

Sections: ``cost``, ``scg``, ``loss``, ``probe``, ``toy``, ``bench`` plus a
``schema_version``. Missing keys take their defaults, unknown keys are
rejected. The ``loss`` section holds only the loss-specific fields; the
cost weights and the sparsification settings come from their own sections.
"""

from __future__ import annotations

import dataclasses
import enum
import json
from dataclasses import dataclass, field
from pathlib import Path

from .bench import BenchSpec
from .cost import CostWeights
from .losses import LossConfig
from .scg import ScgConfig
from .toytrainer import ToyConfig

SCHEMA_VERSION = 1


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ProbeConfig:
    """Probe used by ``assign`` and ``gradcheck``; toy runs use the ``toy.probe_*`` fields."""

    num_classes: int = 4
    hidden_dim: int = 256
    depth: int = 2
    heads: int = 1
    seed: int = 0
    box_freqs: int = 0
    tied_init: bool = False
    init_gain: float = 1.0
    pred_encoding: str = "logits"

    def __post_init__(self):
        if self.num_classes < 1 or self.hidden_dim < 1 or self.depth < 1 or self.heads < 1:
            raise ValueError("probe sizes must be positive")
        if self.hidden_dim % self.heads:
            raise ValueError("hidden_dim must be divisible by heads")

    def build(self):
        from .gtprobe import GtProbeParams

        return GtProbeParams.init(
            self.num_classes,
            self.hidden_dim,
            self.depth,
            self.heads,
            seed=self.seed,
            pred_encoding=self.pred_encoding,
            box_freqs=self.box_freqs,
            tied_init=self.tied_init,
            init_gain=self.init_gain,
        )


@dataclass(frozen=True)
class Config:
    cost: CostWeights = field(default_factory=CostWeights)
    scg: ScgConfig = field(default_factory=ScgConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    probe: ProbeConfig = field(default_factory=ProbeConfig)
    toy: ToyConfig = field(default_factory=ToyConfig)
    bench: BenchSpec = field(default_factory=BenchSpec)
    schema_version: int = SCHEMA_VERSION

    def __post_init__(self):
        # the loss always sees the cost weights and sparsification settings of this config
        object.__setattr__(self, "loss", dataclasses.replace(self.loss, cost=self.cost, scg=self.scg))


SECTIONS = {
    "cost": CostWeights,
    "scg": ScgConfig,
    "loss": LossConfig,
    "probe": ProbeConfig,
    "toy": ToyConfig,
    "bench": BenchSpec,
}
_NESTED_IN_LOSS = ("cost", "scg")


def _section_fields(name: str) -> list[str]:
    names = [f.name for f in dataclasses.fields(SECTIONS[name])]
    return [n for n in names if not (name == "loss" and n in _NESTED_IN_LOSS)]


def _plain(v):
    if isinstance(v, enum.Enum):
        return v.value
    if isinstance(v, tuple):
        return [_plain(x) for x in v]
    return v


def to_dict(cfg: Config) -> dict:
    out: dict = {"schema_version": cfg.schema_version}
    for name in SECTIONS:
        obj = getattr(cfg, name)
        out[name] = {k: _plain(getattr(obj, k)) for k in _section_fields(name)}
    return out


def from_dict(doc: dict) -> Config:
    if not isinstance(doc, dict):
        raise ConfigError("config must be a JSON object")
    unknown = set(doc) - set(SECTIONS) - {"schema_version"}
    if unknown:
        raise ConfigError(f"unknown config sections {sorted(unknown)}")
    version = doc.get("schema_version", SCHEMA_VERSION)
    if version != SCHEMA_VERSION:
        raise ConfigError(f"unsupported schema_version {version!r}, expected {SCHEMA_VERSION}")
    parts = {}
    for name, cls in SECTIONS.items():
        section = doc.get(name, {})
        if not isinstance(section, dict):
            raise ConfigError(f"section {name!r} must be an object")
        bad = set(section) - set(_section_fields(name))
        if bad:
            raise ConfigError(f"unknown keys in {name!r}: {sorted(bad)}")
        kwargs = dict(section)
        if name == "bench" and "grid" in kwargs:
            kwargs["grid"] = tuple(tuple(cell) for cell in kwargs["grid"])
        try:
            parts[name] = cls(**kwargs)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"invalid {name!r} section: {exc}") from exc
    return Config(**parts)


def load_config(path=None) -> Config:
    if path is None:
        return Config()
    try:
        text = Path(path).read_text()
    except OSError:
        raise
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: line {exc.lineno}: {exc.msg}") from exc
    return from_dict(doc)


def dump_config(cfg: Config, path) -> None:
    Path(path).write_text(json.dumps(to_dict(cfg), indent=2) + "\n")
