"""Run configuration: alignment hyperparameters, synthetic scenario, training, paths.

A config is one JSON document with four sections. Unknown keys anywhere are
rejected with :class:`~fuzzyalign.errors.ConfigInvalid` naming the field.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .errors import ConfigInvalid

VARIANTS = ("baseline_sdm", "cda", "cda_fta", "fta_unweighted")


@dataclass
class AlignmentConfig:
    k: float = 1.0
    tau: float = 0.02
    eps: float = 1e-8
    num_queries: int = 4
    dim: int = 16
    crossformer_depth: int = 2
    ffn_mult: int = 4
    sigma_hidden: int = 0  # 0 -> dim // 2
    fta_weight: float = 0.02
    eval_token_weight: float = 0.2
    seed: int = 0

    def validate(self, prefix="alignment"):
        _positive(self, prefix, "k", "tau", "num_queries", "dim", "ffn_mult")
        _nonneg(self, prefix, "eps", "crossformer_depth", "sigma_hidden", "fta_weight",
                "eval_token_weight", "seed")


@dataclass
class ScenarioConfig:
    num_identities: int = 120
    text_per_identity: int = 2
    aerial_per_identity: int = 2
    ground_per_identity: int = 1
    dim: int = 16
    tokens_per_sample: int = 9
    attribute_pool_size: int = 64
    text_noise_scale: float = 0.3
    ground_noise_scale: float = 0.75
    aerial_noise_scale: float = 1.5
    token_noise_scale: float = 0.3
    token_dropout_prob: float = 0.5
    altitude_spread: float = 0.5
    view_rank: int = 4  # aerial noise lives in a fixed subspace of this rank; 0 = isotropic
    include_ground: bool = True
    test_fraction: float = 0.5
    seed: int = 0

    def validate(self, prefix="scenario"):
        _positive(self, prefix, "num_identities", "text_per_identity", "aerial_per_identity",
                  "ground_per_identity", "dim", "tokens_per_sample", "attribute_pool_size")
        _nonneg(self, prefix, "text_noise_scale", "ground_noise_scale", "aerial_noise_scale",
                "token_noise_scale", "seed", "view_rank")
        if self.view_rank > self.dim:
            raise ConfigInvalid(f"{prefix}.view_rank", "must be <= dim")
        if self.aerial_noise_scale < self.ground_noise_scale:
            raise ConfigInvalid(f"{prefix}.aerial_noise_scale", "must be >= ground_noise_scale")
        if not 0.0 <= self.token_dropout_prob < 1.0:
            raise ConfigInvalid(f"{prefix}.token_dropout_prob", "must lie in [0, 1)")
        if not 0.0 <= self.altitude_spread <= 1.0:
            raise ConfigInvalid(f"{prefix}.altitude_spread", "must lie in [0, 1]")
        if not 0.0 < self.test_fraction < 1.0:
            raise ConfigInvalid(f"{prefix}.test_fraction", "must lie in (0, 1)")
        if self.num_identities < 4:
            raise ConfigInvalid(f"{prefix}.num_identities", "need at least 4 identities to split")


@dataclass
class TrainingConfig:
    variant: str = "cda_fta"
    steps: int = 200
    batch_size: int = 24
    lr: float = 0.05
    clip_norm: float = 1.0  # 0 disables clipping
    seed: int = 0

    def validate(self, prefix="training"):
        if self.variant not in VARIANTS:
            raise ConfigInvalid(f"{prefix}.variant", f"must be one of {', '.join(VARIANTS)}")
        _positive(self, prefix, "steps", "lr")
        _nonneg(self, prefix, "clip_norm", "seed")
        if self.batch_size < 2:
            raise ConfigInvalid(f"{prefix}.batch_size", "must be >= 2")


@dataclass
class PathsConfig:
    world_dir: str = "world"
    out_dir: str = "runs"

    def validate(self, prefix="paths"):
        pass


@dataclass
class RunConfig:
    alignment: AlignmentConfig = field(default_factory=AlignmentConfig)
    scenario: ScenarioConfig = field(default_factory=ScenarioConfig)
    training: TrainingConfig = field(default_factory=TrainingConfig)
    paths: PathsConfig = field(default_factory=PathsConfig)

    def validate(self):
        for f in fields(self):
            getattr(self, f.name).validate(f.name)
        return self

    def to_dict(self):
        return asdict(self)

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def hash(self):
        canon = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode()).hexdigest()

    @classmethod
    def from_dict(cls, data):
        if not isinstance(data, dict):
            raise ConfigInvalid("<root>", "config must be a JSON object")
        sections = {f.name: f.default_factory for f in fields(cls)}
        unknown = set(data) - set(sections)
        if unknown:
            raise ConfigInvalid(sorted(unknown)[0], "unknown section")
        kwargs = {name: _section(factory, data.get(name, {}), name) for name, factory in sections.items()}
        return cls(**kwargs).validate()

    @classmethod
    def from_json(cls, text):
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigInvalid("<root>", f"invalid JSON: {exc}") from None
        return cls.from_dict(data)

    @classmethod
    def load(cls, path):
        return cls.from_json(Path(path).read_text())


def _section(factory, data, name):
    if not isinstance(data, dict):
        raise ConfigInvalid(name, "section must be a JSON object")
    proto = factory()
    known = {f.name: f for f in fields(proto)}
    for key, value in data.items():
        if key not in known:
            raise ConfigInvalid(f"{name}.{key}", "unknown key")
        setattr(proto, key, _coerce(value, type(getattr(proto, key)), f"{name}.{key}"))
    return proto


def _coerce(value, kind, where):
    if kind is bool:
        if not isinstance(value, bool):
            raise ConfigInvalid(where, f"expected a boolean, got {value!r}")
        return value
    if isinstance(value, bool):
        raise ConfigInvalid(where, f"expected {kind.__name__}, got a boolean")
    if kind is int:
        if isinstance(value, float) and value.is_integer():
            value = int(value)
        if not isinstance(value, int):
            raise ConfigInvalid(where, f"expected an integer, got {value!r}")
        return value
    if kind is float:
        if not isinstance(value, (int, float)):
            raise ConfigInvalid(where, f"expected a number, got {value!r}")
        return float(value)
    if kind is str:
        if not isinstance(value, str):
            raise ConfigInvalid(where, f"expected a string, got {value!r}")
        return value
    return value


def _positive(obj, prefix, *names):
    for n in names:
        if not getattr(obj, n) > 0:
            raise ConfigInvalid(f"{prefix}.{n}", "must be > 0")


def _nonneg(obj, prefix, *names):
    for n in names:
        if getattr(obj, n) < 0:
            raise ConfigInvalid(f"{prefix}.{n}", "must be >= 0")
