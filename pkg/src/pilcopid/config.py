"""Experiment configuration: one JSON document holding every knob of a run."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields

from .distill import DistillConfig
from .plant import Disturbance, PlantParams
from .policy_search import CostConfig, LoopConfig

SWEEP_DEFAULT = ((0.15, 0.5), (0.2, 0.6), (0.3, 0.75))


class ConfigError(ValueError):
    pass


@dataclass
class ExpertDataConfig:
    n_rollouts: int = 30
    horizon: int = 200
    init_std: tuple = (0.05, 0.05, 0.1, 0.1)
    randomize_params: bool = True
    kde_resolution: int = 80


@dataclass
class RoaConfig:
    theta_range: tuple = (-0.6, 0.6)
    theta_dot_range: tuple = (-2.0, 2.0)
    resolution: tuple = (41, 41)
    horizon: int = 200
    tail_tol: float = 0.05
    n_boundary: int = 32


@dataclass
class EvalConfig:
    theta0: float = 0.1
    horizon: int = 200
    settle_tol: float = 0.05
    recovery_window: float = 5.0
    noise: bool = False
    sweep: tuple = SWEEP_DEFAULT
    anti_windup: bool = False


def _from(cls, d):
    if d is None:
        return cls()
    names = {f.name for f in fields(cls)}
    unknown = set(d) - names
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    d = {k: tuple(tuple(x) if isinstance(x, list) else x for x in v) if isinstance(v, list) else v for k, v in d.items()}
    return cls(**d)


@dataclass
class ExperimentConfig:
    seed: int = 0
    plant: PlantParams = field(default_factory=PlantParams)
    cost: CostConfig = field(default_factory=CostConfig)
    loop: LoopConfig = field(default_factory=LoopConfig)
    distill: DistillConfig = field(default_factory=lambda: DistillConfig(integral=False))
    expert: ExpertDataConfig = field(default_factory=ExpertDataConfig)
    roa: RoaConfig = field(default_factory=RoaConfig)
    evaluate: EvalConfig = field(default_factory=EvalConfig)
    matched: Disturbance = field(default_factory=lambda: Disturbance("matched", "impulse", 5.0, 2.0))
    unmatched: Disturbance = field(default_factory=lambda: Disturbance("unmatched", "impulse", 0.5, 2.0))

    def __post_init__(self):
        if not isinstance(self.seed, int) or isinstance(self.seed, bool):
            raise ConfigError("seed must be an explicit integer")
        if self.matched.channel != "matched" or self.unmatched.channel != "unmatched":
            raise ConfigError("disturbance channels do not match their slots")
        if self.expert.n_rollouts < 1 or self.roa.horizon < 1 or self.evaluate.horizon < 1:
            raise ConfigError("rollout counts and horizons must be positive")

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "plant": self.plant.to_dict(),
            "cost": self.cost.to_dict(),
            "loop": self.loop.to_dict(),
            "distill": asdict(self.distill),
            "expert": asdict(self.expert),
            "roa": asdict(self.roa),
            "evaluate": asdict(self.evaluate),
            "matched": asdict(self.matched),
            "unmatched": asdict(self.unmatched),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown config sections: {sorted(unknown)}")
        try:
            return cls(
                seed=d.get("seed", 0),
                plant=PlantParams.from_dict(d["plant"]) if "plant" in d else PlantParams(),
                cost=CostConfig.from_dict(d["cost"]) if "cost" in d else CostConfig(),
                loop=LoopConfig.from_dict(d["loop"]) if "loop" in d else LoopConfig(),
                distill=_from(DistillConfig, d.get("distill")),
                expert=_from(ExpertDataConfig, d.get("expert")),
                roa=_from(RoaConfig, d.get("roa")),
                evaluate=_from(EvalConfig, d.get("evaluate")),
                matched=_from(Disturbance, d.get("matched")) if "matched" in d else cls().matched,
                unmatched=_from(Disturbance, d.get("unmatched")) if "unmatched" in d else cls().unmatched,
            )
        except ConfigError:
            raise
        except (TypeError, ValueError, KeyError) as exc:
            raise ConfigError(f"invalid configuration: {exc}") from exc

    def save(self, path) -> None:
        with open(path, "w") as f:
            json.dump(self.to_dict(), f, indent=1)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            with open(path) as f:
                return cls.from_dict(json.load(f))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
