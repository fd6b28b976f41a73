"""Experiment configuration: one YAML (or JSON) tree, validated at load."""
from __future__ import annotations

import dataclasses
import json
import pathlib

import yaml

from .core import ConfigError
from .fusion import FusionConfig
from .impedance import ImpedanceParams
from .master import MasterConfig
from .residual import ResidualConfig
from .runtime import RateConfig
from .sim import TASK_FACTORIES, TaskSpec

_SECTIONS = ("task", "fusion", "master", "residual", "pbic", "rates", "seed", "demos", "hold", "out_dir")


@dataclasses.dataclass
class ExperimentConfig:
    task: TaskSpec
    fusion: FusionConfig
    master: MasterConfig
    residual: ResidualConfig
    pbic: ImpedanceParams
    rates: RateConfig
    seed: int = 0
    demos: int = 40
    hold: str = "linear"
    out_dir: str = "out"

    def validate(self):
        self.task.validate()
        self.fusion.validate()
        self.rates.validate()
        if self.hold not in ("linear", "zoh"):
            raise ConfigError(f"unknown hold scheme {self.hold!r}")
        if self.demos < 1:
            raise ConfigError("demos must be >= 1")
        return self

    def to_dict(self):
        return {
            "task": self.task.to_dict(),
            "fusion": self.fusion.to_dict(),
            "master": self.master.to_dict(),
            "residual": self.residual.to_dict(),
            "pbic": self.pbic.to_dict(),
            "rates": self.rates.to_dict(),
            "seed": self.seed,
            "demos": self.demos,
            "hold": self.hold,
            "out_dir": self.out_dir,
        }

    def save(self, path):
        path = pathlib.Path(path)
        if path.suffix == ".json":
            path.write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True))
        else:
            path.write_text(yaml.safe_dump(self.to_dict(), sort_keys=True))


def default_config(task_kind, **task_over) -> ExperimentConfig:
    """Tuned per-task defaults; reactive replanning everywhere, stronger
    force mixing on the pressing task."""
    if task_kind not in TASK_FACTORIES:
        raise ConfigError(f"unknown task kind {task_kind!r}")
    task = TASK_FACTORIES[task_kind](**task_over)
    master = MasterConfig(replan_every_step=True)
    pbic = ImpedanceParams.default()
    if task_kind == "wall_press":
        pbic = ImpedanceParams(
            stiffness=pbic.stiffness, damping=pbic.damping, admittance=pbic.admittance, k_f=0.25
        )
    return ExperimentConfig(
        task=task,
        fusion=FusionConfig(),
        master=master,
        residual=ResidualConfig(),
        pbic=pbic,
        rates=RateConfig(),
    ).validate()


def _build(tree) -> ExperimentConfig:
    if not isinstance(tree, dict):
        raise ConfigError("configuration root must be a mapping")
    unknown = set(tree) - set(_SECTIONS)
    if unknown:
        raise ConfigError(f"unknown configuration keys: {sorted(unknown)}")
    if "task" not in tree or "kind" not in tree["task"]:
        raise ConfigError("configuration must define task.kind")
    try:
        cfg = default_config(tree["task"]["kind"])
        cfg.task = TaskSpec.from_dict({**cfg.task.to_dict(), **tree["task"]})
        cfg.fusion = FusionConfig.from_dict({**cfg.fusion.to_dict(), **tree.get("fusion", {})})
        cfg.master = MasterConfig.from_dict({**cfg.master.to_dict(), **tree.get("master", {})})
        cfg.residual = ResidualConfig.from_dict({**cfg.residual.to_dict(), **tree.get("residual", {})})
        cfg.pbic = ImpedanceParams.from_dict({**cfg.pbic.to_dict(), **tree.get("pbic", {})})
        cfg.rates = RateConfig.from_dict({**cfg.rates.to_dict(), **tree.get("rates", {})})
    except TypeError as exc:
        raise ConfigError(f"bad configuration field: {exc}") from exc
    cfg.seed = int(tree.get("seed", cfg.seed))
    cfg.demos = int(tree.get("demos", cfg.demos))
    cfg.hold = tree.get("hold", cfg.hold)
    cfg.out_dir = tree.get("out_dir", cfg.out_dir)
    return cfg.validate()


def load_config(path) -> ExperimentConfig:
    path = pathlib.Path(path)
    if not path.exists():
        raise ConfigError(f"configuration file {path} does not exist")
    text = path.read_text()
    try:
        if path.suffix == ".json":
            tree = json.loads(text)
        else:
            tree = yaml.safe_load(text)
    except (json.JSONDecodeError, yaml.YAMLError) as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from exc
    return _build(tree)
