"""Experiment configuration, presets and ablation variants."""
from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass, field, asdict, fields
from pathlib import Path

from ..blocks import BlockConfig
from ..linmaps import SpectralBounds
from ..objective import LossWeights
from ..ssm import ModelClass, SSMConfig

__all__ = ["ExperimentConfig", "preset_config", "unconstrained_baseline", "ABLATIONS",
           "ablate", "apply_overrides"]

SYSTEMS = ("cstr", "twotank", "aero", "linear", "file")


@dataclass
class ExperimentConfig:
    """Everything needed to reproduce one training run.

    ``bounds_margin``/``fu_limit`` set the constraint boxes: outputs may range
    over the training data span widened by ``bounds_margin`` on each side,
    input contributions f_u(u) over ``[-fu_limit, fu_limit]``.  ``batch_size``
    of None trains on all training windows at every step.
    """

    system: str = "twotank"
    model_class: str = "hammerstein"
    observer: BlockConfig = field(default_factory=lambda: BlockConfig(kind="rmlp", layers=2, nodes=40))
    nonlinear: BlockConfig = field(default_factory=lambda: BlockConfig(kind="rmlp", layers=3, nodes=40))
    linmap: str = "linear"
    bounds: SpectralBounds | None = None
    nx: int | None = None
    weights: LossWeights = field(default_factory=LossWeights)
    bounds_margin: float = 0.05
    fu_limit: float = 1.0
    lr: float = 1e-3
    weight_decay: float = 0.01
    horizon: int = 16
    n_p: int = 1
    seed: int = 0
    max_steps: int = 10_000
    batch_size: int | None = None
    window_stride: int = 1
    eval_every: int = 100
    normalize: bool = True
    data: dict = field(default_factory=dict)
    name: str = ""

    def __post_init__(self):
        if self.system not in SYSTEMS:
            raise ValueError(f"system must be one of {SYSTEMS}, got {self.system!r}")
        self.model_class = ModelClass.parse(self.model_class).value
        if isinstance(self.observer, dict):
            self.observer = BlockConfig(**self.observer)
        if isinstance(self.nonlinear, dict):
            self.nonlinear = BlockConfig(**self.nonlinear)
        if isinstance(self.weights, dict):
            self.weights = LossWeights(**self.weights)
        if isinstance(self.bounds, (list, tuple)):
            self.bounds = SpectralBounds(*self.bounds)
        elif isinstance(self.bounds, dict):
            self.bounds = SpectralBounds(**self.bounds)
        if self.horizon < 1 or self.n_p < 1:
            raise ValueError("horizon and n_p must be >= 1")
        if self.max_steps < 0 or self.eval_every < 1:
            raise ValueError("max_steps must be >= 0 and eval_every >= 1")
        if self.lr <= 0:
            raise ValueError("lr must be positive")

    def to_dict(self) -> dict:
        d = {}
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, BlockConfig):
                v = v.to_dict()
            elif isinstance(v, LossWeights):
                v = v.as_dict()
            elif isinstance(v, SpectralBounds):
                v = [v.lambda_min, v.lambda_max]
            elif isinstance(v, dict):
                v = copy.deepcopy(v)
            d[f.name] = v
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys {sorted(unknown)}")
        return cls(**copy.deepcopy(d))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def save(self, path) -> None:
        Path(path).write_text(self.to_json())

    def config_hash(self) -> str:
        """Digest of every setting except the display ``name``."""
        d = self.to_dict()
        d.pop("name")
        blob = json.dumps(d, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def replace(self, **changes) -> "ExperimentConfig":
        d = self.to_dict()
        d.update(changes)
        return ExperimentConfig.from_dict(d)

    def ssm_config(self, ny: int, nu: int) -> SSMConfig:
        return SSMConfig(model_class=self.model_class, ny=ny, nu=nu, nx=self.nx, n_p=self.n_p,
                         nonlinear=copy.deepcopy(self.nonlinear), observer=copy.deepcopy(self.observer),
                         linmap=self.linmap, bounds=self.bounds)


def preset_config(system: str, **overrides) -> ExperimentConfig:
    """Best-observed configuration for ``system`` (cstr, twotank or aero)."""
    if system == "cstr":
        cfg = ExperimentConfig(
            system="cstr", model_class="blocknonlinear",
            observer=BlockConfig(kind="rnn", layers=2, nodes=60, activation="gelu"),
            nonlinear=BlockConfig(kind="rmlp", layers=6, nodes=60, activation="gelu"),
            linmap="linear", lr=1e-4, horizon=64, n_p=1,
            weights=LossWeights(Q_y=0.5, Q_dx=0.2, Q_con_y=0.2, Q_con_fu=0.1))
    elif system == "twotank":
        cfg = ExperimentConfig(
            system="twotank", model_class="hammerstein",
            observer=BlockConfig(kind="rmlp", layers=3, nodes=40, activation="gelu"),
            nonlinear=BlockConfig(kind="rmlp", layers=3, nodes=40, activation="gelu"),
            linmap="linear", lr=3e-4, horizon=64, n_p=4,
            weights=LossWeights(Q_y=0.5, Q_dx=0.3, Q_con_y=0.3, Q_con_fu=0.1))
    elif system == "aero":
        bounds = SpectralBounds(0.4, 0.7)
        cfg = ExperimentConfig(
            system="aero", model_class="unstructured",
            observer=BlockConfig(kind="rnn", layers=2, nodes=25, activation="blu"),
            nonlinear=BlockConfig(kind="rmlp", layers=2, nodes=25, activation="blu",
                                  linmap="spectral", bounds=bounds),
            linmap="spectral", bounds=bounds, lr=0.01, horizon=16, n_p=2,
            weights=LossWeights(Q_y=0.5, Q_dx=0.2, Q_con_y=0.2, Q_con_fu=0.0))
    else:
        raise ValueError(f"no preset for system {system!r}")
    cfg.name = f"{system}-best"
    return cfg.replace(**overrides) if overrides else cfg


def _strip_priors(cfg: ExperimentConfig) -> dict:
    return {"linmap": "linear", "bounds": None,
            "nonlinear": {**cfg.nonlinear.to_dict(), "linmap": "linear", "bounds": None}}


def _no_penalties(cfg: ExperimentConfig) -> dict:
    w = cfg.weights.as_dict()
    w.update(Q_dx=0.0, Q_con_y=0.0, Q_con_fu=0.0)
    return {"weights": w}


def unconstrained_baseline(cfg: ExperimentConfig) -> ExperimentConfig:
    """Unstructured model trained on the N-step loss alone, without map priors."""
    return cfg.replace(model_class="unstructured", name=f"{cfg.name}/-All*",
                       **_strip_priors(cfg), **_no_penalties(cfg))


def _zero(term):
    def change(cfg):
        w = cfg.weights.as_dict()
        w[term] = 0.0
        return {"weights": w}
    return change


ABLATIONS = {
    "All": lambda cfg: {},
    "-Q_con_y": _zero("Q_con_y"),
    "-Q_dx": _zero("Q_dx"),
    "-Q_con_fu": _zero("Q_con_fu"),
    "-linmap": _strip_priors,
    "-All": _no_penalties,
    "-All*": lambda cfg: {"model_class": "unstructured", **_strip_priors(cfg), **_no_penalties(cfg)},
}


def ablate(cfg: ExperimentConfig, cell: str) -> ExperimentConfig:
    """The ablation variant ``cell`` of ``cfg`` (see :data:`ABLATIONS`)."""
    try:
        changes = ABLATIONS[cell](cfg)
    except KeyError:
        raise ValueError(f"unknown ablation {cell!r}; choose from {list(ABLATIONS)}") from None
    return cfg.replace(name=f"{cfg.name}/{cell}", **changes)


def apply_overrides(cfg: ExperimentConfig, overrides: dict) -> ExperimentConfig:
    """Set dotted keys such as ``"weights.Q_dx"`` or ``"nonlinear.nodes"``."""
    d = cfg.to_dict()
    for key, value in overrides.items():
        target = d
        parts = key.split(".")
        for part in parts[:-1]:
            if part not in target or not isinstance(target[part], dict):
                raise KeyError(f"bad override key {key!r}")
            target = target[part]
        if parts[-1] not in target:
            raise KeyError(f"bad override key {key!r}")
        target[parts[-1]] = value
    return ExperimentConfig.from_dict(d)
