"""Experiment configuration: a flat ``key: value`` YAML file with documented defaults."""

import math
import os
from dataclasses import asdict, dataclass, field, fields

import yaml

from .cil import Arm, CilSettings, make_split
from .exceptions import MissingKeyError, OutOfRangeError, UnknownKeyError
from .network import TrainConfig
from .propel import PropelConfig
from .protoguard import ModelConfig


@dataclass
class RunConfig:
    """Every knob of a run.  Unset keys take the defaults below."""

    # data: scene spec file (None means the built-in benchmark) or explicit cloud files
    scene: str = None
    train_clouds: list = None
    test_clouds: list = None
    n_train_scenes: int = 3
    n_test_scenes: int = 1
    # split plan
    split_order: str = "S0"
    n_base: int = 4
    step_sizes: list = field(default_factory=lambda: [2])
    arm: str = "FT+PG+PRO"
    # features and model
    k: int = 16
    hidden: int = 16
    embed_dim: int = 16
    proto_dim: int = 8
    fused_dim: int = 16
    use_prototypes: bool = True
    momentum_a: float = 1.0
    momentum_b: float = 0.0
    m_min: float = 0.01
    m_max: float = 0.5
    learnable_momentum: bool = True
    momentum_direction: str = "increasing"
    # pseudo-labelling
    passes: int = 8
    subset: int = None
    sigma: float = None
    tau0: float = None
    gamma: float = 0.5
    tau_min: float = None
    tau_max: float = None
    balance_classes: bool = True
    # optimisation
    learning_rate: float = 0.5
    epochs: int = 100
    batch_points: int = 0
    l2: float = 0.0
    novel_learning_rate: float = None
    novel_epochs: int = 10
    # output
    out_dir: str = None
    seed: int = 0

    def train_config(self):
        return TrainConfig(self.learning_rate, self.epochs, self.batch_points, self.l2, self.seed)

    def novel_train_config(self):
        lr = self.learning_rate if self.novel_learning_rate is None else self.novel_learning_rate
        ep = self.epochs if self.novel_epochs is None else self.novel_epochs
        return TrainConfig(lr, ep, self.batch_points, self.l2, self.seed)

    def model_config(self):
        return ModelConfig(
            k=self.k,
            hidden=self.hidden,
            embed_dim=self.embed_dim,
            proto_dim=self.proto_dim,
            fused_dim=self.fused_dim,
            use_prototypes=self.use_prototypes,
            momentum_a=self.momentum_a,
            momentum_b=self.momentum_b,
            m_min=self.m_min,
            m_max=self.m_max,
            learnable_momentum=self.learnable_momentum,
            momentum_direction=self.momentum_direction,
        )

    def propel_config(self):
        return PropelConfig(
            passes=self.passes,
            k=self.k,
            subset=self.subset,
            sigma=self.sigma,
            tau0=self.tau0,
            gamma=self.gamma,
            tau_min=self.tau_min,
            tau_max=self.tau_max,
            seed=self.seed,
            balance_classes=self.balance_classes,
        )

    def settings(self):
        return CilSettings(self.train_config(), self.model_config(), self.propel_config(), self.novel_train_config())

    def plan(self, n_classes):
        """Split plan for a scene with ``n_classes``; inconsistencies name the offending key."""
        if self.n_base + sum(self.step_sizes) != n_classes:
            raise OutOfRangeError("step_sizes", f"n_base + sum(step_sizes) must equal {n_classes}")
        return make_split(n_classes, self.split_order, self.n_base, self.step_sizes, self.seed)

    def to_dict(self):
        return asdict(self)


_INT = {"n_train_scenes", "n_test_scenes", "n_base", "k", "hidden", "embed_dim", "proto_dim", "fused_dim"}
_INT |= {"passes", "epochs", "batch_points", "seed"}
_OPT_INT = {"subset", "novel_epochs"}
_FLOAT = {"momentum_a", "momentum_b", "m_min", "m_max", "gamma", "learning_rate", "l2"}
_OPT_FLOAT = {"sigma", "tau0", "tau_min", "tau_max", "novel_learning_rate"}
_BOOL = {"use_prototypes", "learnable_momentum", "balance_classes"}
_OPT_STR = {"scene", "out_dir"}
_STR_LIST = {"train_clouds", "test_clouds"}


def _coerce(key, value):
    if key in _BOOL:
        if not isinstance(value, bool):
            raise OutOfRangeError(key, "expected true or false")
        return value
    if value is None:
        if key in _OPT_INT | _OPT_FLOAT | _OPT_STR | _STR_LIST:
            return None
        raise OutOfRangeError(key, "value may not be empty")
    if key in _INT | _OPT_INT:
        if isinstance(value, bool) or not isinstance(value, int):
            raise OutOfRangeError(key, "expected an integer")
        return int(value)
    if key in _FLOAT | _OPT_FLOAT:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise OutOfRangeError(key, "expected a number")
        value = float(value)
        if not math.isfinite(value):
            raise OutOfRangeError(key, "must be finite")
        return value
    if key in _STR_LIST:
        if isinstance(value, str):
            value = [value]
        if not isinstance(value, list) or not value or not all(isinstance(v, str) for v in value):
            raise OutOfRangeError(key, "expected a non-empty list of paths")
        return list(value)
    if key == "step_sizes":
        if isinstance(value, int) and not isinstance(value, bool):
            value = [value]
        if not isinstance(value, list) or not value or not all(isinstance(v, int) and not isinstance(v, bool) for v in value):
            raise OutOfRangeError(key, "expected a non-empty list of integers")
        return [int(v) for v in value]
    if not isinstance(value, str):
        raise OutOfRangeError(key, "expected a string")
    return value


def _check_ranges(cfg):
    positive = ("k", "hidden", "embed_dim", "proto_dim", "fused_dim", "passes", "n_train_scenes", "n_test_scenes", "n_base")
    for key in positive:
        if getattr(cfg, key) < 1:
            raise OutOfRangeError(key, "must be >= 1")
    if cfg.k < 3:
        raise OutOfRangeError("k", "normals need k >= 3")
    if cfg.passes < 2:
        raise OutOfRangeError("passes", "uncertainty needs at least 2 passes")
    for key in ("epochs", "batch_points", "seed"):
        if getattr(cfg, key) < 0:
            raise OutOfRangeError(key, "must be >= 0")
    if cfg.novel_epochs is not None and cfg.novel_epochs < 0:
        raise OutOfRangeError("novel_epochs", "must be >= 0")
    for key in ("learning_rate", "novel_learning_rate", "sigma", "tau0"):
        v = getattr(cfg, key)
        if v is not None and v <= 0:
            raise OutOfRangeError(key, "must be > 0")
    for key in ("l2", "gamma"):
        if getattr(cfg, key) < 0:
            raise OutOfRangeError(key, "must be >= 0")
    if any(s < 1 for s in cfg.step_sizes):
        raise OutOfRangeError("step_sizes", "every step must add >= 1 class")
    if cfg.subset is not None and not 1 <= cfg.subset <= cfg.k:
        raise OutOfRangeError("subset", "must lie in 1..k")
    if not 0.0 <= cfg.m_min <= 1.0:
        raise OutOfRangeError("m_min", "must lie in [0, 1]")
    if not cfg.m_min <= cfg.m_max <= 1.0:
        raise OutOfRangeError("m_max", "must lie in [m_min, 1]")
    if cfg.tau_min is not None and cfg.tau_min <= 0:
        raise OutOfRangeError("tau_min", "must be > 0")
    if cfg.tau_min is not None and cfg.tau_max is not None and cfg.tau_max < cfg.tau_min:
        raise OutOfRangeError("tau_max", "must be >= tau_min")
    if cfg.momentum_direction not in ("increasing", "decreasing"):
        raise OutOfRangeError("momentum_direction", "must be 'increasing' or 'decreasing'")
    if cfg.split_order.upper() not in ("S0", "S1"):
        raise OutOfRangeError("split_order", "must be S0 or S1")
    try:
        Arm(cfg.arm)
    except ValueError:
        raise OutOfRangeError("arm", f"must be one of {[a.value for a in Arm]}") from None
    if (cfg.train_clouds is None) != (cfg.test_clouds is None):
        raise MissingKeyError("test_clouds" if cfg.test_clouds is None else "train_clouds")
    if cfg.train_clouds is not None and cfg.scene is not None:
        raise OutOfRangeError("scene", "give either a scene spec or explicit cloud files, not both")


def config_from_dict(data):
    """Validate a mapping of overrides and fill every other field with its default."""
    data = {} if data is None else data
    if not isinstance(data, dict):
        raise OutOfRangeError("<root>", "config file must be a key: value mapping")
    known = {f.name for f in fields(RunConfig)}
    for key in data:
        if key not in known:
            raise UnknownKeyError(key)
    values = {key: _coerce(key, value) for key, value in data.items()}
    cfg = RunConfig(**values)
    _check_ranges(cfg)
    return cfg


def parse_config(path):
    """Read and validate a config file; relative data paths resolve against its directory."""
    with open(path, encoding="utf-8") as fh:
        try:
            data = yaml.safe_load(fh)
        except yaml.YAMLError as exc:
            raise OutOfRangeError("<root>", f"not valid YAML: {exc}") from None
    cfg = config_from_dict(data)
    root = os.path.dirname(os.path.abspath(path))

    def resolve(p):
        return p if p is None or os.path.isabs(p) else os.path.normpath(os.path.join(root, p))

    cfg.scene = resolve(cfg.scene)
    cfg.out_dir = resolve(cfg.out_dir)
    if cfg.train_clouds is not None:
        cfg.train_clouds = [resolve(p) for p in cfg.train_clouds]
        cfg.test_clouds = [resolve(p) for p in cfg.test_clouds]
    return cfg


def dump_config(cfg):
    """Effective config as YAML text; parsing it back yields an equal RunConfig."""
    return yaml.safe_dump(cfg.to_dict(), sort_keys=True, default_flow_style=None)


def write_effective_config(cfg, path):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(dump_config(cfg))
