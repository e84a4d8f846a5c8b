"""TOML experiment configuration with field-path validation.

Every error names the offending field (``solver.reg_beta: grid must be
nonempty``) so the CLI can report it and exit with the config-error code.
Randomness derives from the single top-level ``seed`` plus stage tags.
"""

from __future__ import annotations

import hashlib
import json
import os
import sys
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .variants import VARIANTS
from .witness import parse_leak_mode, parse_thr_mode

DATA_ROOT_ENV = "CVXSNN_DATA_ROOT"
TASKS = ("addition", "xor", "mnist")


class ConfigError(ValueError):
    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}" if path else message)
        self.path = path


@dataclass(frozen=True)
class TaskConfig:
    name: str = "addition"
    base: int = 2
    n_digits: int = 5
    T: int = 6
    encoding: str = "scalar"
    loss: str = ""
    lam_sum: float = 1.0
    lam_carry: tuple = (1.0,)
    ramp: bool = True
    sizes: dict = field(default_factory=dict)
    images: str = ""
    labels: str = ""
    test_images: str = ""
    test_labels: str = ""


@dataclass(frozen=True)
class ArchConfig:
    widths: tuple = (256, 512)
    K: int = 2


@dataclass(frozen=True)
class WitnessConfig:
    M: int = 2
    leak_mode: str = "fixed:0.9"
    thr_mode: str = "fixed:1.0"


@dataclass(frozen=True)
class SolverConfig:
    reg_beta: tuple = (0.01, 0.1, 0.5, 1.0, 5.0, 10.0)
    tol: float = 1e-6
    max_iter: int = 3000
    penalty: str = "group"
    rule: str = "masked"


@dataclass(frozen=True)
class SgConfig:
    lr: tuple = (1e-3, 5e-3, 1e-2, 1e-1)
    epochs: int = 100
    finetune_epochs: int = 100
    batch_size: int = 128
    slope: float = 25.0
    reg: float = 0.0


@dataclass(frozen=True)
class EvalConfig:
    mode: str = "tf"
    ood_lengths: tuple = ()
    select_metric: str = "tf_joint_token"


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    variant: str = "cvx"
    output_dir: str = "runs"
    workers: int = 1
    task: TaskConfig = field(default_factory=TaskConfig)
    arch: ArchConfig = field(default_factory=ArchConfig)
    witness: WitnessConfig = field(default_factory=WitnessConfig)
    solver: SolverConfig = field(default_factory=SolverConfig)
    sg: SgConfig = field(default_factory=SgConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    source: str = ""

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("source")
        return d

    def digest(self, *sections: str) -> str:
        """Hash of the named sections (all but ``output_dir``/``workers`` when none given)."""
        d = self.to_dict()
        keep = sections or tuple(k for k in d if k not in ("output_dir", "workers"))
        blob = json.dumps({k: d[k] for k in keep}, sort_keys=True, default=list).encode()
        return hashlib.sha256(blob).hexdigest()


_SECTIONS = {"task": TaskConfig, "arch": ArchConfig, "witness": WitnessConfig, "solver": SolverConfig,
             "sg": SgConfig, "eval": EvalConfig}
_GRIDS = {("task", "lam_carry"), ("solver", "reg_beta"), ("sg", "lr")}


def _coerce(path: str, value, default):
    """Convert a TOML value to the type of the dataclass default."""
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(path, "expected a boolean")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(path, "expected an integer")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(path, "expected a number")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(path, "expected a string")
        return value
    if isinstance(default, tuple):
        items = value if isinstance(value, list) else [value]
        out = []
        for i, v in enumerate(items):
            if isinstance(v, bool) or not isinstance(v, (int, float)):
                raise ConfigError(f"{path}[{i}]", "expected a number")
            out.append(v)
        return tuple(out)
    if isinstance(default, dict):
        if not isinstance(value, dict):
            raise ConfigError(path, "expected a table")
        return dict(value)
    return value


def _build(cls, raw: dict, prefix: str):
    if not isinstance(raw, dict):
        raise ConfigError(prefix, "expected a table")
    defaults = cls()
    names = {f.name for f in fields(cls)}
    kw = {}
    for key, value in raw.items():
        path = f"{prefix}.{key}" if prefix else key
        if key not in names or key == "source":
            raise ConfigError(path, "unknown field")
        if key in _SECTIONS and cls is ExperimentConfig:
            kw[key] = _build(_SECTIONS[key], value, path)
        else:
            kw[key] = _coerce(path, value, getattr(defaults, key))
    return cls(**kw)


def data_root() -> Path:
    return Path(os.environ.get(DATA_ROOT_ENV, "."))


def resolve_data_path(p: str, base: Path | None = None) -> Path:
    path = Path(p).expanduser()
    if path.is_absolute():
        return path
    root = os.environ.get(DATA_ROOT_ENV)
    if root:
        return Path(root) / path
    return (base or Path(".")) / path


def validate(cfg: ExperimentConfig, check_files: bool = True) -> ExperimentConfig:
    t = cfg.task
    if cfg.variant not in VARIANTS:
        raise ConfigError("variant", f"must be one of {', '.join(VARIANTS)}")
    if cfg.workers < 1:
        raise ConfigError("workers", "must be at least 1")
    if t.name not in TASKS:
        raise ConfigError("task.name", f"must be one of {', '.join(TASKS)}")
    if t.name == "addition":
        if t.base < 2:
            raise ConfigError("task.base", "must be at least 2")
        if t.n_digits < 1:
            raise ConfigError("task.n_digits", "must be at least 1")
    if t.name == "xor" and t.T < 2:
        raise ConfigError("task.T", "must be at least 2")
    if t.name == "mnist" and (t.T < 1 or 784 % t.T):
        raise ConfigError("task.T", "must divide 784")
    if t.encoding not in ("scalar", "onehot"):
        raise ConfigError("task.encoding", "must be scalar or onehot")
    if t.loss and t.loss not in ("squared", "logistic", "softmax"):
        raise ConfigError("task.loss", "unknown loss kind")
    for k, v in t.sizes.items():
        if isinstance(v, bool) or not isinstance(v, int) or v < 1:
            raise ConfigError(f"task.sizes.{k}", "must be a positive integer")
    for section, name in _GRIDS:
        grid = getattr(getattr(cfg, section), name)
        if not grid:
            raise ConfigError(f"{section}.{name}", "grid must be nonempty")
        for i, v in enumerate(grid):
            if not v >= 0:
                raise ConfigError(f"{section}.{name}[{i}]", "must be nonnegative")
    if t.lam_sum < 0:
        raise ConfigError("task.lam_sum", "must be nonnegative")
    if not cfg.arch.widths or any(int(w) != w or w < 1 for w in cfg.arch.widths):
        raise ConfigError("arch.widths", "must be a nonempty list of positive integers")
    if cfg.arch.K < 1:
        raise ConfigError("arch.K", "must be at least 1")
    if cfg.witness.M < 1:
        raise ConfigError("witness.M", "need at least one witness (M >= 1)")
    for name, parse in (("leak_mode", parse_leak_mode), ("thr_mode", parse_thr_mode)):
        try:
            parse(getattr(cfg.witness, name))
        except ValueError as exc:
            raise ConfigError(f"witness.{name}", str(exc)) from None
    if not cfg.solver.tol > 0:
        raise ConfigError("solver.tol", "must be positive")
    if cfg.solver.max_iter < 1:
        raise ConfigError("solver.max_iter", "must be positive")
    if cfg.solver.penalty not in ("group", "l1"):
        raise ConfigError("solver.penalty", "must be group or l1")
    if cfg.solver.rule not in ("masked", "uniform"):
        raise ConfigError("solver.rule", "must be masked or uniform")
    if cfg.sg.epochs < 0 or cfg.sg.finetune_epochs < 0:
        raise ConfigError("sg.epochs", "must be nonnegative")
    if cfg.sg.batch_size < 1:
        raise ConfigError("sg.batch_size", "must be positive")
    if not cfg.sg.slope > 0:
        raise ConfigError("sg.slope", "must be positive")
    if cfg.eval.mode not in ("tf", "ar"):
        raise ConfigError("eval.mode", "must be tf or ar")
    if any(int(n) != n or n < 1 for n in cfg.eval.ood_lengths):
        raise ConfigError("eval.ood_lengths", "must be positive integers")
    if cfg.eval.mode == "ar" and t.name != "addition":
        raise ConfigError("eval.mode", "autoregressive mode requires carry task")
    if cfg.eval.select_metric not in ("tf_joint_token", "tf_seq", "tf_sum", "ar_joint_token", "ar_seq", "ar_sum"):
        raise ConfigError("eval.select_metric", "unknown selection metric")
    if t.name == "mnist" and check_files:
        base = Path(cfg.source).parent if cfg.source else None
        for name in ("images", "labels"):
            p = getattr(t, name)
            if not p:
                raise ConfigError(f"task.{name}", "required for mnist")
            if not resolve_data_path(p, base).exists():
                raise ConfigError(f"task.{name}", f"file not found: {p}")
    return cfg


def config_from_dict(raw: dict, source: str = "", check_files: bool = True) -> ExperimentConfig:
    cfg = _build(ExperimentConfig, raw, "")
    cfg = replace(cfg, source=source,
                  arch=replace(cfg.arch, widths=tuple(int(w) for w in cfg.arch.widths)),
                  eval=replace(cfg.eval, ood_lengths=tuple(int(n) for n in cfg.eval.ood_lengths)))
    return validate(cfg, check_files)


def load_config(path, check_files: bool = True) -> ExperimentConfig:
    path = Path(path)
    try:
        raw = tomllib.loads(path.read_text())
    except FileNotFoundError:
        raise ConfigError("", f"config file not found: {path}") from None
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError("", f"invalid TOML: {exc}") from None
    return config_from_dict(raw, str(path), check_files)
