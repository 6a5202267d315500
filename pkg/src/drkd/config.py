"""Run configuration: JSON files parsed into validated dataclasses.

A run config looks like::

    {
      "name": "blobs-drkd",
      "model": {"kind": "mlp", "hidden": [64, 32]},
      "data": {"kind": "blobs", "classes": 10, "dim": 16, "n_per_class": 100,
               "test_n_per_class": 50, "spread": 1.0, "seed": 0},
      "batch": {"batch_size": 64, "drop_last": false},
      "optim": {"learning_rate": 0.05, "momentum": 0.9, "weight_decay": 5e-4,
                "epochs": 20, "lr_schedule": [[10, 0.1], [15, 0.1]]},
      "distill": {"framework": "drkd", "tau": 20, "alpha": 0.95},
      "teacher_checkpoint": "teacher/checkpoint.drkd",
      "run_seed": 0,
      "output_dir": "runs/drkd"
    }

Relative paths are resolved against the directory holding the config file.
Errors carry the dotted path of the offending field.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any

from .data import BatchPlan, Dataset, channel_stats, load_cifar10_bin, load_idx, standardize, synth_blobs
from .losses import FRAMEWORKS, DistillConfig
from .models import ModelSpec


class ConfigError(ValueError):
    def __init__(self, field_path: str, message: str):
        self.field = field_path
        super().__init__(f"{field_path}: {message}")


# -- optimizer ----------------------------------------------------------------

def default_schedule(epochs: int) -> tuple[tuple[int, float], ...]:
    """x0.1 at 50% and 75% of training, dropping collisions and epoch 0."""
    marks = sorted({e for e in (epochs // 2, (3 * epochs) // 4) if 0 < e < epochs})
    return tuple((e, 0.1) for e in marks)


@dataclass(frozen=True)
class OptimConfig:
    learning_rate: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 5e-4
    epochs: int = 20
    lr_schedule: tuple[tuple[int, float], ...] | None = None

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ConfigError("optim.learning_rate", "must be positive")
        if not 0 <= self.momentum < 1:
            raise ConfigError("optim.momentum", "must lie in [0, 1)")
        if not self.weight_decay >= 0:
            raise ConfigError("optim.weight_decay", "must be non-negative")
        if self.epochs < 0:
            raise ConfigError("optim.epochs", "must be non-negative")
        if self.lr_schedule is not None:
            sched = tuple((int(e), float(m)) for e, m in self.lr_schedule)
            object.__setattr__(self, "lr_schedule", sched)
            prev = -1
            for e, m in sched:
                if e <= prev or not 0 <= e < max(self.epochs, 1):
                    raise ConfigError("optim.lr_schedule", "epochs must be strictly increasing and in [0, epochs)")
                if not m > 0:
                    raise ConfigError("optim.lr_schedule", "multipliers must be positive")
                prev = e

    @property
    def schedule(self) -> tuple[tuple[int, float], ...]:
        return default_schedule(self.epochs) if self.lr_schedule is None else self.lr_schedule

    def lr_at(self, epoch: int) -> float:
        lr = self.learning_rate
        for e, m in self.schedule:
            if epoch >= e:
                lr *= m
        return lr


# -- data reference -----------------------------------------------------------

DATA_KINDS = {
    "blobs": {"classes", "dim", "n_per_class", "test_n_per_class", "spread", "seed"},
    "idx": {"train_images", "train_labels", "test_images", "test_labels", "class_count"},
    "cifar10": {"train", "test"},
}


@dataclass(frozen=True)
class DataRef:
    kind: str
    params: dict[str, Any]
    standardize: bool = False

    def to_dict(self) -> dict[str, Any]:
        return {"kind": self.kind, **self.params, "standardize": self.standardize}

    def load(self) -> tuple[Dataset, Dataset]:
        """Train and test splits, standardized with train statistics if requested."""
        p = self.params
        if self.kind == "blobs":
            common = dict(seed=p.get("seed", 0), classes=p["classes"], dim=p["dim"], spread=p["spread"])
            train = synth_blobs(n_per_class=p["n_per_class"], split="train", **common)
            test = synth_blobs(n_per_class=p.get("test_n_per_class", p["n_per_class"]), split="test", **common)
        elif self.kind == "idx":
            k = p.get("class_count", 10)
            train = load_idx(p["train_images"], p["train_labels"], k, "train")
            test = load_idx(p["test_images"], p["test_labels"], k, "test")
        else:
            train = load_cifar10_bin(p["train"], "train")
            test = load_cifar10_bin(p["test"], "test")
        if self.standardize:
            stats = channel_stats(train)
            train, test = standardize(train, stats), standardize(test, stats)
        return train, test


# -- model --------------------------------------------------------------------

@dataclass(frozen=True)
class ModelConfig:
    kind: str = "mlp"
    hidden: tuple[int, ...] = (256, 128)
    channels: tuple[int, int] = (8, 16)

    def to_dict(self) -> dict[str, Any]:
        return {"kind": self.kind, "hidden": list(self.hidden), "channels": list(self.channels)}

    def build(self, sample_shape: tuple[int, ...], classes: int, seed: int) -> ModelSpec:
        if self.kind == "mlp":
            features = math.prod(sample_shape)
            return ModelSpec("mlp", (features,), classes, (features, *self.hidden, classes), init_seed=seed)
        return ModelSpec("tiny_conv", tuple(sample_shape), classes, channels=self.channels, init_seed=seed)


# -- run config ---------------------------------------------------------------

@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig
    data: DataRef
    batch: BatchPlan = field(default_factory=BatchPlan)
    optim: OptimConfig = field(default_factory=OptimConfig)
    distill: DistillConfig = field(default_factory=DistillConfig)
    teacher_checkpoint: str | None = None
    run_seed: int = 0
    output_dir: str | None = None
    name: str = "run"
    # Off by default so repeated runs are byte-identical.
    record_timing: bool = False

    def __post_init__(self):
        if self.distill.needs_teacher and not self.teacher_checkpoint:
            raise ConfigError("teacher_checkpoint", f"required for framework {self.distill.framework!r}")
        if not self.distill.needs_teacher and self.teacher_checkpoint:
            raise ConfigError("teacher_checkpoint", f"not allowed for framework {self.distill.framework!r}")

    def with_seed(self, seed: int) -> "RunConfig":
        return replace(self, run_seed=seed, batch=replace(self.batch, seed=seed))

    def to_dict(self) -> dict[str, Any]:
        o = self.optim
        d = self.distill
        return {
            "name": self.name,
            "model": self.model.to_dict(),
            "data": self.data.to_dict(),
            "batch": {"batch_size": self.batch.batch_size, "drop_last": self.batch.drop_last},
            "optim": {"learning_rate": o.learning_rate, "momentum": o.momentum,
                      "weight_decay": o.weight_decay, "epochs": o.epochs,
                      "lr_schedule": None if o.lr_schedule is None else [list(s) for s in o.lr_schedule]},
            "distill": {"framework": d.framework, "tau": d.tau, "alpha": d.alpha,
                        "lsr_epsilon": d.lsr_epsilon, "kd_grad_scale": d.kd_grad_scale},
            "teacher_checkpoint": self.teacher_checkpoint,
            "run_seed": self.run_seed,
            "output_dir": self.output_dir,
            "record_timing": self.record_timing,
        }


def _section(raw: dict, key: str, allowed: set[str], required: bool = False) -> dict:
    sec = raw.get(key, None)
    if sec is None:
        if required:
            raise ConfigError(key, "missing section")
        return {}
    if not isinstance(sec, dict):
        raise ConfigError(key, "must be an object")
    extra = set(sec) - allowed
    if extra:
        raise ConfigError(f"{key}.{sorted(extra)[0]}", "unknown field")
    return sec


def _key(prefix: str, key: str) -> str:
    return f"{prefix}.{key}" if prefix else key


def _number(sec: dict, prefix: str, key: str, default, kind=float):
    v = sec.get(key, default)
    if isinstance(v, bool) or not isinstance(v, (int, float)) or (kind is int and not float(v).is_integer()):
        raise ConfigError(_key(prefix, key), f"expected {'an integer' if kind is int else 'a number'}, got {v!r}")
    if not math.isfinite(v):
        raise ConfigError(_key(prefix, key), "must be finite")
    return kind(v)


def _bool(sec: dict, prefix: str, key: str, default: bool) -> bool:
    v = sec.get(key, default)
    if not isinstance(v, bool):
        raise ConfigError(_key(prefix, key), f"expected true/false, got {v!r}")
    return v


def _int_list(sec: dict, prefix: str, key: str, default) -> tuple[int, ...]:
    v = sec.get(key, default)
    if not isinstance(v, (list, tuple)) or not v or not all(
            isinstance(x, int) and not isinstance(x, bool) and x > 0 for x in v):
        raise ConfigError(f"{prefix}.{key}", f"expected a non-empty list of positive integers, got {v!r}")
    return tuple(v)


def _resolve(path, base: Path | None) -> str:
    p = Path(path)
    if base is not None and not p.is_absolute():
        p = base / p
    return str(p)


def parse_run_config(raw: dict, base_dir=None) -> RunConfig:
    """Validate a decoded JSON config. Raises ConfigError naming the bad field."""
    base = Path(base_dir) if base_dir is not None else None
    if not isinstance(raw, dict):
        raise ConfigError("<root>", "config must be a JSON object")
    top = {"name", "model", "data", "batch", "optim", "distill", "teacher_checkpoint",
           "run_seed", "output_dir", "record_timing"}
    extra = set(raw) - top
    if extra:
        raise ConfigError(sorted(extra)[0], "unknown field")

    m = _section(raw, "model", {"kind", "hidden", "channels"})
    kind = m.get("kind", "mlp")
    if kind not in ("mlp", "tiny_conv"):
        raise ConfigError("model.kind", f"expected 'mlp' or 'tiny_conv', got {kind!r}")
    model = ModelConfig(kind, _int_list(m, "model", "hidden", [256, 128]),
                        _int_list(m, "model", "channels", [8, 16]))
    if len(model.channels) != 2:
        raise ConfigError("model.channels", "expected exactly two channel counts")

    d = _section(raw, "data", set().union(*DATA_KINDS.values()) | {"kind", "standardize"}, required=True)
    dkind = d.get("kind")
    if dkind not in DATA_KINDS:
        raise ConfigError("data.kind", f"expected one of {sorted(DATA_KINDS)}, got {dkind!r}")
    extra = set(d) - DATA_KINDS[dkind] - {"kind", "standardize"}
    if extra:
        raise ConfigError(f"data.{sorted(extra)[0]}", f"not valid for data kind {dkind!r}")
    params: dict[str, Any] = {}
    if dkind == "blobs":
        for key in ("classes", "dim", "n_per_class"):
            if key not in d:
                raise ConfigError(f"data.{key}", "missing")
            params[key] = _number(d, "data", key, None, int)
        params["test_n_per_class"] = _number(d, "data", "test_n_per_class", params["n_per_class"], int)
        params["spread"] = _number(d, "data", "spread", 1.0)
        params["seed"] = _number(d, "data", "seed", 0, int)
        if params["classes"] < 2 or params["dim"] < 2 or params["n_per_class"] < 1 \
                or params["test_n_per_class"] < 1 or not params["spread"] > 0:
            raise ConfigError("data", "blobs need classes >= 2, dim >= 2, n_per_class >= 1, spread > 0")
    elif dkind == "idx":
        for key in ("train_images", "train_labels", "test_images", "test_labels"):
            if not isinstance(d.get(key), str):
                raise ConfigError(f"data.{key}", "expected a file path")
            params[key] = _resolve(d[key], base)
        params["class_count"] = _number(d, "data", "class_count", 10, int)
        if not 2 <= params["class_count"] <= 256:
            raise ConfigError("data.class_count", "must lie in [2, 256]")
    else:
        for key in ("train", "test"):
            v = d.get(key)
            if isinstance(v, str):
                v = [v]
            if not isinstance(v, list) or not v or not all(isinstance(x, str) for x in v):
                raise ConfigError(f"data.{key}", "expected a list of file paths")
            params[key] = [_resolve(x, base) for x in v]
    data = DataRef(dkind, params, _bool(d, "data", "standardize", False))

    b = _section(raw, "batch", {"batch_size", "drop_last"})
    batch_size = _number(b, "batch", "batch_size", 64, int)
    if batch_size < 1:
        raise ConfigError("batch.batch_size", "must be at least 1")
    run_seed = _number(raw, "", "run_seed", 0, int) if "run_seed" in raw else 0
    batch = BatchPlan(batch_size, run_seed, _bool(b, "batch", "drop_last", False))

    o = _section(raw, "optim", {"learning_rate", "momentum", "weight_decay", "epochs", "lr_schedule"})
    sched = o.get("lr_schedule")
    if sched is not None:
        if not isinstance(sched, list) or not all(
                isinstance(s, list) and len(s) == 2 and all(isinstance(x, (int, float)) and not isinstance(x, bool)
                                                            for x in s) for s in sched):
            raise ConfigError("optim.lr_schedule", "expected a list of [epoch, multiplier] pairs")
        if not all(float(s[0]).is_integer() for s in sched):
            raise ConfigError("optim.lr_schedule", "epochs must be integers")
        sched = tuple((int(e), float(mu)) for e, mu in sched)
    optim = OptimConfig(_number(o, "optim", "learning_rate", 0.05), _number(o, "optim", "momentum", 0.9),
                        _number(o, "optim", "weight_decay", 5e-4), _number(o, "optim", "epochs", 20, int),
                        sched)

    s = _section(raw, "distill", {"framework", "tau", "alpha", "lsr_epsilon", "kd_grad_scale"})
    fw = s.get("framework", "baseline")
    if fw not in FRAMEWORKS:
        raise ConfigError("distill.framework", f"expected one of {FRAMEWORKS}, got {fw!r}")
    tau = _number(s, "distill", "tau", 20.0)
    alpha = _number(s, "distill", "alpha", 0.95)
    eps = _number(s, "distill", "lsr_epsilon", 0.1)
    if not tau > 0:
        raise ConfigError("distill.tau", f"must be positive, got {tau}")
    if not 0 <= alpha <= 1:
        raise ConfigError("distill.alpha", f"must lie in [0, 1], got {alpha}")
    if not 0 <= eps < 1:
        raise ConfigError("distill.lsr_epsilon", f"must lie in [0, 1), got {eps}")
    distill = DistillConfig(fw, tau, alpha, eps, _bool(s, "distill", "kd_grad_scale", False))

    teacher = raw.get("teacher_checkpoint")
    if teacher is not None and not isinstance(teacher, str):
        raise ConfigError("teacher_checkpoint", "expected a file path")
    out = raw.get("output_dir")
    if out is not None and not isinstance(out, str):
        raise ConfigError("output_dir", "expected a directory path")
    name = raw.get("name", "run")
    if not isinstance(name, str):
        raise ConfigError("name", "expected a string")
    return RunConfig(model, data, batch, optim, distill,
                     _resolve(teacher, base) if teacher else None, run_seed,
                     _resolve(out, base) if out else None, name,
                     _bool(raw, "", "record_timing", False) if "record_timing" in raw else False)


def load_run_config(path) -> RunConfig:
    path = Path(path)
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError("<root>", f"invalid JSON in {path}: {exc}") from None
    return parse_run_config(raw, path.parent)


def dump_run_config(cfg: RunConfig, path) -> None:
    Path(path).write_text(json.dumps(cfg.to_dict(), indent=2) + "\n", encoding="utf-8")


# -- experiment manifest ------------------------------------------------------

DEFAULT_SEEDS = (0, 1, 2, 3, 4)
TEACHER_REF = "@teacher:"


@dataclass(frozen=True)
class ExperimentManifest:
    name: str
    arms: dict[str, RunConfig]
    seeds: tuple[int, ...] = DEFAULT_SEEDS
    # Teacher configs trained once per seed; arms refer to them by name.
    teachers: dict[str, RunConfig] = field(default_factory=dict)
    output_dir: str = "experiment"
    baseline_arm: str = "baseline"


def _load_json(field_path: str, path: Path) -> Any:
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError(field_path, f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(field_path, f"invalid JSON in {path}: {exc}") from None


def _nested(prefix: str, raw, base: Path) -> RunConfig:
    try:
        return parse_run_config(raw, base)
    except ConfigError as exc:
        raise ConfigError(f"{prefix}.{exc.field}", str(exc).split(": ", 1)[1]) from None


def load_manifest(path) -> ExperimentManifest:
    """Read an experiment manifest.

    ``arms`` maps an arm name to a run-config path, or to
    ``{"config": path, "teacher": name}`` where ``name`` is a key of
    ``teachers`` (a mapping of teacher name to a teacher-free run config).
    """
    path = Path(path)
    if not path.is_file():
        raise ConfigError("<root>", f"manifest not found: {path}")
    raw = _load_json("<root>", path)
    if not isinstance(raw, dict):
        raise ConfigError("<root>", "manifest must be a JSON object")
    extra = set(raw) - {"name", "seeds", "output_dir", "teachers", "arms", "baseline_arm"}
    if extra:
        raise ConfigError(sorted(extra)[0], "unknown field")
    seeds = raw.get("seeds", list(DEFAULT_SEEDS))
    if not isinstance(seeds, list) or not seeds or not all(isinstance(s, int) and not isinstance(s, bool)
                                                            for s in seeds):
        raise ConfigError("seeds", "expected a non-empty list of integers")
    base = path.parent

    teachers: dict[str, RunConfig] = {}
    t_raw = raw.get("teachers", {})
    if not isinstance(t_raw, dict):
        raise ConfigError("teachers", "expected an object mapping teacher name to config path")
    for tname, rel in t_raw.items():
        if not isinstance(rel, str):
            raise ConfigError(f"teachers.{tname}", "expected a config file path")
        p = Path(_resolve(rel, base))
        cfg = _nested(f"teachers.{tname}", _load_json(f"teachers.{tname}", p), p.parent)
        if cfg.distill.needs_teacher:
            raise ConfigError(f"teachers.{tname}.distill.framework", "teacher configs must be teacher-free")
        teachers[tname] = cfg

    arms_raw = raw.get("arms")
    if not isinstance(arms_raw, dict) or not arms_raw:
        raise ConfigError("arms", "expected a non-empty object mapping arm name to config path")
    arms: dict[str, RunConfig] = {}
    for arm, entry in arms_raw.items():
        tname = None
        if isinstance(entry, dict):
            if set(entry) - {"config", "teacher"}:
                raise ConfigError(f"arms.{arm}", "arm objects take only 'config' and 'teacher'")
            tname, entry = entry.get("teacher"), entry.get("config")
            if tname not in teachers:
                raise ConfigError(f"arms.{arm}.teacher", f"unknown teacher {tname!r}")
        if not isinstance(entry, str):
            raise ConfigError(f"arms.{arm}", "expected a config file path")
        p = Path(_resolve(entry, base))
        a_raw = _load_json(f"arms.{arm}", p)
        if tname is not None and isinstance(a_raw, dict):
            if a_raw.get("teacher_checkpoint"):
                raise ConfigError(f"arms.{arm}.teacher", "arm config already sets teacher_checkpoint")
            a_raw = {**a_raw, "teacher_checkpoint": TEACHER_REF + tname}
        cfg = _nested(f"arms.{arm}", a_raw, p.parent)
        if tname is not None:
            if not cfg.distill.needs_teacher:
                raise ConfigError(f"arms.{arm}.teacher", f"framework {cfg.distill.framework!r} takes no teacher")
            cfg = replace(cfg, teacher_checkpoint=TEACHER_REF + tname)
        arms[arm] = cfg
    first = next(iter(arms.values()))
    for arm, cfg in arms.items():
        for attr in ("data", "model", "optim", "batch"):
            if getattr(cfg, attr) != getattr(first, attr):
                raise ConfigError(f"arms.{arm}.{attr}", "all arms must share data, model, batch and optimizer settings")
    for tname, cfg in teachers.items():
        if cfg.data != first.data:
            raise ConfigError(f"teachers.{tname}.data", "teachers must use the arms' dataset")
    baseline_arm = raw.get("baseline_arm", "baseline")
    if baseline_arm not in arms:
        raise ConfigError("baseline_arm", f"arm {baseline_arm!r} not present in arms")
    out = raw.get("output_dir", "experiment")
    if not isinstance(out, str):
        raise ConfigError("output_dir", "expected a directory path")
    name = raw.get("name", path.stem)
    return ExperimentManifest(str(name), arms, tuple(seeds), teachers, _resolve(out, base), baseline_arm)
