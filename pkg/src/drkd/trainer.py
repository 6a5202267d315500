"""Training loops: stage 1 (plain loss) and stage 2 (distillation from a frozen teacher)."""

from __future__ import annotations

import csv
import io
import logging
import os
import time
from dataclasses import asdict, dataclass
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from .config import ConfigError, OptimConfig, RunConfig
from .data import Dataset, batches
from .losses import compute_loss
from .models import Checkpoint, Params, backward, forward, init_params, load_checkpoint, predict, save_checkpoint
from .numeric import argmax_row

log = logging.getLogger(__name__)

METRICS_FIELDS = ("epoch", "train_loss", "ce_component", "kl_component", "train_accuracy",
                  "test_accuracy", "rectified_fraction", "learning_rate", "wall_time_s")
CHECKPOINT_NAME = "checkpoint.drkd"
METRICS_NAME = "metrics.csv"


class TrainingDiverged(RuntimeError):
    """A loss or gradient went non-finite."""


@dataclass
class MetricsRecord:
    epoch: int
    train_loss: float
    ce_component: float
    kl_component: float
    train_accuracy: float
    test_accuracy: float
    rectified_fraction: float
    learning_rate: float
    wall_time_s: float


def write_metrics_csv(records, path) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRICS_FIELDS)
    for r in records:
        w.writerow([repr(v) if isinstance(v, float) else v for v in asdict(r).values()])
    Path(path).write_text(buf.getvalue(), encoding="utf-8")


def read_metrics_csv(path) -> list[MetricsRecord]:
    """Parse a metrics CSV; ValueError names the file and line on bad input."""
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows or tuple(rows[0]) != METRICS_FIELDS:
        raise ValueError(f"{path}:1: unexpected header")
    out = []
    for lineno, row in enumerate(rows[1:], start=2):
        if len(row) != len(METRICS_FIELDS):
            raise ValueError(f"{path}:{lineno}: expected {len(METRICS_FIELDS)} fields, got {len(row)}")
        try:
            out.append(MetricsRecord(int(row[0]), *(float(v) for v in row[1:])))
        except ValueError:
            raise ValueError(f"{path}:{lineno}: non-numeric field") from None
    return out


def sgd_step(params: Params, grads: Params, state: Params, cfg: OptimConfig,
             lr: float | None = None) -> tuple[Params, Params]:
    """Momentum SGD with L2 weight decay. Returns new params and velocity.

    v <- momentum * v + grad + weight_decay * param;  param <- param - lr * v
    """
    lr = cfg.learning_rate if lr is None else lr
    for name, g in grads.items():
        if g.shape != params[name].shape:
            raise ValueError(f"gradient {name} has shape {g.shape}, expected {params[name].shape}")
        if not np.all(np.isfinite(g)):
            raise TrainingDiverged(f"non-finite gradient for {name}")
    new_params, new_state = {}, {}
    for name, p in params.items():
        v = grads[name] + cfg.weight_decay * p
        if name in state:
            v = cfg.momentum * state[name] + v
        new_state[name] = v
        new_params[name] = p - lr * v
    return new_params, new_state


def evaluate(ckpt: Checkpoint, ds: Dataset) -> float:
    """Top-1 accuracy of ``ckpt`` on ``ds``."""
    if ds.class_count != ckpt.spec.class_count:
        raise ValueError(f"dataset has {ds.class_count} classes, checkpoint {ckpt.spec.class_count}")
    if len(ds) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    logits = predict(ckpt.spec, ckpt.params, ds.inputs)
    return int(np.count_nonzero(argmax_row(logits) == ds.labels)) / len(ds)


def _timestamp(record: bool) -> str:
    if record:
        return datetime.now(timezone.utc).isoformat(timespec="seconds")
    epoch = int(os.environ.get("SOURCE_DATE_EPOCH", "0"))
    return datetime.fromtimestamp(epoch, timezone.utc).isoformat(timespec="seconds")


def _load_teacher(cfg: RunConfig, spec, train: Dataset) -> Checkpoint:
    teacher = load_checkpoint(cfg.teacher_checkpoint)
    if teacher.spec.class_count != spec.class_count:
        raise ConfigError("teacher_checkpoint", f"teacher predicts {teacher.spec.class_count} classes, "
                                                f"student {spec.class_count}")
    if teacher.spec.input_shape != spec.input_shape:
        raise ConfigError("teacher_checkpoint", f"teacher input shape {teacher.spec.input_shape} "
                                                f"!= student {spec.input_shape}")
    norm = teacher.metadata.get("normalization")
    if norm is not None and norm != train.normalization:
        raise ConfigError("teacher_checkpoint", "teacher was trained with different input normalization")
    return teacher


def _run(cfg: RunConfig, train: Dataset, test: Dataset, teacher: Checkpoint | None):
    spec = cfg.model.build(train.sample_shape, train.class_count, cfg.run_seed)
    params = init_params(spec, cfg.run_seed)
    plan = cfg.batch if cfg.batch.seed == cfg.run_seed else cfg.with_seed(cfg.run_seed).batch
    state: Params = {}
    records: list[MetricsRecord] = []
    train_acc = test_acc = None
    for epoch in range(cfg.optim.epochs):
        t0 = time.perf_counter()
        lr = cfg.optim.lr_at(epoch)
        seen = correct = rectified = 0
        loss_sum = ce_sum = kl_sum = 0.0
        for b, (x, y) in enumerate(batches(train, plan, epoch)):
            logits, cache = forward(spec, params, x)
            if not np.all(np.isfinite(logits)):
                raise TrainingDiverged(f"non-finite logits at epoch {epoch}, batch {b}")
            t_logits = forward(teacher.spec, teacher.params, x)[0] if teacher is not None else None
            res = compute_loss(logits, y, cfg.distill, t_logits)
            if not np.isfinite(res.loss) or not np.all(np.isfinite(res.grad_student_logits)):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}, batch {b}")
            grads = backward(spec, params, cache, res.grad_student_logits)
            try:
                params, state = sgd_step(params, grads, state, cfg.optim, lr)
            except TrainingDiverged as exc:
                raise TrainingDiverged(f"{exc} at epoch {epoch}, batch {b}") from None
            n = len(y)
            seen += n
            correct += int(np.count_nonzero(argmax_row(logits) == y))
            rectified += round(res.rectified_fraction * n)
            loss_sum += res.loss * n
            ce_sum += res.ce * n
            kl_sum += res.kl * n
        train_acc = correct / seen
        test_acc = evaluate(Checkpoint(spec, params), test)
        rec = MetricsRecord(epoch, loss_sum / seen, ce_sum / seen, kl_sum / seen, train_acc, test_acc,
                            rectified / seen, lr,
                            time.perf_counter() - t0 if cfg.record_timing else 0.0)
        records.append(rec)
        log.info("epoch %d loss %.4f train %.4f test %.4f rect %.4f", epoch, rec.train_loss,
                 train_acc, test_acc, rec.rectified_fraction)
    if test_acc is None:
        train_acc = evaluate(Checkpoint(spec, params), train)
        test_acc = evaluate(Checkpoint(spec, params), test)
    meta = {
        "name": cfg.name,
        "framework": cfg.distill.framework,
        "seed": cfg.run_seed,
        "epochs": cfg.optim.epochs,
        "train_accuracy": train_acc,
        "test_accuracy": test_acc,
        "normalization": train.normalization,
        "created": _timestamp(cfg.record_timing),
    }
    ckpt = Checkpoint(spec, params, meta)
    if cfg.output_dir:
        out = Path(cfg.output_dir)
        out.mkdir(parents=True, exist_ok=True)
        save_checkpoint(ckpt, out / CHECKPOINT_NAME)
        write_metrics_csv(records, out / METRICS_NAME)
    return ckpt, records


def _datasets(cfg: RunConfig, train, test):
    if train is None or test is None:
        train, test = cfg.data.load()
    return train, test


def train_baseline(cfg: RunConfig, train: Dataset | None = None,
                   test: Dataset | None = None) -> tuple[Checkpoint, list[MetricsRecord]]:
    """Stage 1: train from scratch with cross-entropy (or label smoothing)."""
    if cfg.distill.needs_teacher:
        raise ConfigError("distill.framework", f"{cfg.distill.framework!r} needs a teacher; use distill")
    train, test = _datasets(cfg, train, test)
    return _run(cfg, train, test, None)


def distill(cfg: RunConfig, train: Dataset | None = None,
            test: Dataset | None = None) -> tuple[Checkpoint, list[MetricsRecord]]:
    """Stage 2: train a fresh student against a frozen teacher checkpoint."""
    if not cfg.distill.needs_teacher:
        raise ConfigError("distill.framework", f"{cfg.distill.framework!r} does not use a teacher")
    train, test = _datasets(cfg, train, test)
    spec = cfg.model.build(train.sample_shape, train.class_count, cfg.run_seed)
    teacher = _load_teacher(cfg, spec, train)
    return _run(cfg, train, test, teacher)


def run(cfg: RunConfig, train: Dataset | None = None, test: Dataset | None = None):
    """Dispatch to train_baseline or distill based on the framework."""
    return (distill if cfg.distill.needs_teacher else train_baseline)(cfg, train, test)
