import hashlib
from dataclasses import replace

import numpy as np
import pytest

from drkd.config import ConfigError, DataRef, ModelConfig, OptimConfig, RunConfig
from drkd.data import BatchPlan, Dataset, batches
from drkd.experiments import PROTOCOLS
from drkd.losses import DistillConfig
from drkd.models import Checkpoint, forward, init_params, load_checkpoint, mlp_spec, save_checkpoint
from drkd.numeric import argmax_row
from drkd.trainer import (TrainingDiverged, distill, evaluate, read_metrics_csv, sgd_step, train_baseline,
                          write_metrics_csv)

BLOBS = DataRef("blobs", {"classes": 4, "dim": 6, "n_per_class": 30, "test_n_per_class": 30,
                          "spread": 1.2, "seed": 0})


def _cfg(framework="baseline", teacher=None, epochs=6, seed=0, out=None, alpha=0.95, tau=20.0, data=BLOBS):
    return RunConfig(ModelConfig("mlp", (16, 8)), data, BatchPlan(16, seed), OptimConfig(0.05, 0.9, 5e-4, epochs),
                     DistillConfig(framework, tau, alpha), teacher_checkpoint=teacher, run_seed=seed,
                     output_dir=out)


def _teacher(tmp_path, epochs=2, seed=0, data=BLOBS, name="teacher"):
    ckpt, _ = train_baseline(_cfg(epochs=epochs, seed=seed, out=str(tmp_path / name), data=data))
    return str(tmp_path / name / "checkpoint.drkd"), ckpt


def _trajectory(cfg, fn):
    """Parameters after every epoch, by re-running with increasing epoch counts."""
    return [fn(replace(cfg, optim=replace(cfg.optim, epochs=e, lr_schedule=())))[0].params
            for e in (1, 2, 3)]


# -- SGD ----------------------------------------------------------------------

def test_sgd_plain_descent():
    p = {"w": np.array([1.0, -2.0])}
    g = {"w": np.array([0.5, 0.25])}
    new, _ = sgd_step(p, g, {}, OptimConfig(0.1, 0.0, 0.0, 1))
    np.testing.assert_array_equal(new["w"], p["w"] - 0.1 * g["w"])


def test_sgd_zero_gradient_is_noop():
    p = {"w": np.array([1.0, -2.0])}
    new, state = sgd_step(p, {"w": np.zeros(2)}, {}, OptimConfig(0.1, 0.9, 0.0, 1))
    np.testing.assert_array_equal(new["w"], p["w"])


def test_sgd_momentum_and_decay():
    cfg = OptimConfig(0.1, 0.9, 0.01, 1)
    p = {"w": np.array([2.0])}
    g = {"w": np.array([1.0])}
    p1, s1 = sgd_step(p, g, {}, cfg)
    v1 = 1.0 + 0.01 * 2.0
    assert s1["w"][0] == pytest.approx(v1)
    p2, s2 = sgd_step(p1, g, s1, cfg)
    v2 = 0.9 * v1 + 1.0 + 0.01 * p1["w"][0]
    assert s2["w"][0] == pytest.approx(v2)
    assert p2["w"][0] == pytest.approx(2.0 - 0.1 * v1 - 0.1 * v2)


def test_sgd_rejects_non_finite():
    with pytest.raises(TrainingDiverged):
        sgd_step({"w": np.zeros(1)}, {"w": np.array([np.nan])}, {}, OptimConfig())


def test_lr_schedule():
    o = OptimConfig(1.0, epochs=8)
    assert [o.lr_at(e) for e in (0, 3, 4, 5, 6, 7)] == [1.0, 1.0, 0.1, 0.1, pytest.approx(0.01), pytest.approx(0.01)]
    assert OptimConfig(1.0, epochs=8, lr_schedule=((2, 0.5),)).lr_at(3) == 0.5
    with pytest.raises(ConfigError):
        OptimConfig(epochs=4, lr_schedule=((3, 0.1), (2, 0.1)))
    with pytest.raises(ConfigError):
        OptimConfig(epochs=4, lr_schedule=((4, 0.1),))


# -- stage 1 ------------------------------------------------------------------

def test_separable_two_class_blobs():
    data = DataRef("blobs", {"classes": 2, "dim": 4, "n_per_class": 50, "test_n_per_class": 100,
                             "spread": 0.2, "seed": 1})
    cfg = replace(_cfg(epochs=20, data=data))
    ckpt, recs = train_baseline(cfg)
    assert len(recs) == 20
    assert recs[-1].test_accuracy >= 0.99


def test_zero_epochs_returns_init(tmp_path):
    cfg = _cfg(epochs=0, seed=3, out=str(tmp_path))
    ckpt, recs = train_baseline(cfg)
    assert recs == []
    init = init_params(ckpt.spec, 3)
    assert all(ckpt.params[k].tobytes() == init[k].tobytes() for k in init)
    assert (tmp_path / "metrics.csv").read_text().count("\n") == 1


def test_runs_are_byte_identical(tmp_path):
    for name in ("a", "b"):
        train_baseline(_cfg(framework="lsr", out=str(tmp_path / name)))
    for f in ("metrics.csv", "checkpoint.drkd"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_metrics_csv_format(tmp_path):
    train_baseline(_cfg(epochs=2, out=str(tmp_path)))
    text = (tmp_path / "metrics.csv").read_text()
    assert text.splitlines()[0] == ("epoch,train_loss,ce_component,kl_component,train_accuracy,test_accuracy,"
                                    "rectified_fraction,learning_rate,wall_time_s")
    assert text.endswith("\n") and len(text.splitlines()) == 3
    recs = read_metrics_csv(tmp_path / "metrics.csv")
    write_metrics_csv(recs, tmp_path / "again.csv")
    assert (tmp_path / "again.csv").read_text() == text


def test_baseline_rejects_teacher_frameworks(tmp_path):
    path, _ = _teacher(tmp_path)
    with pytest.raises(ConfigError):
        train_baseline(_cfg("drkd", teacher=path))


def test_divergence_is_reported():
    cfg = replace(_cfg(epochs=3), optim=OptimConfig(1e200, 0.9, 0.0, 3))
    with np.errstate(all="ignore"), pytest.raises(TrainingDiverged, match="epoch"):
        train_baseline(cfg)


# -- evaluate -----------------------------------------------------------------

def test_constant_predictor_accuracy():
    spec = mlp_spec((3, 4, 10))
    params = {k: np.zeros_like(v) for k, v in init_params(spec, 0).items()}
    params["dense1.b"][7] = 1.0
    ds = Dataset(np.ones((50, 3)), np.arange(50) % 10, 10)
    ck = Checkpoint(spec, params)
    assert evaluate(ck, ds) == 0.1
    assert evaluate(ck, ds) == evaluate(ck, ds)


def test_evaluate_matches_last_logged(tmp_path):
    ckpt, recs = train_baseline(_cfg(out=str(tmp_path)))
    _, test = BLOBS.load()
    assert evaluate(load_checkpoint(tmp_path / "checkpoint.drkd"), test) == recs[-1].test_accuracy


def test_evaluate_class_mismatch():
    spec = mlp_spec((3, 4, 5))
    with pytest.raises(ValueError):
        evaluate(Checkpoint(spec, init_params(spec, 0)), Dataset(np.ones((2, 3)), [0, 1], 3))


# -- stage 2 ------------------------------------------------------------------

def test_teacher_file_is_untouched(tmp_path):
    path, _ = _teacher(tmp_path)
    before = hashlib.sha256(open(path, "rb").read()).hexdigest()
    for fw in ("normal_kd", "tfkd_self", "drkd"):
        distill(_cfg(fw, teacher=path, out=str(tmp_path / fw)))
    assert hashlib.sha256(open(path, "rb").read()).hexdigest() == before


def test_class_count_mismatch_is_config_error(tmp_path):
    other = DataRef("blobs", {**BLOBS.params, "classes": 3})
    path, _ = _teacher(tmp_path, data=other)
    with pytest.raises(ConfigError, match="classes"):
        distill(_cfg("drkd", teacher=path, epochs=1))


def test_alpha_zero_matches_baseline_trajectory(tmp_path):
    path, _ = _teacher(tmp_path)
    base = _trajectory(_cfg(), train_baseline)
    for fw in ("normal_kd", "tfkd_self", "drkd"):
        got = _trajectory(_cfg(fw, teacher=path, alpha=0.0), distill)
        for a, b in zip(base, got):
            assert all(a[k].tobytes() == b[k].tobytes() for k in a), fw


def _perfect_teacher(tmp_path):
    data = DataRef("blobs", {"classes": 3, "dim": 4, "n_per_class": 30, "test_n_per_class": 10,
                             "spread": 0.05, "seed": 2})
    path, ckpt = _teacher(tmp_path, epochs=10, data=data, name="perfect")
    train, _ = data.load()
    assert evaluate(ckpt, train) == 1.0
    return data, path


def test_drkd_with_perfect_teacher_matches_normal_kd(tmp_path):
    data, path = _perfect_teacher(tmp_path)
    kd_ckpt, kd_recs = distill(_cfg("normal_kd", teacher=path, data=data, out=str(tmp_path / "kd")))
    dr_ckpt, dr_recs = distill(_cfg("drkd", teacher=path, data=data, out=str(tmp_path / "dr")))
    assert [r.train_loss for r in kd_recs] == [r.train_loss for r in dr_recs]
    assert all(r.rectified_fraction == 0.0 for r in dr_recs)
    assert all(kd_ckpt.params[k].tobytes() == dr_ckpt.params[k].tobytes() for k in kd_ckpt.params)


def test_rectified_fraction_tracks_teacher_errors(tmp_path):
    path, teacher = _teacher(tmp_path, epochs=1)
    cfg = _cfg("drkd", teacher=path, epochs=4, seed=5)
    _, recs = distill(cfg)
    train, _ = BLOBS.load()
    for r in recs:
        seen = wrong = 0
        for x, y in batches(train, cfg.batch, r.epoch):
            wrong += int(np.count_nonzero(argmax_row(forward(teacher.spec, teacher.params, x)[0]) != y))
            seen += len(y)
        assert r.rectified_fraction == wrong / seen


def test_under_trained_teacher_is_surpassed(tmp_path):
    """2-epoch teacher, 20-epoch DR-KD student at tau=20, alpha=0.95, averaged over 5 seeds."""
    params = {k: v for k, v in PROTOCOLS["blobs"]["data"].items() if k != "kind"}
    data = DataRef("blobs", params)
    first_rect, student_acc, teacher_acc = [], [], []
    for seed in range(5):
        t_cfg = replace(_cfg(epochs=2, seed=seed, data=data, out=str(tmp_path / f"t{seed}")),
                        model=ModelConfig("mlp", (64, 32)), batch=BatchPlan(32, seed))
        teacher, _ = train_baseline(t_cfg)
        cfg = replace(t_cfg, distill=DistillConfig("drkd", 20.0, 0.95), optim=replace(t_cfg.optim, epochs=20),
                      teacher_checkpoint=str(tmp_path / f"t{seed}" / "checkpoint.drkd"), output_dir=None)
        ckpt, recs = distill(cfg)
        first_rect.append(recs[0].rectified_fraction)
        student_acc.append(ckpt.metadata["test_accuracy"])
        teacher_acc.append(teacher.metadata["test_accuracy"])
    assert min(first_rect) > 0
    assert np.mean(student_acc) >= np.mean(teacher_acc)


def test_teacher_normalization_must_match(tmp_path):
    path, ckpt = _teacher(tmp_path)
    ckpt.metadata["normalization"] = {"mean": [0.0], "std": [2.0]}
    save_checkpoint(ckpt, path)
    with pytest.raises(ConfigError, match="normalization"):
        distill(_cfg("drkd", teacher=path, epochs=1))
