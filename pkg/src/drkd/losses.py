"""Distillation losses with analytic gradients w.r.t. the student logits.

Every loss is a mean over the batch. Teacher logits are constants: nothing
here produces a gradient for them.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numeric import argmax_row, log_softmax_tau, softmax_tau

FRAMEWORKS = ("baseline", "normal_kd", "tfkd_self", "drkd", "lsr")
TEACHER_FRAMEWORKS = ("normal_kd", "tfkd_self", "drkd")


@dataclass(frozen=True)
class DistillConfig:
    framework: str = "baseline"
    tau: float = 20.0
    alpha: float = 0.95
    lsr_epsilon: float = 0.1
    # Multiply the KL term (loss and gradient) by tau**2, as in Hinton et al.
    kd_grad_scale: bool = False

    def __post_init__(self):
        if self.framework not in FRAMEWORKS:
            raise ValueError(f"unknown framework {self.framework!r}; expected one of {FRAMEWORKS}")
        if not self.tau > 0:
            raise ValueError(f"tau must be positive, got {self.tau!r}")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in [0, 1], got {self.alpha!r}")
        if not 0.0 <= self.lsr_epsilon < 1.0:
            raise ValueError(f"lsr_epsilon must lie in [0, 1), got {self.lsr_epsilon!r}")

    @property
    def needs_teacher(self) -> bool:
        return self.framework in TEACHER_FRAMEWORKS


@dataclass
class LossResult:
    loss: float
    grad_student_logits: np.ndarray
    rectified_fraction: float = 0.0
    ce: float = 0.0
    kl: float = 0.0


def one_hot(labels, classes: int) -> np.ndarray:
    labels = np.asarray(labels)
    out = np.zeros((labels.shape[0], classes))
    out[np.arange(labels.shape[0]), labels] = 1.0
    return out


def _check_batch(student, labels) -> tuple[np.ndarray, np.ndarray]:
    student = np.asarray(student, dtype=np.float64)
    labels = np.asarray(labels)
    if student.ndim != 2:
        raise ValueError(f"student logits must be batch×classes, got shape {student.shape}")
    if labels.shape != (student.shape[0],):
        raise ValueError(f"labels shape {labels.shape} does not match batch size {student.shape[0]}")
    if labels.size and (labels.min() < 0 or labels.max() >= student.shape[1]):
        raise ValueError(f"labels must lie in [0, {student.shape[1]})")
    return student, labels.astype(np.int64)


def _check_teacher(teacher, student: np.ndarray) -> np.ndarray:
    teacher = np.asarray(teacher, dtype=np.float64)
    if teacher.shape != student.shape:
        raise ValueError(f"teacher shape {teacher.shape} does not match student shape {student.shape}")
    return teacher


def cross_entropy(student, labels) -> LossResult:
    student, labels = _check_batch(student, labels)
    n, k = student.shape
    logp = log_softmax_tau(student, 1.0)
    loss = float(-logp[np.arange(n), labels].mean())
    grad = (np.exp(logp) - one_hot(labels, k)) / n
    return LossResult(loss, grad, ce=loss)


def kl_divergence(teacher_probs, student_probs) -> float:
    """Batch mean of KL(teacher || student); zero-probability teacher terms contribute 0."""
    p = np.asarray(teacher_probs, dtype=np.float64)
    q = np.asarray(student_probs, dtype=np.float64)
    if p.shape != q.shape:
        raise ValueError(f"shape mismatch: {p.shape} vs {q.shape}")
    if p.ndim == 1:
        p, q = p[None, :], q[None, :]
    for name, m in (("teacher", p), ("student", q)):
        if np.any(m < 0) or not np.allclose(m.sum(axis=1), 1.0, rtol=0, atol=1e-9):
            raise ValueError(f"{name} rows are not probability vectors")
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * (np.log(p) - np.log(q)), 0.0)
    return float(terms.sum(axis=1).mean())


def _kl_logits(student: np.ndarray, teacher: np.ndarray, tau: float) -> tuple[float, np.ndarray]:
    """KL(softmax(teacher/tau) || softmax(student/tau)) and its gradient w.r.t. student."""
    n = student.shape[0]
    log_pt = log_softmax_tau(teacher, tau)
    log_ps = log_softmax_tau(student, tau)
    pt = np.exp(log_pt)
    kl = float((pt * (log_pt - log_ps)).sum(axis=1).mean())
    grad = (np.exp(log_ps) - pt) / (tau * n)
    return kl, grad


def kd_loss(student, teacher, labels, cfg: DistillConfig) -> LossResult:
    """(1 - alpha) * CE(student, labels) + alpha * KL(teacher^tau || student^tau)."""
    student, labels = _check_batch(student, labels)
    teacher = _check_teacher(teacher, student)
    ce = cross_entropy(student, labels)
    kl, kl_grad = _kl_logits(student, teacher, cfg.tau)
    if cfg.kd_grad_scale:
        scale = cfg.tau * cfg.tau
        kl, kl_grad = kl * scale, kl_grad * scale
    a = cfg.alpha
    loss = (1.0 - a) * ce.loss
    grad = (1.0 - a) * ce.grad_student_logits
    # Skipping the zero-weight term keeps alpha=0 bit-identical to plain CE.
    if a != 0.0:
        loss = loss + a * kl
        grad = grad + a * kl_grad
    return LossResult(loss, grad, ce=ce.loss, kl=kl)


def rectify(teacher, labels) -> tuple[np.ndarray, float]:
    """Swap each wrong teacher row's max logit with its true-class logit.

    Returns a new array and the fraction of rows that were swapped.
    """
    teacher = np.array(teacher, dtype=np.float64)
    labels = np.asarray(labels).astype(np.int64)
    if teacher.ndim != 2 or labels.shape != (teacher.shape[0],):
        raise ValueError(f"shape mismatch: teacher {teacher.shape}, labels {labels.shape}")
    n = teacher.shape[0]
    if n == 0:
        return teacher, 0.0
    rows = np.arange(n)
    top = argmax_row(teacher)
    wrong = top != labels
    r, j, l = rows[wrong], labels[wrong], top[wrong]
    held = teacher[r, j].copy()
    teacher[r, j] = teacher[r, l]
    teacher[r, l] = held
    return teacher, float(np.count_nonzero(wrong)) / n


def drkd_loss(student, teacher, labels, cfg: DistillConfig) -> LossResult:
    """KD loss against the rectified teacher."""
    student, labels = _check_batch(student, labels)
    teacher = _check_teacher(teacher, student)
    fixed, frac = rectify(teacher, labels)
    res = kd_loss(student, fixed, labels, cfg)
    res.rectified_fraction = frac
    return res


def lsr_loss(student, labels, cfg: DistillConfig) -> LossResult:
    """Cross-entropy against ``(1 - eps) * one_hot + eps / classes``."""
    student, labels = _check_batch(student, labels)
    n, k = student.shape
    eps = cfg.lsr_epsilon
    logp = log_softmax_tau(student, 1.0)
    target = (1.0 - eps) * one_hot(labels, k) + eps / k
    loss = float(-(target * logp).sum(axis=1).mean())
    grad = (np.exp(logp) - target) / n
    ce = float(-logp[np.arange(n), labels].mean())
    return LossResult(loss, grad, ce=ce)


def compute_loss(student, labels, cfg: DistillConfig, teacher=None) -> LossResult:
    """Dispatch on ``cfg.framework``. tfkd_self is plain KD with a self-teacher."""
    fw = cfg.framework
    if fw == "baseline":
        return cross_entropy(student, labels)
    if fw == "lsr":
        return lsr_loss(student, labels, cfg)
    if teacher is None:
        raise ValueError(f"framework {fw!r} needs teacher logits")
    if fw == "drkd":
        return drkd_loss(student, teacher, labels, cfg)
    return kd_loss(student, teacher, labels, cfg)
