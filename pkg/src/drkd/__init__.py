"""Knowledge distillation with dynamically rectified self-teachers."""

from .losses import (DistillConfig, LossResult, compute_loss, cross_entropy, drkd_loss, kd_loss,
                     kl_divergence, lsr_loss, rectify)
from .numeric import argmax_row, finite_diff_grad, log_softmax_tau, softmax_tau

__all__ = [
    "DistillConfig", "LossResult", "argmax_row", "compute_loss", "cross_entropy", "drkd_loss",
    "finite_diff_grad", "kd_loss", "kl_divergence", "log_softmax_tau", "lsr_loss", "rectify",
    "softmax_tau",
]
__version__ = "0.1.0"
