"""Soft targets: label smoothing, both Mixup variants, and the distillation loss."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .. import functional as F
from ..tensor import Tensor


def one_hot(labels, k: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"class ids must lie in [0, {k}), got range [{labels.min()}, {labels.max()}]")
    out = np.zeros((labels.size, k), dtype=np.float64)
    out[np.arange(labels.size), labels] = 1.0
    return out


def label_smooth(labels, k: int, eps: float = 0.1) -> np.ndarray:
    """True class gets ``1 - eps + eps / k``, every other class ``eps / k``."""
    if not 0.0 <= eps < 1.0:
        raise ValueError(f"smoothing factor must lie in [0, 1), got {eps}")
    return one_hot(labels, k) * (1.0 - eps) + eps / k


@dataclass
class MixedBatch:
    """Mixed inputs with the two target rows and the weight on the first."""

    x: np.ndarray
    targets_a: np.ndarray
    targets_b: np.ndarray
    lam: np.ndarray  # shape (N,)
    perm: np.ndarray | None = None

    def targets(self) -> np.ndarray:
        lam = self.lam[:, None]
        return lam * self.targets_a + (1.0 - lam) * self.targets_b

    def mix_rows(self, rows_a: np.ndarray, rows_b: np.ndarray) -> np.ndarray:
        """Mix any per-sample rows (teacher logits, say) with this batch's weights."""
        lam = self.lam[:, None]
        return lam * rows_a + (1.0 - lam) * rows_b


def sample_lambda(alpha: float, n: int, rng: np.random.Generator, per_sample: bool = False) -> np.ndarray:
    if alpha <= 0:
        raise ValueError(f"Mixup alpha must be > 0, got {alpha}")
    if per_sample:
        return rng.beta(alpha, alpha, size=n)
    return np.full(n, rng.beta(alpha, alpha))


def _mix(xa, xb, ta, tb, lam, perm=None) -> MixedBatch:
    shape = (-1,) + (1,) * (xa.ndim - 1)
    lam_x = lam.reshape(shape).astype(xa.dtype)
    x = lam_x * xa + (1 - lam_x) * xb
    return MixedBatch(x, ta, tb, lam, perm)


def mixup_type1(xa: np.ndarray, ta: np.ndarray, xb: np.ndarray, tb: np.ndarray, alpha: float,
                rng: np.random.Generator, lam: float | None = None, per_sample: bool = False) -> MixedBatch:
    """Mix two independent mini-batches."""
    if xa.shape != xb.shape or ta.shape != tb.shape:
        raise ValueError(f"Mixup batches must match: {xa.shape} vs {xb.shape}")
    n = xa.shape[0]
    lam_arr = np.full(n, float(lam)) if lam is not None else sample_lambda(alpha, n, rng, per_sample)
    return _mix(xa, xb, ta, tb, lam_arr)


def mixup_type2(x: np.ndarray, t: np.ndarray, alpha: float, rng: np.random.Generator,
                lam: float | None = None, per_sample: bool = False) -> MixedBatch:
    """Mix a mini-batch with a shuffled copy of itself."""
    n = x.shape[0]
    perm = rng.permutation(n)
    lam_arr = np.full(n, float(lam)) if lam is not None else sample_lambda(alpha, n, rng, per_sample)
    return _mix(x, x[perm], t, t[perm], lam_arr, perm)


def soft_cross_entropy(logits: Tensor, targets: np.ndarray) -> Tensor:
    return F.softmax_cross_entropy(logits, targets)


def kd_loss(student: Tensor, teacher_logits: np.ndarray, temperature: float = 1.0) -> Tensor:
    """``T^2 * KL(softmax(teacher / T) || softmax(student / T))``, averaged over the batch."""
    if temperature <= 0:
        raise ValueError(f"temperature must be > 0, got {temperature}")
    teacher_logits = np.asarray(teacher_logits, dtype=student.dtype)
    if teacher_logits.shape != student.shape:
        raise ValueError(f"teacher logits {teacher_logits.shape} do not match student {student.shape}")
    t = teacher_logits / temperature
    t = t - t.max(axis=1, keepdims=True)
    p = np.exp(t)
    p /= p.sum(axis=1, keepdims=True)
    log_p = np.log(np.maximum(p, np.finfo(p.dtype).tiny))
    entropy = float((p * log_p).sum(axis=1).mean())
    cross = F.softmax_cross_entropy(student * (1.0 / temperature), p)
    return (cross + entropy) * (temperature ** 2)
