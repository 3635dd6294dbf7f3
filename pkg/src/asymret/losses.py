"""Contrastive, alignment and distillation objectives over unit-norm embeddings.

All losses take :class:`~asymret.tensor.Tensor` inputs (``[B, d]`` rows) and
return a scalar tensor, so they differentiate through the tape.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor


@dataclass(frozen=True)
class CLConfig:
    """Negatives and masking for the contrastive loss.

    ``false_negative_margin`` drops candidates scoring strictly above
    ``s_pos - margin``; ``None`` (or ``-inf``) disables masking entirely.
    """

    temperature: float = 0.05
    use_in_batch_negatives: bool = True
    use_same_tower_negatives: bool = True
    false_negative_margin: float | None = 0.0

    def __post_init__(self):
        if not self.temperature > 0:
            raise ValueError("temperature must be > 0")
        m = self.false_negative_margin
        if m is not None and math.isnan(m):
            raise ValueError("false_negative_margin must be a number or None")


VANILLA_INFONCE = CLConfig(use_same_tower_negatives=False, false_negative_margin=None)


@dataclass(frozen=True)
class KLConfig:
    teacher_temperature: float = 0.05
    student_temperature: float = 0.05

    def __post_init__(self):
        if not (self.teacher_temperature > 0 and self.student_temperature > 0):
            raise ValueError("temperatures must be > 0")


@dataclass(frozen=True)
class KernelConfig:
    degree: int = 3

    def __post_init__(self):
        if self.degree < 1:
            raise ValueError("kernel degree must be >= 1")


@dataclass
class Rotation:
    matrix: np.ndarray

    def apply(self, emb: np.ndarray) -> np.ndarray:
        """Rotate row embeddings: each row x becomes R x."""
        return np.asarray(emb) @ self.matrix.T


def score(q_emb, d_emb) -> float:
    return float(np.dot(np.asarray(q_emb, dtype=np.float64), np.asarray(d_emb, dtype=np.float64)))


def _check_batch(*xs: Tensor) -> int:
    b = xs[0].shape[0]
    if b == 0:
        raise ValueError("empty batch")
    for x in xs[1:]:
        if x.shape != xs[0].shape:
            raise ValueError(f"shape mismatch {xs[0].shape} vs {x.shape}")
    return b


def qwen_cl_loss(
    q: Tensor,
    d_pos: Tensor,
    hard_negs: Tensor | None = None,
    cfg: CLConfig = CLConfig(),
    hard_valid: np.ndarray | None = None,
) -> Tensor:
    """Batch-mean InfoNCE with hard, in-batch and same-tower negatives plus
    false-negative masking.

    ``hard_negs`` is ``[B, H, d]``; ``hard_valid`` (``[B, H]`` bool) marks
    padded slots for items with fewer than H mined negatives.
    """
    q, d_pos = T.as_tensor(q), T.as_tensor(d_pos)
    b = _check_batch(q, d_pos)
    off_diag = ~np.eye(b, dtype=bool)
    pos = (q * d_pos).sum(axis=-1)  # [B]
    blocks = [pos.reshape(b, 1)]
    valid = [np.ones((b, 1), bool)]
    if cfg.use_in_batch_negatives and b > 1:
        blocks.append(T.matmul(q, d_pos.T))
        valid.append(off_diag)
    if hard_negs is not None and hard_negs.shape[1] > 0:
        hard_negs = T.as_tensor(hard_negs)
        h = hard_negs.shape[1]
        hs = T.matmul(q.reshape(b, 1, -1), T.swap_last(hard_negs)).reshape(b, h)
        blocks.append(hs)
        valid.append(np.ones((b, h), bool) if hard_valid is None else np.asarray(hard_valid, bool))
    if cfg.use_same_tower_negatives and b > 1:
        blocks.append(T.matmul(q, q.T))
        valid.append(off_diag)
        blocks.append(T.matmul(d_pos, d_pos.T))
        valid.append(off_diag)
    scores = T.concat(blocks, axis=1) if len(blocks) > 1 else blocks[0]
    keep = np.concatenate(valid, axis=1)
    m = cfg.false_negative_margin
    if m is not None and m != -math.inf:
        thresh = pos.data[:, None] - m
        keep &= ~(scores.data > thresh)
        keep[:, 0] = True
    logits = T.where_mask(scores * (1.0 / cfg.temperature), ~keep, -np.inf)
    per_item = T.logsumexp(logits, axis=1) - pos * (1.0 / cfg.temperature)
    return per_item.mean()


def info_nce_loss(q: Tensor, d_pos: Tensor, temperature: float = 0.05) -> Tensor:
    """Vanilla InfoNCE: in-batch query-document negatives only."""
    q, d_pos = T.as_tensor(q), T.as_tensor(d_pos)
    b = _check_batch(q, d_pos)
    logits = T.matmul(q, d_pos.T) * (1.0 / temperature)
    logp = T.log_softmax(logits)
    return -(logp[np.arange(b), np.arange(b)].mean())


def l2_align_loss(student: Tensor, teacher) -> Tensor:
    """Sum over the batch of squared distances between matched embeddings."""
    student, teacher = T.as_tensor(student), T.as_tensor(teacher)
    if student.shape != teacher.shape:
        raise ValueError(f"student/teacher embedding shapes differ: {student.shape} vs {teacher.shape}")
    diff = student - teacher
    return (diff * diff).sum()


def kl_distill_loss(student_q: Tensor, teacher_q, doc_emb, cfg: KLConfig = KLConfig()) -> Tensor:
    """Mean KL(p_teacher || p_student) over in-batch positive candidates.

    Row i of ``doc_emb`` is the positive of query i; every other row is a
    negative for it.  The teacher distribution is a constant.
    """
    student_q = T.as_tensor(student_q)
    t = np.asarray(teacher_q.data if isinstance(teacher_q, Tensor) else teacher_q, dtype=student_q.data.dtype)
    d = np.asarray(doc_emb.data if isinstance(doc_emb, Tensor) else doc_emb, dtype=student_q.data.dtype)
    b = student_q.shape[0]
    if b < 1:
        raise ValueError("kl_distill_loss needs at least one query")
    if t.shape != student_q.shape or d.shape[0] != b:
        raise ValueError("teacher/doc shapes do not match the student batch")
    tl = t @ d.T / cfg.teacher_temperature
    tl = tl - tl.max(axis=1, keepdims=True)
    log_pt = tl - np.log(np.exp(tl).sum(axis=1, keepdims=True))
    pt = np.exp(log_pt)
    log_ps = T.log_softmax(T.matmul(student_q, Tensor(d.T)) * (1.0 / cfg.student_temperature))
    kl = (Tensor(pt) * (Tensor(log_pt) - log_ps)).sum(axis=1)
    return kl.mean()


def poly_kernel(u, v, cfg: KernelConfig = KernelConfig()) -> float:
    return float((np.dot(u, v) + 1.0) ** cfg.degree)


def kuea_loss(student_q: Tensor, teacher_q, cfg: KernelConfig = KernelConfig()) -> Tensor:
    """Mean squared mismatch of off-diagonal polynomial-kernel entries."""
    student_q = T.as_tensor(student_q)
    t = np.asarray(teacher_q.data if isinstance(teacher_q, Tensor) else teacher_q, dtype=student_q.data.dtype)
    b = student_q.shape[0]
    if b < 2:
        raise ValueError("kuea_loss needs B >= 2")
    if t.shape != student_q.shape:
        raise ValueError("student/teacher shapes differ")
    k_t = (t @ t.T + 1.0) ** cfg.degree
    k_s = T.power(T.matmul(student_q, student_q.T) + 1.0, cfg.degree)
    off = ~np.eye(b, dtype=bool)
    diff = T.where_mask(k_s - Tensor(k_t), ~off, 0.0)
    return (diff * diff).sum() * (1.0 / (b * (b - 1)))


def procrustes_rotation(student_emb, teacher_emb) -> Rotation:
    """Orthogonal R minimizing sum ||R s_v - t_v||^2, as U V^T of svd(sum t_v s_v^T).

    No determinant correction: a reflection is returned if that is the optimum.
    """
    s = np.asarray(student_emb, dtype=np.float64)
    t = np.asarray(teacher_emb, dtype=np.float64)
    if s.shape != t.shape or s.ndim != 2:
        raise ValueError("student and teacher validation embeddings must share shape [N, d]")
    n, d = s.shape
    if n < d:
        warnings.warn(f"only {n} validation pairs for a {d}-dim rotation; R is underdetermined", stacklevel=2)
    u, _, v = T.svd_square(t.T @ s)
    return Rotation(u @ v.T)
