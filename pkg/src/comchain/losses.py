"""Contrastive task loss, inverse feature distillation, and α calibration.

All losses are batch-mean normalized. Caption features are grouped by image:
rows ``i*M .. i*M+M-1`` of the text matrix belong to image ``i``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import (
    ContractError,
    DimensionError,
    Tensor,
    add,
    exp,
    log_softmax,
    matmul,
    mul,
    scale,
    sum_,
    sum_of_squares,
    transpose,
)
from .numerics.tensor import _as_tensor

MAX_LOGIT_SCALE = float(np.log(100.0))


class CalibrationError(ValueError):
    pass


@dataclass
class ContrastiveBatch:
    """l2-normalized image features (N, d), caption features (N*M, d), and the
    inverse temperature ``1/τ`` (a Tensor for a learnable scale, or a float)."""

    images: Tensor
    texts: Tensor
    inv_temperature: Tensor | float
    captions_per_image: int = 1

    @classmethod
    def from_temperature(cls, images, texts, tau: float, captions_per_image: int = 1):
        if not tau > 0:
            raise ContractError(f"temperature must be > 0, got {tau}")
        return cls(_as_tensor(images), _as_tensor(texts), 1.0 / tau, captions_per_image)

    @classmethod
    def from_logit_scale(cls, images, texts, logit_scale, captions_per_image: int = 1):
        return cls(_as_tensor(images), _as_tensor(texts), exp(logit_scale), captions_per_image)


def _check(batch: ContrastiveBatch) -> tuple[int, int]:
    n, d = batch.images.shape
    m = batch.captions_per_image
    if batch.texts.shape != (n * m, d):
        raise DimensionError("contrastive", batch.images.shape, batch.texts.shape,
                             detail=f"expected texts ({n * m}, {d}) for M={m}")
    s = batch.inv_temperature
    if not isinstance(s, Tensor) and not s > 0:
        raise ContractError(f"inverse temperature must be > 0, got {s}")
    return n, m


def _logits(batch: ContrastiveBatch) -> Tensor:
    """(N*M, N) caption-by-image similarity scaled by 1/τ."""
    sims = matmul(batch.texts, transpose(batch.images))
    s = batch.inv_temperature
    return mul(sims, s) if isinstance(s, Tensor) else scale(sims, s)


def _positives(n: int, m: int, dtype) -> np.ndarray:
    mask = np.zeros((n * m, n), dtype=dtype)
    mask[np.arange(n * m), np.arange(n * m) // m] = 1.0
    return mask


def t2v_loss(batch: ContrastiveBatch, logits: Tensor | None = None) -> Tensor:
    """Mean over all N·M captions of -log softmax_over_images at the matched image."""
    n, m = _check(batch)
    logits = _logits(batch) if logits is None else logits
    mask = _positives(n, m, logits.dtype)
    return scale(sum_(mul(log_softmax(logits), mask)), -1.0 / (n * m))


def v2t_loss(batch: ContrastiveBatch, logits: Tensor | None = None) -> Tensor:
    """Mean over images of the average -log softmax_over_captions at its M positives."""
    n, m = _check(batch)
    logits = _logits(batch) if logits is None else logits
    mask = _positives(n, m, logits.dtype).T * (1.0 / m)
    return scale(sum_(mul(log_softmax(transpose(logits)), mask)), -1.0 / n)


def task_loss(batch: ContrastiveBatch) -> Tensor:
    logits = _logits(batch)
    return scale(add(t2v_loss(batch, logits), v2t_loss(batch, logits)), 0.5)


@dataclass
class DistillPair:
    """Teacher features (B, d_t), student features (B, d_s) and the affine map
    ``T(x) = x @ weight.T + bias`` taking student space to teacher space."""

    teacher: Tensor | np.ndarray
    student: Tensor
    weight: Tensor | np.ndarray
    bias: Tensor | np.ndarray
    alpha: float = 1.0


def transform(pair: DistillPair) -> Tensor:
    w = _as_tensor(pair.weight)
    if w.ndim != 2 or w.shape[1] != pair.student.shape[-1]:
        raise DimensionError("ifd transform", pair.student.shape, w.shape)
    return add(matmul(pair.student, transpose(w)), pair.bias)


def raw_distill(pair: DistillPair) -> Tensor:
    """Batch-mean per-sample squared L2 distance, without α."""
    t = _as_tensor(pair.teacher)
    proj = transform(pair)
    if t.shape != proj.shape:
        raise DimensionError("ifd_loss", t.shape, proj.shape,
                             detail="teacher vs transformed student")
    return scale(sum_of_squares(add(t, scale(proj, -1.0))), 1.0 / t.shape[0])


def ifd_loss(pair: DistillPair) -> Tensor:
    if not np.isfinite(pair.alpha) or pair.alpha < 0:
        raise ContractError(f"alpha must be finite and >= 0, got {pair.alpha}")
    return scale(raw_distill(pair), pair.alpha)


def ifd_pair_loss(visual: DistillPair, text: DistillPair) -> Tensor:
    return scale(add(ifd_loss(visual), ifd_loss(text)), 0.5)


def total_loss(task, ifd_pair) -> Tensor:
    return add(task, ifd_pair)


def calibrate_alpha(task_value: float, raw_value: float, ratio: float) -> float:
    """α such that α·raw = ratio·task on the calibration batch."""
    if raw_value <= 1e-12:
        raise CalibrationError(
            f"raw distillation value {raw_value:.3g} too small to calibrate against")
    return ratio * task_value / raw_value


@dataclass
class LossBreakdown:
    l_t2v: float
    l_v2t: float
    l_task: float
    l_ifd_image: float = 0.0
    l_ifd_text: float = 0.0
    l_ifd_pair: float = 0.0
    l_total: float = 0.0
