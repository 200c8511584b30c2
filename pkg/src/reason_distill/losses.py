"""Training objectives for relevance distillation.

All losses reduce by batch mean unless ``reduction="sum"`` is requested.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import NORM_EPS, Tensor

N_LABELS = 3


def _reduce(per_row: Tensor, reduction: str) -> Tensor:
    if reduction == "mean":
        return per_row.mean()
    if reduction == "sum":
        return per_row.sum()
    raise ValueError(f"unknown reduction {reduction!r}")


def classification_ce(logits: Tensor, labels, reduction: str = "mean") -> Tensor:
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= logits.shape[-1]):
        raise ValueError(f"labels must lie in [0, {logits.shape[-1]}), got {labels.tolist()}")
    if labels.shape != logits.shape[:-1]:
        raise ValueError(f"{labels.shape[0] if labels.ndim else 0} labels for logits of shape {logits.shape}")
    return _reduce(-ad.pick(ad.log_softmax(logits, axis=-1), labels), reduction)


def cosine_similarity_rows(a: Tensor, b: Tensor, eps: float = NORM_EPS) -> Tensor:
    return (ad.l2_normalize(a, eps) * ad.l2_normalize(b, eps)).sum(axis=-1)


def cosine_align_loss(emb_c: Tensor, emb_r, eps: float = NORM_EPS, reduction: str = "mean") -> Tensor:
    """Mean of ``1 - cos(emb_c_i, emb_r_i)``; zero-norm rows count as cos = 0."""
    emb_r = ad.as_tensor(emb_r)
    if emb_c.shape != emb_r.shape:
        raise ValueError(f"cosine_align_loss: shapes {emb_c.shape} and {emb_r.shape} differ")
    return _reduce(1.0 - cosine_similarity_rows(emb_c, emb_r, eps), reduction)


def similarity_matrix(cls: Tensor, cls_r: Tensor, eps: float = NORM_EPS) -> Tensor:
    """``S[i, j] = cos(cls_i, cls_r_j)``."""
    return ad.matmul(ad.l2_normalize(cls, eps), ad.l2_normalize(cls_r, eps).T)


def info_nce_from_similarity(sim: Tensor, tau: float, reduction: str = "mean") -> Tensor:
    if not tau > 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    n = sim.shape[0]
    logp = ad.log_softmax(sim * (1.0 / tau), axis=-1)
    return _reduce(-ad.pick(logp, np.arange(n)), reduction)


def info_nce(cls: Tensor, cls_r: Tensor, tau: float = 0.05, reduction: str = "mean") -> Tensor:
    """In-batch contrastive alignment: row i of ``cls`` should be closest to
    row i of ``cls_r``; every other row of ``cls_r`` is a negative."""
    if cls.shape != cls_r.shape or cls.ndim != 2 or cls.shape[0] < 1:
        raise ValueError(f"info_nce: need equal N x d inputs, got {cls.shape} and {cls_r.shape}")
    if not tau > 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    return info_nce_from_similarity(similarity_matrix(cls, cls_r), tau, reduction)


def baseline_total(ce, cos, mu: float = 0.1):
    if mu < 0:
        raise ValueError("mu must be non-negative")
    return ce + mu * cos


def crsd_total(l_sce, l_tce, l_align, gamma: float = 0.01, delta: float = 0.01):
    if gamma < 0 or delta < 0:
        raise ValueError("gamma and delta must be non-negative")
    return l_sce + gamma * l_tce + delta * l_align
