"""Relation-guided interaction, scatter, augmentation head and loss."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .autodiff import (
    NEG_INF,
    DegenerateRowError,
    Function,
    ShapeError,
    Tensor,
    as_tensor,
    concat,
    conv2d,
    cross_entropy_map,
    downsample_nearest,
    masked_softmax,
    matmul,
    mul,
    softmax,
    upsample_bilinear,
)
from .grouping import SemanticBank


class BankMismatchError(ValueError):
    """A pseudo label has no row in the semantic bank."""


@dataclass
class RelationState:
    """Mean- and variance-driven K×K relation matrices plus deletion counts."""

    mean: np.ndarray
    var: np.ndarray
    counts: np.ndarray
    m_mean: float = 0.1
    m_var: float = 0.1

    @classmethod
    def identity(cls, num_classes: int, m_mean: float = 0.1, m_var: float = 0.1) -> "RelationState":
        return cls(
            np.eye(num_classes),
            np.eye(num_classes),
            np.ones(num_classes, dtype=np.int64),
            m_mean,
            m_var,
        )

    @property
    def num_classes(self) -> int:
        return self.mean.shape[0]

    def storage_entries(self) -> int:
        return int(self.mean.size + self.var.size)

    def copy(self) -> "RelationState":
        return RelationState(self.mean.copy(), self.var.copy(), self.counts.copy(), self.m_mean, self.m_var)


class ThresholdMask(Function):
    """Replace entries strictly below ``t`` with ``-inf``; gradient passes elsewhere."""

    def forward(self, x, t):
        self.keep = x >= t
        return np.where(self.keep, x, NEG_INF)

    def backward(self, g):
        return (np.where(self.keep, g, 0.0),)


def transform_relations(relations, present_ids: Sequence[int], threshold: float = 0.0) -> Tensor:
    """Restrict ``M_r`` to the present classes and mask weak entries.

    ``relations`` may be an array or a tensor (the latter when ``M_r`` is
    trained by backpropagation).
    """
    ids = np.asarray(present_ids, dtype=np.intp)
    if ids.size == 0 or np.any(np.diff(ids) <= 0):
        raise ValueError("present_ids must be nonempty and strictly increasing")
    sub = as_tensor(relations)[np.ix_(ids, ids)]
    masked = ThresholdMask.apply(sub, t=threshold)
    if not np.isfinite(masked.data).any(axis=1).all():
        raise DegenerateRowError(f"relation row fully below threshold {threshold} for ids {tuple(ids)}")
    return masked


def interact(masked: Tensor, rows: Tensor) -> Tensor:
    """``R_esl = softmax(masked, dim=1) ⊗ R_sl``; row i gathers from columns j."""
    return matmul(masked_softmax(masked, axis=1), rows)


class ScatterRows(Function):
    """Fill a ``[Z, n]`` map with ``rows[index[p]]``; ``index[p] < 0`` stays zero."""

    def forward(self, rows, index):
        self.index, self.n_rows = index, rows.shape[0]
        self.valid = index >= 0
        out = np.zeros((rows.shape[1], index.size))
        out[:, self.valid] = rows[index[self.valid]].T
        return out

    def backward(self, g):
        d = np.zeros((self.n_rows, g.shape[0]))
        np.add.at(d, self.index[self.valid], g[:, self.valid].T)
        return (d,)


def scatter(enhanced: Tensor, pseudo_labels: np.ndarray, bank: SemanticBank, skip_id: int | None = None) -> Tensor:
    """Place each pixel's semantic row back at its position: ``R_a`` ([Z, h, w]).

    Pixels whose pseudo label equals ``skip_id`` stay zero.
    """
    labels = np.asarray(pseudo_labels)
    h, w = labels.shape
    lookup = np.full(max(int(labels.max()), max(bank.present_ids)) + 1, -2, dtype=np.intp)
    for k, i in bank.index_of.items():
        lookup[k] = i
    if skip_id is not None and skip_id < lookup.size:
        lookup[skip_id] = -1
    index = lookup[labels.ravel()]
    if np.any(index == -2):
        missing = sorted(set(labels.ravel()[index == -2].tolist()))
        raise BankMismatchError(f"pseudo labels {missing} have no bank row (bank has {bank.present_ids})")
    out = ScatterRows.apply(enhanced, index=index)
    return out.reshape(enhanced.shape[1], h, w)


# ---------------------------------------------------------------------------
# augmentation head


def self_attention(x: Tensor, params: dict[str, Tensor]) -> Tensor:
    """Single-head scaled dot-product attention over all positions of ``[B, C, h, w]``."""
    b, c, h, w = x.shape
    seq = x.reshape(b, c, h * w).transpose(0, 2, 1)
    q = matmul(seq, params["sa.q.w"].transpose()) + params["sa.q.b"]
    # no key bias: it shifts each score row by a constant, which softmax ignores
    k = matmul(seq, params["sa.k.w"].transpose())
    v = matmul(seq, params["sa.v.w"].transpose()) + params["sa.v.b"]
    d = q.shape[-1]
    scores = mul(matmul(q, k.transpose(0, 2, 1)), 1.0 / np.sqrt(d))
    att = matmul(softmax(scores, axis=-1), v)
    out = matmul(att, params["sa.o.w"].transpose()) + params["sa.o.b"]
    return out.transpose(0, 2, 1).reshape(b, d, h, w)


def augment_and_predict(
    r_a_mean: Tensor,
    r_a_var: Tensor,
    context: Tensor,
    params: dict[str, Tensor],
    out_size: tuple[int, int],
):
    """Return ``(R, P_o)`` where ``P_o`` are upsampled class logits.

    ``R̃ = R_a_mean ⊕ R_a_var ⊕ C_e(R_p)`` passes through self-attention whose
    output is added back onto ``C_e(R_p)``; ``F_O`` is a 1×1 convolution and the
    logits are bilinearly upsampled to ``out_size``.
    """
    if not (r_a_mean.shape == r_a_var.shape == context.shape):
        raise ShapeError(
            f"augmentation inputs disagree: {r_a_mean.shape}, {r_a_var.shape}, {context.shape}"
        )
    augmented = concat([r_a_mean, r_a_var, context], axis=1)
    r = context + self_attention(augmented, params)
    return r, predict(r, params, out_size)


def predict(r: Tensor, params: dict[str, Tensor], out_size: tuple[int, int]) -> Tensor:
    return upsample_bilinear(conv2d(r, params["cls_o.w"], params["cls_o.b"]), out_size)


@dataclass
class LossTerms:
    total: Tensor
    coarse: Tensor
    final: Tensor
    pixel_map: Tensor  # un-reduced L_o map at full resolution
    coarse_map: Tensor


def total_loss(coarse_logits: Tensor, logits: Tensor, gt: np.ndarray, alpha: float = 0.4) -> LossTerms:
    """``L = alpha * L_c + L_o``; ``L_c`` compares against nearest-downsampled GT."""
    gt = np.asarray(gt)
    factor = gt.shape[-1] // coarse_logits.shape[-1]
    coarse_map, l_c = cross_entropy_map(coarse_logits, downsample_nearest(gt, factor))
    pixel_map, l_o = cross_entropy_map(logits, gt)
    total = l_o if alpha == 0 else mul(l_c, alpha) + l_o
    return LossTerms(total, l_c, l_o, pixel_map, coarse_map)
