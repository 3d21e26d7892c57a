"""Pseudo labels, semantic-level grouping and class-enhancement prototypes."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .autodiff import (
    Function,
    ShapeError,
    Tensor,
    argmax_channels,
    concat,
    conv2d,
    matmul,
    softmax,
)

PROTOTYPE_MODES = ("none", "orthogonal", "dataset_level")


class CapacityError(ValueError):
    """More orthonormal rows were requested than the feature width allows."""


class PrototypeModeError(RuntimeError):
    """An operation was called on a prototype store of the wrong mode."""


@dataclass
class PseudoLabelField:
    probs: Tensor  # [K, h, w]
    labels: np.ndarray  # [h, w]


@dataclass
class SemanticBank:
    """Per-image semantic rows, one per class present in the pseudo labels.

    ``pooled`` holds the probability-weighted sums of ``R_p ⊕ R_ie`` (2Z wide);
    ``rows`` is ``R_sl`` after the learned 2Z→Z projection.
    """

    present_ids: tuple[int, ...]
    pooled: Tensor | None
    rows: Tensor
    index_of: dict[int, int] = field(init=False)

    def __post_init__(self):
        ids = list(self.present_ids)
        if ids != sorted(set(ids)):
            raise ValueError("present_ids must be strictly increasing")
        self.index_of = {k: i for i, k in enumerate(ids)}

    def __len__(self):
        return len(self.present_ids)

    def without(self, class_id: int) -> "SemanticBank":
        keep = [i for i, k in enumerate(self.present_ids) if k != class_id]
        if len(keep) == len(self.present_ids):
            raise KeyError(f"class {class_id} not in bank {self.present_ids}")
        ids = tuple(self.present_ids[i] for i in keep)
        idx = np.array(keep, dtype=np.intp)
        pooled = None if self.pooled is None else self.pooled[idx]
        return SemanticBank(ids, pooled, self.rows[idx])


def predict_coarse(features: Tensor, weight: Tensor, bias: Tensor) -> PseudoLabelField:
    """``P_c = softmax(F_C(features))`` and ``Y_c = argmax(P_c)`` for one image."""
    if features.ndim != 3:
        raise ShapeError(f"expected [Z, h, w] features, got {features.shape}")
    logits = conv2d(features.reshape((1,) + features.shape), weight, bias)
    probs = softmax(logits, axis=1)
    probs = probs.reshape(probs.shape[1:])
    return PseudoLabelField(probs, argmax_channels(probs.data, axis=0))


class GroupPool(Function):
    """Per-class probability-weighted average of pixel columns.

    For class ``k`` with region ``S_k = {p : labels[p] == k}`` the output row is
    ``sum_{p in S_k} (P[k, p] / sum_{q in S_k} P[k, q]) * X[:, p]``.  Sums run
    sequentially in row-major pixel order so results are reproducible to the bit.
    """

    def forward(self, probs, feats, labels, present):
        self.probs, self.feats = probs, feats
        self.regions, self.weights, self.norms = [], [], []
        out = np.empty((len(present), feats.shape[0]))
        for r, k in enumerate(present):
            idx = np.flatnonzero(labels == k)
            if idx.size == 0:
                raise ValueError(f"class {k} has no pixels")
            pk = probs[k, idx]
            s = np.add.accumulate(pk)[-1]
            w = pk / s
            out[r] = np.add.accumulate(w[None, :] * feats[:, idx], axis=1)[:, -1]
            self.regions.append(idx)
            self.weights.append(w)
            self.norms.append(s)
        self.present = present
        self.out = out
        return out

    def backward(self, g):
        dp = np.zeros_like(self.probs)
        dx = np.zeros_like(self.feats)
        for r, k in enumerate(self.present):
            idx, w, s = self.regions[r], self.weights[r], self.norms[r]
            dx[:, idx] += g[r][:, None] * w[None, :]
            dw = g[r] @ self.feats[:, idx]
            dp[k, idx] = (dw - dw @ w) / s
        return dp, dx


def group_pool(probs: Tensor, feats: Tensor, labels: np.ndarray, present: Sequence[int]) -> Tensor:
    return GroupPool.apply(probs, feats, labels=np.asarray(labels).ravel(), present=tuple(present))


def group(
    features: Tensor,
    pseudo: PseudoLabelField,
    store: "PrototypeStore",
    proj_w: Tensor,
    proj_b: Tensor,
) -> SemanticBank:
    """Group ``R_p`` ([Z, h, w]) into one row per pseudo-label class.

    Each pixel contributes ``R_p[:, i, j] ⊕ R_ie[k]`` weighted by its class
    probability normalised over the class region; the 2Z-wide sums are then
    projected to Z.
    """
    z, h, w = features.shape
    k_classes = pseudo.probs.shape[0]
    if pseudo.probs.shape[1:] != (h, w) or pseudo.labels.shape != (h, w):
        raise ShapeError("features and pseudo-label field disagree on spatial extents")
    if store.prototypes.shape != (k_classes, z):
        raise ShapeError(f"prototype store is {store.prototypes.shape}, expected {(k_classes, z)}")
    labels = pseudo.labels.ravel()
    present = tuple(int(k) for k in np.unique(labels))
    ie_cols = Tensor(store.prototypes[labels].T)
    cols = concat([features.reshape(z, h * w), ie_cols], axis=0)
    pooled = group_pool(pseudo.probs.reshape(k_classes, h * w), cols, labels, present)
    rows = matmul(pooled, proj_w.transpose()) + proj_b
    return SemanticBank(present, pooled, rows)


@dataclass
class PrototypeStore:
    """Class-enhancement vectors ``R_ie`` ([K, Z]).

    ``orthogonal`` rows are frozen; ``dataset_level`` rows start at zero and
    move only through :func:`update_prototypes`; ``none`` stays zero.
    """

    prototypes: np.ndarray
    mode: str = "none"
    momentum: float = 0.1
    seed: int | None = None

    def __post_init__(self):
        if self.mode not in PROTOTYPE_MODES:
            raise ValueError(f"mode must be one of {PROTOTYPE_MODES}")
        self.prototypes = np.asarray(self.prototypes, dtype=np.float64)

    @classmethod
    def zeros(cls, num_classes: int, channels: int, mode: str = "none", momentum: float = 0.1):
        return cls(np.zeros((num_classes, channels)), mode, momentum)


def make_orthogonal_prototypes(num_classes: int, channels: int, seed: int) -> PrototypeStore:
    """Orthonormal rows from the QR factor of a seeded Gaussian matrix.

    Column signs are fixed by ``sign(diag(R))`` so the factorisation is unique.
    """
    if num_classes > channels:
        raise CapacityError(f"cannot fit {num_classes} orthonormal rows in {channels} dimensions")
    gauss = np.random.default_rng(seed).standard_normal((channels, num_classes))
    q, r = np.linalg.qr(gauss)
    signs = np.sign(np.diag(r))
    signs[signs == 0] = 1.0
    return PrototypeStore(np.ascontiguousarray((q * signs).T), "orthogonal", seed=seed)


def class_means(features: np.ndarray, labels: np.ndarray, num_classes: int) -> dict[int, np.ndarray]:
    """Mean feature per label over ``[Z, h, w]`` or ``[B, Z, h, w]`` maps."""
    feats = np.asarray(features)
    labels = np.asarray(labels)
    if feats.ndim == 3:
        feats, labels = feats[None], labels[None]
    z = feats.shape[1]
    flat = feats.transpose(1, 0, 2, 3).reshape(z, -1)
    lab = labels.ravel()
    means = {}
    for k in range(num_classes):
        sel = lab == k
        if sel.any():
            means[k] = flat[:, sel].mean(axis=1)
    return means


def update_prototypes(store: PrototypeStore, features, gt_down: np.ndarray) -> PrototypeStore:
    """EMA step ``R_ie[k] <- (1 - m) R_ie[k] + m R_gt[k]`` for classes in ``gt_down``.

    ``features`` are detached ``R_p`` maps at the resolution of ``gt_down``.
    """
    if store.mode != "dataset_level":
        raise PrototypeModeError(f"prototype updates need dataset_level mode, store is {store.mode!r}")
    data = features.data if isinstance(features, Tensor) else np.asarray(features)
    m = store.momentum
    for k, r_gt in class_means(data, gt_down, store.prototypes.shape[0]).items():
        store.prototypes[k] = store.prototypes[k] * (1 - m) + r_gt * m
    return store
