"""Deletion diagnostics: counterfactual class removal drives the relation matrices."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .autodiff import cross_entropy_map, no_grad
from .grouping import SemanticBank
from .interaction import RelationState

log = logging.getLogger(__name__)

DELETION_MODES = ("balanced", "random")
NORMALIZATIONS = ("global", "pixels")


@dataclass
class DeletionCounter:
    """How often each class has been deleted; counts start at 1."""

    count: np.ndarray
    mode: str = "balanced"

    def __post_init__(self):
        if self.mode not in DELETION_MODES:
            raise ValueError(f"mode must be one of {DELETION_MODES}")
        self.count = np.asarray(self.count, dtype=np.int64)

    @classmethod
    def fresh(cls, num_classes: int, mode: str = "balanced") -> "DeletionCounter":
        return cls(np.ones(num_classes, dtype=np.int64), mode)


def deletion_probabilities(present_ids: Sequence[int], counter: DeletionCounter) -> np.ndarray:
    ids = np.asarray(present_ids, dtype=np.intp)
    if counter.mode == "random":
        return np.full(ids.size, 1.0 / ids.size)
    inv = 1.0 / counter.count[ids]
    return inv / inv.sum()


def sample_deletion(present_ids: Sequence[int], counter: DeletionCounter, rng: np.random.Generator) -> int | None:
    """Draw the class to delete and bump its count; None when fewer than two classes."""
    if len(present_ids) < 2:
        return None
    probs = deletion_probabilities(present_ids, counter)
    i = int(present_ids[int(rng.choice(len(present_ids), p=probs))])
    counter.count[i] += 1
    return i


@dataclass
class RelationDelta:
    deleted: int
    pairs: list[tuple[int, float, float]] = field(default_factory=list)


def relation_delta(
    deleted: int,
    loss_map: np.ndarray,
    cf_loss_map: np.ndarray,
    gt: np.ndarray,
    reserved: Sequence[int],
    num_classes: int,
    normalization: str = "global",
) -> RelationDelta:
    """Mean and spread changes of per-class losses after deleting one class.

    With ``normalization="global"`` both sums are divided by ``K*H*W``; with
    ``"pixels"`` by the number of pixels of the reserved class.
    """
    if normalization not in NORMALIZATIONS:
        raise ValueError(f"normalization must be one of {NORMALIZATIONS}")
    loss_map, cf_loss_map, gt = np.asarray(loss_map), np.asarray(cf_loss_map), np.asarray(gt)
    denom = num_classes * gt.size
    delta = RelationDelta(deleted)
    for j in reserved:
        if j == deleted:
            continue
        sel = gt == j
        if not sel.any():
            continue
        l_j, lp_j = loss_map[sel], cf_loss_map[sel]
        d = denom if normalization == "global" else l_j.size
        r_mean = (lp_j.sum() - l_j.sum()) / d
        r_var = (((lp_j - lp_j.mean()) ** 2).sum() - ((l_j - l_j.mean()) ** 2).sum()) / d
        delta.pairs.append((int(j), float(r_mean), float(r_var)))
    return delta


def diagnose(
    model,
    bank: SemanticBank,
    deleted: int,
    state: RelationState,
    pseudo_labels: np.ndarray,
    context,
    gt: np.ndarray,
    loss_map: np.ndarray,
    normalization: str = "global",
) -> RelationDelta:
    """Counterfactual pass for one image with ``deleted`` removed from the bank.

    ``context`` is that image's ``C_e(R_p)`` ([Z, h, w]) and ``loss_map`` the
    intact pass's full-resolution loss.  Nothing is recorded for gradients.
    """
    if deleted not in bank.index_of:
        raise ValueError(f"class {deleted} has no pseudo-label pixels in this image")
    reduced = bank.without(deleted)
    gt = np.asarray(gt)
    with no_grad():
        ctx = context.reshape((1,) + context.shape)
        logits = model.head([reduced], pseudo_labels[None], ctx, (state.mean, state.var),
                            gt.shape, skip_ids=[deleted])
        cf_map, _ = cross_entropy_map(logits, gt[None])
    return relation_delta(deleted, loss_map, cf_map.data[0], gt, reduced.present_ids,
                          state.num_classes, normalization)


def merge_deltas(deleted: int, deltas: Sequence[RelationDelta]) -> RelationDelta:
    """Average per-pair deltas over the images of one batch."""
    acc: dict[int, list[tuple[float, float]]] = {}
    for d in deltas:
        for j, rm, rv in d.pairs:
            acc.setdefault(j, []).append((rm, rv))
    pairs = [(j, float(np.mean([v[0] for v in vals])), float(np.mean([v[1] for v in vals])))
             for j, vals in sorted(acc.items())]
    return RelationDelta(deleted, pairs)


def update_relations(state: RelationState, delta: RelationDelta) -> RelationState:
    """EMA of each observed pair into both matrices; the diagonal is never touched."""
    i = delta.deleted
    for j, r_mean, r_var in delta.pairs:
        if j == i:
            continue
        state.mean[i, j] = state.m_mean * r_mean + (1 - state.m_mean) * state.mean[i, j]
        state.var[i, j] = state.m_var * r_var + (1 - state.m_var) * state.var[i, j]
    return state


class DiagnosticsLog:
    """Append-only rows ``(iteration, deleted_id, reserved_id, r_mean, r_var)``.

    A skipped iteration is logged with empty ids and values.
    """

    header = ("iteration", "deleted_id", "reserved_id", "r_mean", "r_var")

    def __init__(self, path: str | Path | None = None):
        self.rows: list[tuple] = []
        self.path = Path(path) if path is not None else None
        if self.path is not None and not self.path.exists():
            with self.path.open("w", newline="") as fh:
                csv.writer(fh).writerow(self.header)

    def append(self, rows: Sequence[tuple]) -> None:
        self.rows.extend(rows)
        if self.path is not None:
            with self.path.open("a", newline="") as fh:
                csv.writer(fh).writerows(rows)


@dataclass
class DiagnosticsHook:
    """Per-iteration orchestration: sample, diagnose each affected image, update."""

    counter: DeletionCounter
    rng: np.random.Generator
    log: DiagnosticsLog = field(default_factory=DiagnosticsLog)
    normalization: str = "global"

    def run(self, iteration: int, model, state: RelationState, out, gt: np.ndarray,
            loss_map: np.ndarray) -> RelationDelta | None:
        gt = np.asarray(gt)
        loss_map = np.asarray(loss_map.data if hasattr(loss_map, "data") else loss_map)
        eligible = [b for b, bank in enumerate(out.banks) if len(bank) >= 2]
        present = sorted(set().union(*(out.banks[b].present_ids for b in eligible))) if eligible else []
        deleted = sample_deletion(present, self.counter, self.rng)
        if deleted is None:
            self.log.append([(iteration, "", "", "", "")])
            return None
        try:
            deltas = [
                diagnose(model, out.banks[b], deleted, state, out.pseudo[b], out.context[b].detach(),
                         gt[b], loss_map[b], self.normalization)
                for b in eligible
                if deleted in out.banks[b].index_of
            ]
            delta = merge_deltas(deleted, deltas)
            if not all(np.isfinite(v) for _, rm, rv in delta.pairs for v in (rm, rv)):
                raise FloatingPointError("non-finite relation delta")
        except Exception:  # diagnostics must never take down the training step
            log.exception("diagnostics aborted at iteration %d", iteration)
            return None
        update_relations(state, delta)
        self.log.append([(iteration, deleted, j, rm, rv) for j, rm, rv in delta.pairs])
        return delta
