"""Paired baseline-vs-IDR runs on the planted co-occurrence scenes."""

from __future__ import annotations

import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import RunConfig
from .scenes import SceneRule
from .train import Trainer, inspect_relations, top_off_diagonal

# Desk settings for the paired experiment: the defaults except a batch of 4
# and diagnostics reusing the intact forward pass, which together keep five
# paired seeds inside a 15 minute single-core budget.
PAIRED_DEFAULTS = dict(batch_size=4, diagnostics_timing="before_step", eval_every=0)


@dataclass
class PairResult:
    seed: int
    baseline_miou: float
    idr_miou: float
    baseline_iou: list
    idr_iou: list
    relation_rank: int  # 1-based rank of M_r_mean[cue, dependent] among off-diagonal entries
    top_pairs: list  # top-5 off-diagonal entries, as reported by inspect_relations
    seconds: float

    @property
    def delta(self) -> float:
        return self.idr_miou - self.baseline_miou


def relation_rank(matrix: np.ndarray, i: int, j: int) -> int:
    pairs = top_off_diagonal(matrix, n=matrix.shape[0] ** 2)
    return next(r for r, (a, b, _) in enumerate(pairs, 1) if (a, b) == (i, j))


def paired_run(seed: int, base: RunConfig | None = None, out_dir=None) -> PairResult:
    """Train a baseline and an IDR model from one seed and compare them on val.

    With ``out_dir`` the IDR checkpoint is written there and its relations are
    read back through :func:`inspect_relations`; otherwise from memory.
    """
    base = base or RunConfig(**PAIRED_DEFAULTS)
    start = time.perf_counter()
    runs = {}
    for idr in (False, True):
        trainer = Trainer(base.replace(seed=seed, idr=idr))
        trainer.train()
        runs[idr] = trainer
    rule = SceneRule()
    reports = {k: t.evaluate() for k, t in runs.items()}
    mean = runs[True].state.mean
    top = top_off_diagonal(mean)
    if out_dir is not None:
        ckpt = Path(out_dir) / "checkpoint"
        runs[True].save(ckpt)
        top = inspect_relations(ckpt, Path(out_dir) / "relations").top_pairs
    return PairResult(
        seed=seed,
        baseline_miou=reports[False].mean,
        idr_miou=reports[True].mean,
        baseline_iou=reports[False].per_class(),
        idr_iou=reports[True].per_class(),
        relation_rank=relation_rank(mean, rule.cue, rule.dependent),
        top_pairs=top,
        seconds=time.perf_counter() - start,
    )
