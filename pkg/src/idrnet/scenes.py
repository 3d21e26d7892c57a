"""Synthetic segmentation scenes with a planted class co-occurrence, plus mIoU.

Layout (rows as fractions of H):

* band zone ``[0, 3/16)``: the cue class fills the full width when present.
* distractor zone ``[1/4, 1/2)``: one column slot per distractor class, each
  holding an ``H/8 x W/4`` rectangle when that distractor is present.
* dependent zone ``[5/8, 1)``: exactly one ``H/4 x W/4`` rectangle, labelled
  with the dependent class when the cue is present and with its look-alike
  otherwise.  Both share one colour, so only the cue tells them apart.

Every other pixel is background (class 0).  Regions never overlap, which makes
the expected class-area fractions exact (:func:`area_fractions`).
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path
from typing import Sequence

import numpy as np

from .autodiff import IGNORE_INDEX

NOISE_SIGMA = 0.05
BACKGROUND = 0

_PALETTE = np.array([
    [0.50, 0.50, 0.50],  # background
    [0.20, 0.40, 0.90],
    [0.90, 0.30, 0.20],
    [0.20, 0.80, 0.30],
    [0.90, 0.85, 0.20],
    [0.60, 0.20, 0.70],
    [0.10, 0.70, 0.80],
    [0.95, 0.60, 0.80],
    [0.40, 0.25, 0.10],
])


class RuleError(ValueError):
    """The rule set cannot be laid out."""


class EvaluationError(ValueError):
    """Predictions and ground truths do not line up."""


@dataclass(frozen=True)
class SceneRule:
    cue: int = 1
    dependent: int = 2
    ambiguity: int = 3
    cue_prob: float = 0.5


DEFAULT_RULES = (SceneRule(),)


@dataclass
class SceneSample:
    image: np.ndarray  # [3, H, W] in [0, 1]
    gt: np.ndarray  # [H, W] uint8 class ids
    rule_id: int
    seed: int


def rules_id(rules: Sequence[SceneRule]) -> int:
    """Stable 32-bit identifier of a rule set."""
    return zlib.crc32(repr(tuple(rules)).encode())


def _check(rules: Sequence[SceneRule], num_classes: int, height: int, width: int) -> list[int]:
    if height % 8 or width % 8:
        raise RuleError(f"scene extents {height}x{width} must be divisible by 8")
    if num_classes < 4:
        raise RuleError("need at least 4 classes: background, cue, dependent, look-alike")
    if len(rules) != 1:
        # one band zone and one dependent zone: a second rule would overlap them
        raise RuleError(f"layout holds exactly one co-occurrence rule, got {len(rules)}")
    rule = rules[0]
    ids = (rule.cue, rule.dependent, rule.ambiguity)
    if len(set(ids)) != 3 or BACKGROUND in ids or max(ids) >= num_classes or min(ids) < 0:
        raise RuleError(f"rule classes {ids} must be distinct, non-background and < {num_classes}")
    if not 0.0 <= rule.cue_prob <= 1.0:
        raise RuleError("cue_prob must lie in [0, 1]")
    distractors = [k for k in range(1, num_classes) if k not in ids]
    if len(distractors) > width // 8:
        raise RuleError("too many distractor classes for the scene width")
    return distractors


def _zones(height: int, width: int, n_distractors: int):
    band = height * 3 // 16
    dz0, dz1 = height // 4, height // 2
    slot = width // max(n_distractors, 1)
    d_h, d_w = height // 8, min(width // 4, slot)
    b_top = height * 5 // 8
    blob = (height // 4, width // 4)
    return band, (dz0, dz1, slot, d_h, d_w), (b_top, blob)


def area_fractions(rules: Sequence[SceneRule], num_classes: int, height: int, width: int) -> np.ndarray:
    """Expected fraction of pixels per class under the generator."""
    distractors = _check(rules, num_classes, height, width)
    rule = rules[0]
    band, (_, _, _, d_h, d_w), (_, (bh, bw)) = _zones(height, width, len(distractors))
    total = height * width
    frac = np.zeros(num_classes)
    frac[rule.cue] = rule.cue_prob * band * width / total
    frac[rule.dependent] = rule.cue_prob * bh * bw / total
    frac[rule.ambiguity] = (1 - rule.cue_prob) * bh * bw / total
    for k in distractors:
        frac[k] = 0.5 * d_h * d_w / total
    frac[BACKGROUND] = 1.0 - frac.sum()
    return frac


def generate(rules: Sequence[SceneRule], num_classes: int, height: int, width: int, seed: int) -> SceneSample:
    """Deterministically draw one scene from ``seed``."""
    distractors = _check(rules, num_classes, height, width)
    rule = rules[0]
    rng = np.random.default_rng(seed)
    band, (dz0, dz1, slot, d_h, d_w), (b_top, (bh, bw)) = _zones(height, width, len(distractors))
    gt = np.zeros((height, width), dtype=np.uint8)

    cue_on = rng.random() < rule.cue_prob
    if cue_on:
        gt[:band] = rule.cue
    for n, k in enumerate(distractors):
        if rng.random() < 0.5:
            y = int(rng.integers(dz0, dz1 - d_h + 1))
            x = n * slot + int(rng.integers(0, slot - d_w + 1))
            gt[y:y + d_h, x:x + d_w] = k
    y = int(rng.integers(b_top, height - bh + 1))
    x = int(rng.integers(0, width - bw + 1))
    gt[y:y + bh, x:x + bw] = rule.dependent if cue_on else rule.ambiguity

    colours = np.array([_PALETTE[k % len(_PALETTE)] for k in range(num_classes)])
    colours[rule.ambiguity] = colours[rule.dependent]
    image = colours[gt].transpose(2, 0, 1)
    image = image + rng.normal(0.0, NOISE_SIGMA, size=image.shape)
    return SceneSample(np.clip(image, 0.0, 1.0), gt, rules_id(rules), int(seed))


def sample_seeds(master_seed: int, count: int) -> list[int]:
    return [int(s) for s in np.random.SeedSequence(master_seed).generate_state(count)]


def make_dataset(count: int, rules: Sequence[SceneRule], num_classes: int, height: int, width: int,
                 master_seed: int) -> list[SceneSample]:
    return [generate(rules, num_classes, height, width, s) for s in sample_seeds(master_seed, count)]


# ---------------------------------------------------------------------------
# evaluation


@dataclass
class MIoUReport:
    iou: list[Fraction | None]  # None where the class has zero union
    miou: Fraction

    @property
    def mean(self) -> float:
        return float(self.miou)

    def per_class(self) -> list[float | None]:
        return [None if v is None else float(v) for v in self.iou]


def confusion_matrix(preds, gts, num_classes: int, ignore_index: int = IGNORE_INDEX) -> np.ndarray:
    preds, gts = list(preds), list(gts)
    if len(preds) != len(gts):
        raise EvaluationError(f"{len(preds)} predictions for {len(gts)} ground truths")
    conf = np.zeros((num_classes, num_classes), dtype=np.int64)
    for p, g in zip(preds, gts):
        p, g = np.asarray(p), np.asarray(g)
        if p.shape != g.shape:
            raise EvaluationError(f"prediction shape {p.shape} != ground truth shape {g.shape}")
        keep = g != ignore_index
        conf += np.bincount(
            g[keep].astype(np.int64) * num_classes + p[keep].astype(np.int64),
            minlength=num_classes * num_classes,
        ).reshape(num_classes, num_classes)
    return conf


def miou(preds, gts, num_classes: int, ignore_index: int = IGNORE_INDEX) -> MIoUReport:
    """Dataset-level IoU per class (TP / (TP + FP + FN)) and their mean."""
    conf = confusion_matrix(preds, gts, num_classes, ignore_index)
    tp = np.diag(conf)
    union = conf.sum(axis=0) + conf.sum(axis=1) - tp
    iou = [Fraction(int(t), int(u)) if u else None for t, u in zip(tp, union)]
    valid = [v for v in iou if v is not None]
    mean = sum(valid, Fraction(0)) / len(valid) if valid else Fraction(0)
    return MIoUReport(iou, mean)


# ---------------------------------------------------------------------------
# flat binary dump

MAGIC = b"IDRSEG01"
_DTYPES = {1: np.dtype("<f8"), 2: np.dtype("u1")}
_CODES = {v: k for k, v in _DTYPES.items()}


def write_array(path: str | Path, array: np.ndarray) -> None:
    """Header: 8-byte magic, u8 dtype code, u8 ndim, 2 pad bytes, ndim x u32 dims."""
    array = np.ascontiguousarray(array)
    dtype = array.dtype.newbyteorder("<") if array.dtype.kind == "f" else array.dtype
    code = _CODES[np.dtype(dtype)]
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<BBxx", code, array.ndim))
        fh.write(struct.pack(f"<{array.ndim}I", *array.shape))
        fh.write(array.astype(_DTYPES[code], copy=False).tobytes())


def read_array(path: str | Path) -> np.ndarray:
    with open(path, "rb") as fh:
        if fh.read(8) != MAGIC:
            raise ValueError(f"{path}: bad magic")
        code, ndim = struct.unpack("<BBxx", fh.read(4))
        shape = struct.unpack(f"<{ndim}I", fh.read(4 * ndim))
        return np.frombuffer(fh.read(), dtype=_DTYPES[code]).reshape(shape).copy()


def dump_split(directory: str | Path, samples: Sequence[SceneSample], rules: Sequence[SceneRule]) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    write_array(directory / "images.bin", np.stack([s.image for s in samples]))
    write_array(directory / "labels.bin", np.stack([s.gt for s in samples]).astype(np.uint8))
    manifest = {
        "rule_id": rules_id(rules),
        "rules": [vars(r) for r in rules],
        "seeds": [s.seed for s in samples],
        "files": {"images": "images.bin", "labels": "labels.bin"},
    }
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2))


def load_split(directory: str | Path) -> list[SceneSample]:
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    images = read_array(directory / "images.bin")
    labels = read_array(directory / "labels.bin")
    return [SceneSample(img, lab, manifest["rule_id"], seed)
            for img, lab, seed in zip(images, labels, manifest["seeds"])]
