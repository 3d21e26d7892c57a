"""Training loop, evaluation, ablation grid, relation export and gradient checks."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import checkpoint as ckpt
from .autodiff import (
    IGNORE_INDEX,
    DegenerateRowError,
    Tape,
    Tensor,
    argmax_channels,
    cross_entropy_map,
    downsample_nearest,
    no_grad,
    resize_bilinear,
)
from .config import ConfigError, RunConfig
from .diagnostics import DeletionCounter, DiagnosticsHook, DiagnosticsLog
from .grouping import PrototypeStore, make_orthogonal_prototypes, update_prototypes
from .interaction import RelationState, total_loss
from .model import SegmentationNet
from .scenes import MIoUReport, SceneRule, make_dataset, miou, sample_seeds

log = logging.getLogger(__name__)

METRIC_FIELDS = ("iteration", "L", "L_c", "L_o", "lr", "val_mIoU")


class TrainingAborted(RuntimeError):
    """Raised on a non-finite loss; ``trainer`` still holds the last good state."""

    def __init__(self, message, trainer):
        super().__init__(message)
        self.trainer = trainer


class CompatibilityError(ValueError):
    pass


def poly_lr(base_lr: float, iteration: int, total: int, power: float = 0.9) -> float:
    return base_lr * (1.0 - iteration / total) ** power


def class_names(num_classes: int) -> list[str]:
    rule = SceneRule()
    names = {0: "background", rule.cue: "cue", rule.dependent: "dependent", rule.ambiguity: "lookalike"}
    return [names.get(k, f"distractor_{k}") for k in range(num_classes)]


def augment(image: np.ndarray, gt: np.ndarray, rng: np.random.Generator, cfg: RunConfig):
    """Random scale, random crop back to the input size, random horizontal flip."""
    _, h, w = image.shape
    s = rng.uniform(cfg.aug_scale_min, cfg.aug_scale_max)
    nh, nw = max(8, int(round(h * s))), max(8, int(round(w * s)))
    img = resize_bilinear(image, (nh, nw))
    rows = np.minimum(((np.arange(nh) + 0.5) * h / nh).astype(np.intp), h - 1)
    cols = np.minimum(((np.arange(nw) + 0.5) * w / nw).astype(np.intp), w - 1)
    lab = gt[np.ix_(rows, cols)]
    ph, pw = max(h, nh), max(w, nw)
    canvas = np.zeros((3, ph, pw))
    labels = np.full((ph, pw), IGNORE_INDEX, dtype=gt.dtype)
    canvas[:, :nh, :nw] = img
    labels[:nh, :nw] = lab
    y = int(rng.integers(0, ph - h + 1))
    x = int(rng.integers(0, pw - w + 1))
    canvas, labels = canvas[:, y:y + h, x:x + w], labels[y:y + h, x:x + w]
    if cfg.aug_flip and rng.random() < 0.5:
        canvas, labels = canvas[:, :, ::-1], labels[:, ::-1]
    return np.ascontiguousarray(canvas), np.ascontiguousarray(labels)


@dataclass
class Streams:
    init: np.random.Generator
    order: np.random.Generator
    aug: np.random.Generator
    deletion: np.random.Generator
    train_seed: int
    val_seed: int

    @classmethod
    def from_seed(cls, seed: int) -> "Streams":
        ss = np.random.SeedSequence(seed)
        init, order, aug, deletion, scenes = ss.spawn(5)
        train_seed, val_seed = (int(v) for v in scenes.generate_state(2))
        return cls(*(np.random.default_rng(s) for s in (init, order, aug, deletion)), train_seed, val_seed)


def build_store(cfg: RunConfig, seed: int) -> PrototypeStore:
    if cfg.enhancement == "orthogonal":
        store = make_orthogonal_prototypes(cfg.num_classes, cfg.channels, seed)
        store.momentum = cfg.prototype_momentum
        return store
    return PrototypeStore.zeros(cfg.num_classes, cfg.channels, cfg.enhancement, cfg.prototype_momentum)


def scene_set(cfg: RunConfig, count: int, master_seed: int):
    rules = (SceneRule(cue_prob=cfg.cue_prob),)
    samples = make_dataset(count, rules, cfg.num_classes, cfg.height, cfg.width, master_seed)
    images = np.stack([s.image for s in samples])
    labels = np.stack([s.gt for s in samples]).astype(np.int64)
    return images, labels


@dataclass
class Trainer:
    config: RunConfig
    out_dir: Path | None = None
    frozen: set = field(default_factory=set)

    def __post_init__(self):
        cfg = self.config
        if self.out_dir is not None:
            self.out_dir = Path(self.out_dir)
            self.out_dir.mkdir(parents=True, exist_ok=True)
        self.streams = Streams.from_seed(cfg.seed)
        self.model = SegmentationNet(cfg.model_config(), self.streams.init)
        self.store = build_store(cfg, cfg.seed)
        self.state = RelationState.identity(cfg.num_classes, cfg.m_mean, cfg.m_var)
        self.counter = DeletionCounter.fresh(cfg.num_classes, cfg.deletion_mode)
        self.iteration = 0
        self.metrics: list[dict] = []
        self.train_images, self.train_labels = scene_set(cfg, cfg.train_size, self.streams.train_seed)
        self.val_images, self.val_labels = scene_set(cfg, cfg.val_size, self.streams.val_seed)
        log_path = self.out_dir / "diagnostics.csv" if self.out_dir is not None else None
        self.hook = DiagnosticsHook(self.counter, self.streams.deletion, DiagnosticsLog(log_path),
                                    cfg.delta_normalization)
        self._relation_params = {}
        if cfg.idr and cfg.relation_update == "backprop":
            self._relation_params = {
                "relation.mean": Tensor(self.state.mean, True, "relation.mean"),
                "relation.var": Tensor(self.state.var, True, "relation.var"),
            }
        self.velocity = {name: np.zeros_like(t.data) for name, t in self.trainable().items()}

    # -- state -------------------------------------------------------------

    def trainable(self) -> dict[str, Tensor]:
        return {**self.model.params, **self._relation_params}

    def relations(self):
        if self._relation_params:
            return self._relation_params["relation.mean"], self._relation_params["relation.var"]
        return self.state.mean, self.state.var

    # -- iteration ---------------------------------------------------------

    def next_batch(self):
        cfg = self.config
        idx = self.streams.order.integers(0, len(self.train_images), size=cfg.batch_size)
        pairs = [augment(self.train_images[i], self.train_labels[i], self.streams.aug, cfg) for i in idx]
        return np.stack([p[0] for p in pairs]), np.stack([p[1] for p in pairs])

    def forward_loss(self, images, labels):
        out = self.model.forward(images, self.relations(), self.store)
        return out, total_loss(out.coarse_logits, out.logits, labels, self.config.alpha)

    def compute_gradients(self, images, labels, run_diagnostics: bool = False):
        """Forward and backward on one batch; returns ``(output, loss_terms)``."""
        params = self.trainable()
        for t in params.values():
            t.grad = None
        with Tape() as tape:
            out, loss = self.forward_loss(images, labels)
        if not np.isfinite(loss.total.data):
            raise TrainingAborted(f"non-finite loss at iteration {self.iteration}", self)
        tape.backward(loss.total)
        if run_diagnostics:
            self.hook.run(self.iteration, self.model, self.state, out, labels, loss.pixel_map.data)
        return out, loss

    def sgd_step(self, lr: float) -> None:
        cfg = self.config
        for name, t in self.trainable().items():
            if name in self.frozen or t.grad is None:
                continue
            g = t.grad + cfg.weight_decay * t.data
            v = self.velocity[name]
            v *= cfg.momentum
            v += g
            t.data -= lr * v

    def step(self) -> dict:
        cfg = self.config
        lr = poly_lr(cfg.base_lr, self.iteration, cfg.iterations, cfg.poly_power)
        images, labels = self.next_batch()
        diag = cfg.diagnostics_enabled
        ie_dl = cfg.idr and cfg.enhancement == "dataset_level"
        try:
            out, loss = self.compute_gradients(images, labels, diag and cfg.diagnostics_timing == "before_step")
        except DegenerateRowError:
            log.warning("iteration %d skipped: degenerate relation row", self.iteration)
            self.iteration += 1
            return {}
        gt_down = downsample_nearest(labels, cfg.height // out.features.shape[-2])
        if ie_dl and cfg.prototype_timing == "before_step":
            update_prototypes(self.store, out.features.data, gt_down)
        self.sgd_step(lr)
        if ie_dl and cfg.prototype_timing == "after_step":
            update_prototypes(self.store, out.features.data, gt_down)
        if diag and cfg.diagnostics_timing == "after_step":
            with no_grad():
                fresh = self.model.forward(images, self.relations(), self.store)
                lmap, _ = cross_entropy_map(fresh.logits, labels)
            self.hook.run(self.iteration, self.model, self.state, fresh, labels, lmap.data)
        self.iteration += 1
        row = {
            "iteration": self.iteration,
            "L": float(loss.total.data),
            "L_c": float(loss.coarse.data),
            "L_o": float(loss.final.data),
            "lr": lr,
            "val_mIoU": "",
        }
        if self.iteration == cfg.iterations or (cfg.eval_every and self.iteration % cfg.eval_every == 0):
            row["val_mIoU"] = self.evaluate().mean
        self.metrics.append(row)
        if self.out_dir is not None:
            self._append_metrics(row)
        return row

    def train(self, iterations: int | None = None) -> list[dict]:
        """Run until ``config.iterations`` (or ``iterations`` more steps)."""
        stop = self.config.iterations if iterations is None else min(self.iteration + iterations, self.config.iterations)
        while self.iteration < stop:
            self.step()
        return self.metrics

    def _append_metrics(self, row: dict) -> None:
        path = self.out_dir / "metrics.csv"
        new = not path.exists()
        with path.open("a", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=METRIC_FIELDS)
            if new:
                writer.writeheader()
            writer.writerow(row)

    # -- evaluation --------------------------------------------------------

    def predict(self, images: np.ndarray, batch: int = 16) -> np.ndarray:
        preds = []
        with no_grad():
            for s in range(0, len(images), batch):
                out = self.model.forward(images[s:s + batch], self.relations(), self.store)
                preds.append(argmax_channels(out.logits.data, axis=1))
        return np.concatenate(preds)

    def evaluate(self, split: str = "val") -> MIoUReport:
        images, labels = (self.val_images, self.val_labels) if split == "val" else (self.train_images, self.train_labels)
        return miou(self.predict(images), labels, self.config.num_classes)

    # -- checkpoints -------------------------------------------------------

    def save(self, path: str | Path) -> Path:
        tensors = {f"param/{n}": t.data for n, t in self.model.params.items()}
        tensors.update({f"velocity/{n}": v for n, v in self.velocity.items()})
        tensors["state/prototypes"] = self.store.prototypes
        tensors["state/relation_mean"] = self.state.mean
        tensors["state/relation_var"] = self.state.var
        tensors["state/deletion_counts"] = self.counter.count.astype(np.float64)
        s = self.streams
        meta = {
            "iteration": self.iteration,
            "config": self.config.to_dict(),
            "prototype_mode": self.store.mode,
            "deletion_mode": self.counter.mode,
            "rng": {k: getattr(s, k).bit_generator.state for k in ("order", "aug", "deletion")},
        }
        return ckpt.save(path, tensors, meta)

    @classmethod
    def from_checkpoint(cls, path: str | Path, out_dir=None, config: RunConfig | None = None) -> "Trainer":
        tensors, meta = ckpt.load(path)
        saved = RunConfig(**meta["config"])
        if config is not None and config.num_classes != saved.num_classes:
            raise CompatibilityError(
                f"config has {config.num_classes} classes, checkpoint has {saved.num_classes}")
        trainer = cls(saved, out_dir)
        for name, t in trainer.model.params.items():
            t.data[...] = tensors[f"param/{name}"]
        for name, v in trainer.velocity.items():
            v[...] = tensors[f"velocity/{name}"]
        trainer.store.prototypes[...] = tensors["state/prototypes"]
        trainer.state.mean[...] = tensors["state/relation_mean"]
        trainer.state.var[...] = tensors["state/relation_var"]
        trainer.counter.count[...] = tensors["state/deletion_counts"].astype(np.int64)
        for key, st in meta["rng"].items():
            getattr(trainer.streams, key).bit_generator.state = st
        trainer.iteration = int(meta["iteration"])
        return trainer


def train(config: RunConfig, out_dir=None) -> Trainer:
    trainer = Trainer(config, out_dir)
    trainer.train()
    if out_dir is not None:
        trainer.save(Path(out_dir) / "checkpoint")
    return trainer


def write_report(path: Path, report: MIoUReport, num_classes: int) -> None:
    names = class_names(num_classes)
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["class_id", "class_name", "iou"])
        for k, v in enumerate(report.per_class()):
            w.writerow([k, names[k], "" if v is None else repr(v)])
        w.writerow(["", "mIoU", repr(report.mean)])


# ---------------------------------------------------------------------------
# ablation

TOGGLES = ("IE-Orthogonal", "IE-DL", "M_r_mean", "M_r_var", "BD", "RD")


def ablation_rows(toggles: Iterable[str]) -> list[frozenset]:
    """Ablation grid rows for the requested toggles; the baseline row comes first.

    IE modes vary as none / each requested mode; relation matrices as each
    requested one alone and then together; deletion as each requested mode.
    """
    toggles = set(toggles)
    unknown = toggles - set(TOGGLES)
    if unknown:
        raise ConfigError(f"unknown ablation toggles {sorted(unknown)}")
    rows = [frozenset()]
    if not toggles:
        return rows
    ie_opts = [frozenset()] + [frozenset({t}) for t in ("IE-Orthogonal", "IE-DL") if t in toggles]
    rel = [t for t in ("M_r_mean", "M_r_var") if t in toggles]
    if len(rel) == 2:
        rel_opts = [frozenset({"M_r_mean"}), frozenset({"M_r_var"}), frozenset(rel)]
    else:
        rel_opts = [frozenset(rel or ("M_r_mean", "M_r_var"))]
    del_opts = [frozenset({t}) for t in ("BD", "RD") if t in toggles] or [frozenset({"BD"})]
    for ie in ie_opts:
        for r in rel_opts:
            for d in del_opts:
                rows.append(ie | r | d)
    return rows


def row_config(base: RunConfig, row: Iterable[str]) -> RunConfig:
    row = set(row)
    if {"IE-Orthogonal", "IE-DL"} <= row:
        raise ConfigError("IE-Orthogonal and IE-DL are mutually exclusive")
    if {"BD", "RD"} <= row:
        raise ConfigError("BD and RD are mutually exclusive")
    if not row & {"M_r_mean", "M_r_var"}:
        return base.replace(idr=False)
    enhancement = "orthogonal" if "IE-Orthogonal" in row else "dataset_level" if "IE-DL" in row else "none"
    return base.replace(
        idr=True,
        enhancement=enhancement,
        use_mean="M_r_mean" in row,
        use_var="M_r_var" in row,
        deletion_mode="random" if "RD" in row else "balanced",
        relation_update="deletion_diagnostics",
    )


def ablate(base: RunConfig, toggles: Iterable[str], out_dir=None) -> list[dict]:
    """Train one model per grid row and tabulate final validation mIoU."""
    rows = ablation_rows(toggles)
    table = []
    for row in rows:
        cfg = row_config(base, row)
        trainer = Trainer(cfg)
        trainer.train()
        entry = {t: ("x" if t in row else "") for t in TOGGLES}
        entry.update({
            "mIoU": trainer.evaluate().mean,
            "seed": cfg.seed,
            "iterations": cfg.iterations,
            "deletion_counts": " ".join(str(int(c)) for c in trainer.counter.count),
        })
        table.append(entry)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        with (out / "ablation.csv").open("w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(table[0]))
            w.writeheader()
            w.writerows(table)
        (out / "base_config.txt").write_text(base.dumps())
    return table


# ---------------------------------------------------------------------------
# relation inspection


@dataclass
class RelationSummary:
    storage_entries: int
    top_pairs: list[tuple[int, int, float]]
    files: list[Path]


def top_off_diagonal(matrix: np.ndarray, n: int = 5) -> list[tuple[int, int, float]]:
    k = matrix.shape[0]
    pairs = [(i, j, float(matrix[i, j])) for i in range(k) for j in range(k) if i != j]
    pairs.sort(key=lambda p: (-p[2], p[0], p[1]))
    return pairs[:n]


def export_relations(state: RelationState, out_dir) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    names = class_names(state.num_classes)
    paths = []
    for tag, matrix in (("mean", state.mean), ("var", state.var)):
        path = out / f"relation_{tag}.csv"
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(names)
            w.writerows([[repr(float(v)) for v in row] for row in matrix])
        paths.append(path)
    return paths


def inspect_relations(checkpoint_path, out_dir) -> RelationSummary:
    tensors, meta = ckpt.load(checkpoint_path)
    k = int(meta["config"]["num_classes"])
    state = RelationState(tensors["state/relation_mean"], tensors["state/relation_var"],
                          tensors["state/deletion_counts"].astype(np.int64))
    entries = state.storage_entries()
    if entries != 2 * k * k:
        raise AssertionError(f"relation storage holds {entries} entries, expected {2 * k * k}")
    return RelationSummary(entries, top_off_diagonal(state.mean), export_relations(state, out_dir))
