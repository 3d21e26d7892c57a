"""The full segmentation network: encoder, coarse head, IDR branch, final head."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor, argmax_channels, conv2d, softmax, stack
from .backbone import EncoderConfig, ToyBackbone, uniform_init
from .grouping import PrototypeStore, PseudoLabelField, SemanticBank, group
from .interaction import augment_and_predict, interact, predict, scatter, transform_relations


@dataclass(frozen=True)
class ModelConfig:
    num_classes: int = 6
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    idr: bool = True
    use_mean: bool = True
    use_var: bool = True
    threshold: float = 0.0

    @property
    def channels(self) -> int:
        return self.encoder.feature_channels


@dataclass
class ForwardOutput:
    features: Tensor  # R_p [B, Z, h, w]
    context: Tensor  # C_e(R_p)
    coarse_logits: Tensor  # [B, K, h, w]
    coarse_probs: Tensor  # P_c
    pseudo: np.ndarray  # Y_c [B, h, w]
    logits: Tensor  # P_o before softmax, [B, K, H, W]
    banks: list[SemanticBank] = field(default_factory=list)
    r_a_mean: Tensor | None = None
    r_a_var: Tensor | None = None
    refined: Tensor | None = None


class SegmentationNet:
    """FCN-style segmenter with an optional intervention-driven relation branch.

    Shared layers are initialised first so a baseline (``idr=False``) and an
    IDR model built from the same seed start from identical shared weights.
    """

    def __init__(self, config: ModelConfig, rng: np.random.Generator):
        self.config = config
        k, z = config.num_classes, config.channels
        self.backbone = ToyBackbone(config.encoder, rng)
        p = dict(self.backbone.params)
        p["cls_c.w"] = Tensor(uniform_init(rng, (k, z, 1, 1), z), True)
        p["cls_c.b"] = Tensor(uniform_init(rng, (k,), z), True)
        p["cls_o.w"] = Tensor(uniform_init(rng, (k, z, 1, 1), z), True)
        p["cls_o.b"] = Tensor(uniform_init(rng, (k,), z), True)
        if config.idr:
            p["group.proj.w"] = Tensor(uniform_init(rng, (z, 2 * z), 2 * z), True)
            p["group.proj.b"] = Tensor(uniform_init(rng, (z,), 2 * z), True)
            for name, fan in (("q", 3 * z), ("k", 3 * z), ("v", 3 * z), ("o", z)):
                p[f"sa.{name}.w"] = Tensor(uniform_init(rng, (z, fan), fan), True)
                if name != "k":
                    p[f"sa.{name}.b"] = Tensor(uniform_init(rng, (z,), fan), True)
        for name, t in p.items():
            t.name = name
        self.params = p
        self.backbone.params = p

    def parameters(self) -> dict[str, Tensor]:
        return self.params

    def forward(self, images, relations=None, store: PrototypeStore | None = None) -> ForwardOutput:
        """Run the whole pipeline on ``[B, 3, H, W]`` images.

        ``relations`` is a ``(mean, var)`` pair of arrays or tensors; required
        when the IDR branch is on, as is ``store``.
        """
        images = np.asarray(images.data if isinstance(images, Tensor) else images)
        out_size = images.shape[-2:]
        feats = self.backbone.encode(Tensor(images))
        ctx = self.backbone.apply_context(feats)
        coarse = conv2d(ctx, self.params["cls_c.w"], self.params["cls_c.b"])
        probs = softmax(coarse, axis=1)
        pseudo = argmax_channels(probs.data, axis=1)
        if not self.config.idr:
            logits = predict(ctx, self.params, out_size)
            return ForwardOutput(feats, ctx, coarse, probs, pseudo, logits)
        if relations is None or store is None:
            raise ValueError("the IDR branch needs relation matrices and a prototype store")
        banks = [
            group(feats[b], PseudoLabelField(probs[b], pseudo[b]), store,
                  self.params["group.proj.w"], self.params["group.proj.b"])
            for b in range(images.shape[0])
        ]
        r_mean, r_var = self.relate(banks, pseudo, relations)
        refined, logits = augment_and_predict(r_mean, r_var, ctx, self.params, out_size)
        return ForwardOutput(feats, ctx, coarse, probs, pseudo, logits, banks, r_mean, r_var, refined)

    def relate(self, banks, pseudo, relations, skip_ids=None):
        """Build ``R_a,mean`` and ``R_a,var`` ([B, Z, h, w]) from per-image banks."""
        cfg = self.config
        skip_ids = skip_ids or [None] * len(banks)
        z = cfg.channels
        h, w = pseudo.shape[-2:]
        branches = []
        for matrix, enabled in zip(relations, (cfg.use_mean, cfg.use_var)):
            if not enabled:
                branches.append(Tensor(np.zeros((len(banks), z, h, w))))
                continue
            maps = []
            for bank, labels, skip in zip(banks, pseudo, skip_ids):
                masked = transform_relations(matrix, bank.present_ids, cfg.threshold)
                maps.append(scatter(interact(masked, bank.rows), labels, bank, skip))
            branches.append(stack(maps, axis=0))
        return branches[0], branches[1]

    def head(self, banks, pseudo, context: Tensor, relations, out_size, skip_ids=None) -> Tensor:
        """Rerun interaction, scatter, augmentation and prediction from given banks."""
        r_mean, r_var = self.relate(banks, pseudo, relations, skip_ids)
        return augment_and_predict(r_mean, r_var, context, self.params, out_size)[1]

    def predict_labels(self, images, relations=None, store=None) -> np.ndarray:
        from .autodiff import no_grad

        with no_grad():
            out = self.forward(images, relations, store)
        return argmax_channels(out.logits.data, axis=1)
