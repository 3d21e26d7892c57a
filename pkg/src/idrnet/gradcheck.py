"""Finite-difference checks for every operator and for the end-to-end loss."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, finite_difference_check
from .backbone import EncoderConfig, ToyBackbone
from .grouping import group_pool, make_orthogonal_prototypes
from .interaction import ScatterRows, ThresholdMask, self_attention, total_loss
from .model import ModelConfig, SegmentationNet

TOLERANCE = 1e-4


@dataclass
class CheckOutcome:
    name: str
    max_rel_error: float
    where: str

    @property
    def passed(self) -> bool:
        return self.max_rel_error < TOLERANCE


def _leaf(rng, *shape, lo=-1.0, hi=1.0):
    return Tensor(rng.uniform(lo, hi, size=shape), requires_grad=True)


def _weighted(out: Tensor, w: np.ndarray) -> Tensor:
    return (out * w).sum()


def _case_add(rng):
    a, b = _leaf(rng, 3, 4), _leaf(rng, 1, 4)
    w = rng.normal(size=(3, 4))
    return lambda a, b: _weighted(ad.add(a, b), w), [a, b]


def _case_mul(rng):
    a, b = _leaf(rng, 3, 4), _leaf(rng, 3, 1)
    w = rng.normal(size=(3, 4))
    return lambda a, b: _weighted(ad.mul(a, b), w), [a, b]


def _case_relu(rng):
    x = _leaf(rng, 4, 5)
    w = rng.normal(size=(4, 5))
    return lambda x: _weighted(ad.relu(x), w), [x]


def _case_matmul(rng):
    a, b = _leaf(rng, 2, 3, 4), _leaf(rng, 4, 5)
    w = rng.normal(size=(2, 3, 5))
    return lambda a, b: _weighted(ad.matmul(a, b), w), [a, b]


def _case_reshape_transpose(rng):
    x = _leaf(rng, 2, 3, 4)
    w = rng.normal(size=(4, 6))
    return lambda x: _weighted(x.transpose(2, 0, 1).reshape(4, 6), w), [x]


def _case_sum_mean(rng):
    x = _leaf(rng, 3, 4, 2)
    w = rng.normal(size=(3, 2))
    return lambda x: _weighted(ad.mean(x, axis=1) + x.sum(axis=1), w), [x]


def _case_broadcast(rng):
    x = _leaf(rng, 3, 1)
    w = rng.normal(size=(2, 3, 4))
    return lambda x: _weighted(ad.broadcast_to(x, (2, 3, 4)), w), [x]


def _case_concat(rng):
    a, b = _leaf(rng, 2, 3, 2), _leaf(rng, 2, 1, 2)
    w = rng.normal(size=(2, 4, 2))
    return lambda a, b: _weighted(ad.concat([a, b], axis=1), w), [a, b]


def _case_stack_index(rng):
    a, b = _leaf(rng, 3, 2), _leaf(rng, 3, 2)
    idx = np.array([2, 0, 2])
    w = rng.normal(size=(2, 3, 2))
    return lambda a, b: _weighted(ad.stack([a[idx], b[idx]], axis=0), w), [a, b]


def _case_softmax(rng):
    x = _leaf(rng, 3, 5, lo=-2, hi=2)
    w = rng.normal(size=(3, 5))
    return lambda x: _weighted(ad.softmax(x, axis=1), w), [x]


def _case_masked_softmax(rng):
    x = _leaf(rng, 4, 4, lo=-2, hi=2)
    mask = np.where(rng.random((4, 4)) < 0.4, ad.NEG_INF, 0.0)
    mask[np.arange(4), np.arange(4)] = 0.0
    w = rng.normal(size=(4, 4))
    return lambda x: _weighted(ad.masked_softmax(x + mask, axis=1), w), [x]


def _case_cross_entropy(rng):
    logits = _leaf(rng, 2, 3, 4, 4, lo=-2, hi=2)
    labels = rng.integers(0, 3, size=(2, 4, 4))
    labels[0, 0, :2] = ad.IGNORE_INDEX
    w = rng.uniform(0.5, 1.5, size=(2, 4, 4))

    def f(x):
        lmap, loss = ad.cross_entropy_map(x, labels)
        return _weighted(lmap, w) + loss

    return f, [logits]


def _case_masked_softmax_ce(rng):
    x = _leaf(rng, 3, 3, 2, 2, lo=-2, hi=2)
    mask = np.zeros((3, 3, 2, 2))
    mask[1, 2] = ad.NEG_INF
    labels = rng.integers(0, 2, size=(3, 2, 2))

    def f(x):
        p = ad.masked_softmax(x + mask, axis=1)
        return ad.cross_entropy_map(p, labels)[1]

    return f, [x]


def _case_conv(stride, k):
    def build(rng):
        x = _leaf(rng, 2, 3, 8, 8)
        w = _leaf(rng, 4, 3, k, k)
        b = _leaf(rng, 4)
        out = (8 + 2 * (k // 2) - k) // stride + 1
        wt = rng.normal(size=(2, 4, out, out))
        return lambda x, w, b: _weighted(ad.conv2d(x, w, b, stride), wt), [x, w, b]
    return build


def _case_upsample(rng):
    x = _leaf(rng, 2, 3, 2, 3)
    w = rng.normal(size=(2, 3, 16, 24))
    return lambda x: _weighted(ad.upsample_bilinear(x, (16, 24)), w), [x]


def _case_group_pool(rng):
    probs = _leaf(rng, 3, 12, lo=0.05, hi=1.0)
    feats = _leaf(rng, 5, 12)
    labels = rng.integers(0, 3, size=12)
    labels[:3] = [0, 1, 2]
    present = sorted(set(labels.tolist()))
    w = rng.normal(size=(len(present), 5))
    return lambda p, x: _weighted(group_pool(p, x, labels, present), w), [probs, feats]


def _case_scatter(rng):
    rows = _leaf(rng, 3, 4)
    index = rng.integers(-1, 3, size=10)
    w = rng.normal(size=(4, 10))
    return lambda r: _weighted(ScatterRows.apply(r, index=index), w), [rows]


def _case_threshold(rng):
    x = Tensor(rng.uniform(0.05, 1.0, size=(4, 4)) * rng.choice([-1, 1], size=(4, 4)), requires_grad=True)
    x.data[np.arange(4), np.arange(4)] = 1.0
    w = rng.normal(size=(4, 4))
    return lambda x: _weighted(ad.masked_softmax(ThresholdMask.apply(x, t=0.0), axis=1), w), [x]


def _case_attention(rng):
    z = 4
    x = _leaf(rng, 2, 3 * z, 2, 2)
    params = {}
    for name, fan in (("q", 3 * z), ("k", 3 * z), ("v", 3 * z), ("o", z)):
        params[f"sa.{name}.w"] = _leaf(rng, z, fan)
        if name != "k":
            params[f"sa.{name}.b"] = _leaf(rng, z)
    names = list(params)
    w = rng.normal(size=(2, z, 2, 2))

    def f(x, *ps):
        return _weighted(self_attention(x, dict(zip(names, ps))), w)

    return f, [x, *params.values()]


def _case_encoder(rng):
    bb = ToyBackbone(EncoderConfig(8, (4, 8, 8), context_variant="pooling"), rng)
    names = list(bb.params)
    x = _leaf(rng, 1, 3, 16, 16, lo=0.0, hi=1.0)
    w = rng.normal(size=(1, 8, 2, 2))

    def f(x, *ps):
        bb.params = dict(zip(names, ps))
        return _weighted(bb.apply_context(bb.encode(x)), w)

    return f, [x, *bb.params.values()]


OPERATOR_CASES: dict[str, Callable] = {
    "add": _case_add,
    "mul": _case_mul,
    "relu": _case_relu,
    "matmul": _case_matmul,
    "reshape_transpose": _case_reshape_transpose,
    "sum_mean": _case_sum_mean,
    "broadcast_to": _case_broadcast,
    "concat": _case_concat,
    "stack_index": _case_stack_index,
    "softmax": _case_softmax,
    "masked_softmax": _case_masked_softmax,
    "cross_entropy_map": _case_cross_entropy,
    "masked_softmax_cross_entropy": _case_masked_softmax_ce,
    "conv2d_3x3_stride1": _case_conv(1, 3),
    "conv2d_3x3_stride2": _case_conv(2, 3),
    "conv2d_1x1": _case_conv(1, 1),
    "upsample_bilinear": _case_upsample,
    "group_pool": _case_group_pool,
    "scatter_rows": _case_scatter,
    "threshold_mask": _case_threshold,
    "self_attention": _case_attention,
    "encoder_block": _case_encoder,
}


def two_class_scene(size: int = 16, seed: int = 0):
    """Background plus one rectangle of class 1, with mild noise."""
    rng = np.random.default_rng(seed)
    gt = np.zeros((size, size), dtype=np.int64)
    y, x = rng.integers(0, size // 2, size=2)
    gt[y:y + size // 2, x:x + size // 2] = 1
    colours = np.array([[0.5, 0.5, 0.5], [0.9, 0.3, 0.2]])
    image = np.clip(colours[gt].transpose(2, 0, 1) + rng.normal(0, 0.05, (3, size, size)), 0, 1)
    return image, gt


def end_to_end_case(seed: int = 0, size: int = 16):
    """IDR loss on a 2-class scene as a function of every learned tensor.

    The model seed is advanced until the pseudo labels contain both classes
    with a clear argmax margin, so small perturbations cannot flip them.
    """
    image, gt = two_class_scene(size, seed)
    rng = np.random.default_rng(seed)
    relations = rng.uniform(-0.5, 1.0, size=(2, 2, 2))
    relations[:, [0, 1], [0, 1]] = 1.0
    rel = [Tensor(relations[0], True, "relation.mean"), Tensor(relations[1], True, "relation.var")]
    store = make_orthogonal_prototypes(2, 8, seed)
    cfg = ModelConfig(2, EncoderConfig(8, (4, 8, 8)), idr=True)
    for attempt in range(100):
        net = SegmentationNet(cfg, np.random.default_rng([seed, attempt]))
        with ad.no_grad():
            out = net.forward(image[None], rel, store)
        logits = out.coarse_logits.data[0]
        margin = np.abs(logits[0] - logits[1]).min()
        if len(np.unique(out.pseudo)) == 2 and margin > 1e-3:
            break
    names = list(net.params)

    def f(*ps):
        net.params = dict(zip(names, ps[:len(names)]))
        net.backbone.params = net.params
        o = net.forward(image[None], ps[len(names):], store)
        return total_loss(o.coarse_logits, o.logits, gt[None]).total

    return f, [*net.params.values(), *rel]


def run_gradcheck(seed: int = 0, eps: float = 1e-5, max_coords: int = 6) -> list[CheckOutcome]:
    outcomes = []
    cases = dict(OPERATOR_CASES)
    cases["end_to_end_loss"] = lambda rng: end_to_end_case(seed)
    for name, build in cases.items():
        rng = np.random.default_rng([seed, len(outcomes)])
        f, inputs = build(rng)
        res = finite_difference_check(f, inputs, eps=eps, max_coords=max_coords, seed=seed)
        where = f"input {res.input_index} at {res.coordinate}"
        if 0 <= res.input_index < len(inputs) and inputs[res.input_index].name:
            where = f"{inputs[res.input_index].name} at {res.coordinate}"
        outcomes.append(CheckOutcome(name, res.max_rel_error, where))
    return outcomes
