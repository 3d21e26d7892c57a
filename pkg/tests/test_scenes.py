from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import brute_force_miou

from idrnet.scenes import (
    DEFAULT_RULES,
    EvaluationError,
    RuleError,
    SceneRule,
    area_fractions,
    dump_split,
    generate,
    load_split,
    make_dataset,
    miou,
    read_array,
    write_array,
)


def test_generation_is_bit_reproducible():
    a = generate(DEFAULT_RULES, 6, 64, 64, seed=11)
    b = generate(DEFAULT_RULES, 6, 64, 64, seed=11)
    assert np.array_equal(a.image, b.image) and np.array_equal(a.gt, b.gt)
    assert a.rule_id == b.rule_id and a.seed == 11


def test_dependent_never_without_cue():
    rule = DEFAULT_RULES[0]
    cue_absent_with_dependent = 0
    lookalike_with_cue = 0
    for s in make_dataset(1000, DEFAULT_RULES, 6, 32, 32, master_seed=3):
        present = set(np.unique(s.gt).tolist())
        cue_absent_with_dependent += rule.cue not in present and rule.dependent in present
        lookalike_with_cue += rule.cue in present and rule.ambiguity in present
    assert cue_absent_with_dependent == 0
    assert lookalike_with_cue == 0


def test_area_fractions_match_monte_carlo():
    samples = make_dataset(1000, DEFAULT_RULES, 6, 64, 64, master_seed=5)
    counts = np.bincount(np.concatenate([s.gt.ravel() for s in samples]), minlength=6)
    observed = counts / counts.sum()
    expected = area_fractions(DEFAULT_RULES, 6, 64, 64)
    assert expected.sum() == pytest.approx(1.0, abs=1e-12)
    assert np.all(np.abs(observed - expected) <= 0.02 * np.maximum(expected, 1e-9) + 1e-3)


def test_dependent_and_lookalike_share_a_colour():
    rule = DEFAULT_RULES[0]
    means = {}
    for s in make_dataset(40, DEFAULT_RULES, 6, 64, 64, master_seed=1):
        for k in (rule.dependent, rule.ambiguity):
            sel = s.gt == k
            if sel.any():
                means.setdefault(k, []).append(s.image[:, sel].mean(axis=1))
    a, b = (np.mean(means[k], axis=0) for k in (rule.dependent, rule.ambiguity))
    np.testing.assert_allclose(a, b, atol=0.01)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1), st.sampled_from([(32, 32), (64, 64), (32, 64)]), st.integers(4, 7))
def test_scene_invariants(seed, hw, k):
    s = generate(DEFAULT_RULES, k, *hw, seed)
    assert s.gt.max() < k
    assert s.image.min() >= 0.0 and s.image.max() <= 1.0
    assert s.image.shape == (3, *hw)


@pytest.mark.parametrize("args", [
    (DEFAULT_RULES, 6, 60, 64),
    (DEFAULT_RULES, 3, 64, 64),
    ((SceneRule(), SceneRule()), 6, 64, 64),
    ((SceneRule(cue=1, dependent=1, ambiguity=3),), 6, 64, 64),
    ((SceneRule(ambiguity=6),), 6, 64, 64),
])
def test_bad_rule_sets_raise(args):
    with pytest.raises(RuleError):
        generate(*args, seed=0)


def test_miou_worked_example():
    gt = np.array([[0, 0], [1, 1]])
    pred = np.array([[0, 0], [0, 1]])
    report = miou([pred], [gt], 2)
    assert report.iou == [Fraction(2, 3), Fraction(1, 2)]
    assert report.miou == Fraction(7, 12)


def test_miou_perfect_and_absent_classes():
    gt = np.array([[0, 2], [2, 0]])
    report = miou([gt], [gt], 4)
    assert report.iou[1] is None and report.iou[3] is None
    assert report.miou == 1


def test_miou_ignores_255():
    gt = np.array([[0, 255]])
    pred = np.array([[0, 1]])
    assert miou([pred], [gt], 2).miou == 1


def test_miou_shape_mismatch():
    with pytest.raises(EvaluationError):
        miou([np.zeros((2, 2), int)], [np.zeros((2, 3), int)], 2)
    with pytest.raises(EvaluationError):
        miou([np.zeros((2, 2), int)], [], 2)


@pytest.mark.parametrize("seed", range(20))
def test_miou_matches_brute_force_exactly(seed):
    rng = np.random.default_rng(seed)
    k = int(rng.integers(2, 6))
    n = int(rng.integers(1, 4))
    shape = tuple(rng.integers(1, 6, size=2))
    preds = [rng.integers(0, k, size=shape) for _ in range(n)]
    gts = [rng.integers(0, k, size=shape) for _ in range(n)]
    report = miou(preds, gts, k)
    ious, mean = brute_force_miou(preds, gts, k)
    assert report.iou == ious and report.miou == mean


@settings(max_examples=30, deadline=None)
@given(st.permutations(range(4)), st.integers(0, 1000))
def test_miou_order_invariance(order, seed):
    rng = np.random.default_rng(seed)
    preds = [rng.integers(0, 3, size=(3, 3)) for _ in range(4)]
    gts = [rng.integers(0, 3, size=(3, 3)) for _ in range(4)]
    a = miou(preds, gts, 3)
    b = miou([preds[i] for i in order], [gts[i] for i in order], 3)
    assert a.miou == b.miou and 0 <= a.miou <= 1


def test_flat_binary_roundtrip(tmp_path):
    samples = make_dataset(5, DEFAULT_RULES, 6, 32, 32, master_seed=2)
    dump_split(tmp_path / "train", samples, DEFAULT_RULES)
    back = load_split(tmp_path / "train")
    for a, b in zip(samples, back):
        assert np.array_equal(a.image, b.image) and np.array_equal(a.gt, b.gt) and a.seed == b.seed
        regen = generate(DEFAULT_RULES, 6, 32, 32, b.seed)
        assert np.array_equal(regen.image, b.image)
    raw = (tmp_path / "train" / "images.bin").read_bytes()
    assert raw[:8] == b"IDRSEG01" and raw[8] == 1 and raw[9] == 4


def test_read_array_rejects_bad_magic(tmp_path):
    path = tmp_path / "x.bin"
    write_array(path, np.zeros((2, 2), dtype=np.uint8))
    assert read_array(path).dtype == np.uint8
    path.write_bytes(b"NOTMAGIC" + path.read_bytes()[8:])
    with pytest.raises(ValueError):
        read_array(path)
