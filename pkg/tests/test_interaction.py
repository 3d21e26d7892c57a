import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import brute_force_scatter

from idrnet.autodiff import NEG_INF, DegenerateRowError, ShapeError, Tensor
from idrnet.grouping import SemanticBank
from idrnet.interaction import (
    BankMismatchError,
    RelationState,
    augment_and_predict,
    interact,
    scatter,
    self_attention,
    total_loss,
    transform_relations,
)


def test_transform_takes_submatrix_and_masks_below_threshold():
    m = np.array([
        [1.0, -0.2, 0.3, 0.5],
        [0.1, 1.0, 0.0, -0.4],
        [0.2, 0.7, 1.0, 0.9],
        [0.4, 0.6, -0.1, 1.0],
    ])
    out = transform_relations(m, [0, 2, 3]).data
    expected = np.array([[1.0, 0.3, 0.5], [0.2, 1.0, 0.9], [0.4, NEG_INF, 1.0]])
    assert np.array_equal(out, expected)
    # zero sits exactly at the threshold and is kept
    assert transform_relations(m, [1, 2]).data[0, 1] == 0.0


def test_fully_masked_row_raises():
    m = np.array([[-1.0, -1.0], [0.5, 1.0]])
    with pytest.raises(DegenerateRowError):
        transform_relations(m, [0, 1])


def test_interact_identity_relations():
    rows = Tensor(np.array([[1.0, 0.0], [0.0, 2.0]]))
    out = interact(transform_relations(np.eye(3), [0, 2]), rows).data
    e = np.e
    np.testing.assert_allclose(out, [[e / (e + 1), 2 / (e + 1)], [1 / (e + 1), 2 * e / (e + 1)]], atol=1e-15)


def test_interact_masked_column_contributes_nothing():
    m = np.array([[1.0, -0.5], [0.2, 1.0]])
    rows = Tensor(np.array([[3.0, 4.0], [100.0, -100.0]]))
    out = interact(transform_relations(m, [0, 1]), rows).data
    assert np.array_equal(out[0], [3.0, 4.0])


@pytest.mark.parametrize("seed", range(20))
def test_scatter_matches_brute_force_bitwise(seed):
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, 5, size=(int(rng.integers(1, 6)), int(rng.integers(1, 6))))
    present = sorted(set(labels.ravel().tolist()))
    rows = rng.normal(size=(len(present), 3))
    bank = SemanticBank(tuple(present), None, Tensor(rows))
    skip = present[int(rng.integers(0, len(present)))] if seed % 2 else None
    out = scatter(Tensor(rows), labels, bank, skip).data
    assert np.array_equal(out, brute_force_scatter(rows, labels, present, skip))


def test_scatter_missing_label_raises():
    bank = SemanticBank((0, 2), None, Tensor(np.ones((2, 2))))
    with pytest.raises(BankMismatchError):
        scatter(bank.rows, np.array([[0, 1]]), bank)


def test_bank_without_drops_row():
    bank = SemanticBank((0, 2, 4), None, Tensor(np.arange(6.0).reshape(3, 2)))
    reduced = bank.without(2)
    assert reduced.present_ids == (0, 4)
    assert np.array_equal(reduced.rows.data, [[0.0, 1.0], [4.0, 5.0]])


def _sa_params(rng, z):
    p = {}
    for name, fan in (("q", 3 * z), ("k", 3 * z), ("v", 3 * z), ("o", z)):
        p[f"sa.{name}.w"] = Tensor(rng.normal(size=(z, fan)) * 0.3)
        if name != "k":
            p[f"sa.{name}.b"] = Tensor(rng.normal(size=z) * 0.1)
    p["cls_o.w"] = Tensor(rng.normal(size=(3, z, 1, 1)))
    p["cls_o.b"] = Tensor(rng.normal(size=3))
    return p


def test_self_attention_matches_numpy(rng):
    z = 4
    x = rng.normal(size=(2, 3 * z, 2, 3))
    p = _sa_params(rng, z)
    out = self_attention(Tensor(x), p).data
    seq = x.reshape(2, 3 * z, 6).transpose(0, 2, 1)
    q = seq @ p["sa.q.w"].data.T + p["sa.q.b"].data
    k = seq @ p["sa.k.w"].data.T
    v = seq @ p["sa.v.w"].data.T + p["sa.v.b"].data
    s = q @ k.transpose(0, 2, 1) / np.sqrt(z)
    a = np.exp(s - s.max(axis=-1, keepdims=True))
    a /= a.sum(axis=-1, keepdims=True)
    ref = (a @ v) @ p["sa.o.w"].data.T + p["sa.o.b"].data
    np.testing.assert_allclose(out, ref.transpose(0, 2, 1).reshape(2, z, 2, 3), rtol=1e-12, atol=1e-12)


def test_zeroed_attention_output_leaves_context(rng):
    z = 4
    p = _sa_params(rng, z)
    p["sa.o.w"].data[...] = 0.0
    p["sa.o.b"].data[...] = 0.0
    ctx = Tensor(rng.normal(size=(1, z, 2, 2)))
    r, logits = augment_and_predict(Tensor(rng.normal(size=ctx.shape)), Tensor(rng.normal(size=ctx.shape)),
                                    ctx, p, (16, 16))
    assert np.array_equal(r.data, ctx.data)
    assert logits.shape == (1, 3, 16, 16)


def test_augment_shape_mismatch(rng):
    p = _sa_params(rng, 4)
    a = Tensor(np.zeros((1, 4, 2, 2)))
    with pytest.raises(ShapeError):
        augment_and_predict(a, Tensor(np.zeros((1, 4, 2, 3))), a, p, (16, 16))


def test_loss_alpha_zero_is_final_loss(rng):
    coarse = Tensor(rng.normal(size=(1, 3, 2, 2)))
    logits = Tensor(rng.normal(size=(1, 3, 16, 16)))
    gt = rng.integers(0, 3, size=(1, 16, 16))
    terms = total_loss(coarse, logits, gt, alpha=0.0)
    assert terms.total.data == terms.final.data
    mixed = total_loss(coarse, logits, gt, alpha=0.4)
    assert mixed.total.data == pytest.approx(0.4 * mixed.coarse.data + mixed.final.data, abs=1e-15)


def test_relation_state_storage():
    for k in (2, 6, 19):
        assert RelationState.identity(k).storage_entries() == 2 * k * k


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 6), st.integers(0, 10_000))
def test_interaction_rows_are_convex_mixtures(n, seed):
    rng = np.random.default_rng(seed)
    m = rng.uniform(-1, 1, size=(n, n))
    np.fill_diagonal(m, 1.0)
    rows = rng.normal(size=(n, 3))
    out = interact(transform_relations(m, list(range(n))), Tensor(rows)).data
    assert np.all(out <= rows.max(axis=0) + 1e-12)
    assert np.all(out >= rows.min(axis=0) - 1e-12)
