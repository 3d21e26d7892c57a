"""Group pixels into class rows, mix rows through a relation matrix, scatter back."""
import numpy as np

from idrnet.autodiff import Tensor, softmax
from idrnet.grouping import PseudoLabelField, group, make_orthogonal_prototypes
from idrnet.interaction import interact, scatter, transform_relations

rng = np.random.default_rng(1)
K, Z, h, w = 4, 6, 5, 5

feats = Tensor(rng.normal(size=(Z, h, w)))
probs = softmax(Tensor(rng.normal(size=(K, h, w)) * 3), axis=0)
labels = probs.data.argmax(axis=0)
print("pseudo labels\n", labels)

store = make_orthogonal_prototypes(K, Z, seed=0)
proj_w, proj_b = Tensor(rng.normal(size=(Z, 2 * Z)) * 0.3), Tensor(np.zeros(Z))
bank = group(feats, PseudoLabelField(probs, labels), store, proj_w, proj_b)
print("bank rows for classes", bank.present_ids, bank.rows.shape)

# M[i, j] says how much row i borrows from class j; negatives are masked out
M = np.eye(K)
M[0, 1], M[1, 0], M[2, 3] = 0.8, -0.4, 0.5
masked = transform_relations(M, bank.present_ids, threshold=0.0)
print("masked relations\n", masked.data.round(2))

enhanced = interact(masked, bank.rows)
r_a = scatter(enhanced, labels, bank)
print("enhanced map", r_a.shape)

# deleting a class leaves its pixels empty
reduced = bank.without(bank.present_ids[0])
r_del = scatter(interact(transform_relations(M, reduced.present_ids), reduced.rows), labels, reduced,
                skip_id=bank.present_ids[0])
print("zeroed pixels after deleting class", bank.present_ids[0], int((np.abs(r_del.data).sum(0) == 0).sum()))
