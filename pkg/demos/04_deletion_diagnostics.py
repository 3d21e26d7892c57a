"""Balanced deletion, loss-difference deltas and the EMA relation update."""
import numpy as np

from idrnet.diagnostics import DeletionCounter, deletion_probabilities, relation_delta, sample_deletion, update_relations
from idrnet.interaction import RelationState

# rarely deleted classes get picked more often
counter = DeletionCounter(np.array([2, 1, 1]))
print("Prob", deletion_probabilities([0, 1, 2], counter))

rng = np.random.default_rng(0)
for mode in ("balanced", "random"):
    c = DeletionCounter.fresh(6, mode)
    for _ in range(10_000):
        sample_deletion(list(range(6)), c, rng)
    print(mode, "counts", c.count, "max/min", round(c.count.max() / c.count.min(), 3))

# deleting class 0 raised class 1's pixel losses {1, 3} -> {2, 4}
gt = np.array([[1, 1], [0, 0]])
l = np.array([[1.0, 3.0], [0.5, 0.5]])
l_del = np.array([[2.0, 4.0], [0.5, 0.5]])
delta = relation_delta(0, l, l_del, gt, reserved=[1], num_classes=2)
print("deltas (j, r_mean, r_var)", delta.pairs)

state = RelationState.identity(2)
for step in range(3):
    update_relations(state, delta)
    print("step", step, "M_mean[0,1] =", state.mean[0, 1], "diagonal", np.diag(state.mean))
