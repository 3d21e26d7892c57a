"""Tiny tour of the tape: build a graph, backpropagate, check against finite differences."""
import numpy as np

from idrnet.autodiff import NEG_INF, Tape, Tensor, conv2d, finite_difference_check, masked_softmax, no_grad
from idrnet.gradcheck import run_gradcheck

rng = np.random.default_rng(0)

# a 3x3 convolution followed by a weighted sum, recorded on a tape
x = Tensor(rng.uniform(size=(1, 3, 8, 8)), requires_grad=True)
w = Tensor(rng.normal(size=(4, 3, 3, 3)) * 0.1, requires_grad=True)
b = Tensor(np.zeros(4), requires_grad=True)
with Tape() as tape:
    loss = (conv2d(x, w, b) * rng.normal(size=(1, 4, 8, 8))).sum()
tape.backward(loss)
print("loss", float(loss.data), "dL/dw norm", np.linalg.norm(w.grad))

# the same gradients, numerically
f = lambda x, w, b: (conv2d(x, w, b) * 1.0).sum()
res = finite_difference_check(f, [x, w, b], eps=1e-5, max_coords=6, seed=0)
print("conv max relative error", res.max_rel_error)

# masked entries hold a true -inf and get exactly zero probability
scores = Tensor(np.array([[0.3, NEG_INF, 1.2]]))
print("masked softmax", masked_softmax(scores, axis=1).data)

# nothing is recorded under no_grad, even inside a tape
with Tape() as tape:
    with no_grad():
        y = Tensor(np.ones(3), requires_grad=True) * 2.0
print("records made under no_grad:", len(tape.records))

# the full operator suite, as `idrnet gradcheck` runs it
for o in run_gradcheck(seed=0):
    print(f"{o.name:<30s} {o.max_rel_error:.2e}")
