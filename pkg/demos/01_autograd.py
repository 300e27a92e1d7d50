"""A tour of the numpy autograd engine.

Builds a small expression, backpropagates through it and checks the
result against central differences.  Then shows the guard rails: the
finiteness check and cycle-free graph construction.
"""

import numpy as np

from sftnet.errors import NonFiniteError
from sftnet.tensor import Tensor, backward, gelu, layer_norm, log, no_grad, sigmoid

rng = np.random.default_rng(0)

# a tiny two-layer network on a batch of 4 vectors
x = Tensor(rng.standard_normal((4, 6)))
w1 = Tensor(0.3 * rng.standard_normal((6, 5)), requires_grad=True)
w2 = Tensor(0.3 * rng.standard_normal((5, 1)), requires_grad=True)
gamma = Tensor(np.ones(5), requires_grad=True)
beta = Tensor(np.zeros(5), requires_grad=True)


def objective():
    h = gelu(layer_norm(x @ w1, gamma, beta))
    p = sigmoid(h @ w2)
    return -log(p).mean()


loss = objective()
backward(loss)
print("loss", loss.item())
print("dL/dw2", w2.grad.ravel())

# central differences on a few coordinates of w1
eps = 1e-6
with no_grad():
    for i, j in [(0, 0), (3, 2), (5, 4)]:
        old = w1.data[i, j]
        w1.data[i, j] = old + eps
        up = objective().item()
        w1.data[i, j] = old - eps
        down = objective().item()
        w1.data[i, j] = old
        print(f"w1[{i},{j}] analytic {w1.grad[i, j]: .8f} numeric {(up - down) / (2 * eps): .8f}")

# every op checks its output; a log of a negative number stops the pass
try:
    with np.errstate(invalid="ignore"):
        log(Tensor(np.array([-1.0])))
except NonFiniteError as exc:
    print("caught:", exc)
