"""A tour of the tensor engine that powers every model in this package.

Builds a tiny computation, checks one gradient against finite differences,
and minimizes a quadratic with the Adam optimizer.
"""

import numpy as np

from hgtnormals import tensor as T
from hgtnormals.optim import AdamState, adam_step
from hgtnormals.tensor import Tape, Tensor

print("== forward + backward on a small expression ==")
x = Tensor(np.array([[1.0, -2.0], [0.5, 3.0]]), requires_grad=True)
w = Tensor(np.array([[0.3], [-0.7]]), requires_grad=True)
with Tape() as tape:
    y = T.relu(T.matmul(x, w))
    loss = T.tsum(T.square(y))
tape.backward(loss)
print("loss      =", loss.item())
print("dloss/dw  =", w.grad.ravel())

print()
print("== the same gradient by central finite differences ==")
h = 1e-6
fd = np.zeros_like(w.data)
for i in range(2):
    for sign in (+1, -1):
        w2 = w.data.copy()
        w2[i, 0] += sign * h
        y2 = np.maximum(x.data @ w2, 0.0)
        fd[i, 0] += sign * float((y2**2).sum()) / (2 * h)
print("numeric   =", fd.ravel())
print("max diff  =", float(np.abs(fd - w.grad).max()))

print()
print("== 100 Adam steps on f(w) = w^2 from w = 1 ==")
w = Tensor(np.array(1.0), requires_grad=True)
state = AdamState([w])
for step in range(100):
    with Tape() as tape:
        loss = T.square(w)
    tape.backward(loss)
    grad = w.grad
    w.zero_grad()
    adam_step([w], [grad], state, lr=0.1)
    if step % 20 == 0 or step == 99:
        print(f"step {step:3d}: w = {w.item():+.5f}")
print("converged well inside |w| < 0.01:", abs(w.item()) < 0.01)
