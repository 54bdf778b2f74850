"""Check the autodiff engine against central finite differences.

Every op records a closure for its vector-Jacobian product. Here we compare
those against (f(x+h) - f(x-h)) / 2h in float64 for a small conv block with
batch norm, a clustering head, and the joint loss on top.

    python demos/gradient_check.py
"""

import numpy as np

from clust3 import losses
from clust3 import tensor as T

rng = np.random.default_rng(0)
x = rng.uniform(0, 1, size=(2, 1, 6, 6))
w = rng.normal(0, 0.5, size=(3, 1, 3, 3))
gamma, beta = np.ones(3), np.zeros(3)
proj = rng.normal(0, 1, size=(3, 4))
head = rng.normal(0, 1, size=(3, 2))
labels = np.array([1, 0])


def loss_fn(w, proj, head):
    bn = T.BNState(3, np.float64)
    h = T.avg_pool2d(T.relu(T.batchnorm(T.conv2d(T.Tensor(x, dtype="f64"), w), T.Tensor(gamma), T.Tensor(beta), bn)))
    rows = T.reshape(T.transpose(h, (0, 2, 3, 1)), (-1, 3))
    z = T.softmax_rows(T.matmul(rows, proj))
    logits = T.matmul(T.mean(h, axis=(2, 3)), head)
    return losses.total_loss(logits, labels, {1: z}).total


arrays = [w, proj, head]
leaves = [T.Tensor(a, requires_grad=True, dtype="f64") for a in arrays]
T.backward(loss_fn(*leaves))

h = 1e-5
for name, a, leaf in zip(("conv", "projector", "classifier"), arrays, leaves):
    num = np.zeros_like(a)
    for i in np.ndindex(a.shape):
        up, down = a.copy(), a.copy()
        up[i] += h
        down[i] -= h
        args_up = [up if b is a else b for b in arrays]
        args_down = [down if b is a else b for b in arrays]
        num[i] = (float(loss_fn(*map(T.Tensor, args_up)).data) - float(loss_fn(*map(T.Tensor, args_down)).data)) / (2 * h)
    err = np.max(np.abs(num - leaf.grad) / np.maximum(np.maximum(np.abs(num), np.abs(leaf.grad)), 1e-3))
    print(f"{name:10s} {a.size:3d} entries   max relative error {err:.2e}")
