"""
Reverse-mode gradients on numpy arrays
======================================

Every operation records its inputs and a backward rule; ``backward`` walks the
graph in reverse and accumulates gradients into the leaves.
"""
import numpy as np

from cgmoe_ad import tensor as T
from cgmoe_ad.tensor import Tensor

rng = np.random.default_rng(0)

# A tiny layer: layer norm, linear map, exact GELU, then cosine distance to a target.
x = Tensor(rng.normal(size=(4, 8)), requires_grad=True)
W = Tensor(rng.normal(size=(8, 8)) * 0.3, requires_grad=True)
gain, bias = Tensor(np.ones(8), requires_grad=True), Tensor(np.zeros(8), requires_grad=True)
target = Tensor(rng.normal(size=(4, 8)))

h = T.gelu(T.linear(T.layer_norm(x, gain, bias), W))
loss = T.cosine_distance(h, target).mean()
loss.backward()
print("loss", float(loss.data))
print("dL/dW row norms", np.linalg.norm(W.grad, axis=1).round(4))

# Compare one entry against a central difference.
eps, i, j = 1e-6, 2, 5


def value():
    with T.no_grad():
        hh = T.gelu(T.linear(T.layer_norm(x, gain, bias), W))
        return float(T.cosine_distance(hh, target).mean().data)


old = W.data[i, j]
W.data[i, j] = old + eps
up = value()
W.data[i, j] = old - eps
down = value()
W.data[i, j] = old
print("analytic", W.grad[i, j], "numeric", (up - down) / (2 * eps))

# Matmuls report their multiply-add counts while an op counter is active.
with T.count_ops() as ops:
    T.matmul(Tensor(rng.normal(size=(16, 32))), Tensor(rng.normal(size=(32, 8))))
print("recorded", ops.ops, "flops", ops.total_flops)
