import numpy as np

from avvp import tensor as tn

# ### A tiny reverse-mode tape
#
# Every operation on a `Tensor` records its parents and the name of its
# backward rule. `backward` walks the recorded graph in reverse creation order
# and leaves gradients on the leaves that asked for them.

x = tn.parameter(np.array([[1.0, -2.0], [0.5, 3.0]]))
w = tn.parameter(np.array([[0.3], [-0.7]]))
y = tn.sigmoid(x @ w).sum()
tn.backward(y)
print("loss:", y.item())
print("dloss/dw:\n", w.grad)

# Softmax rows always sum to one, and the layer norm output has zero mean and
# unit variance per row before the affine part.

s = tn.softmax(tn.Tensor(np.array([[1.0, 2.0, 3.0]])), axis=-1)
print("softmax:", s.data, "row sum:", s.data.sum())
ln = tn.layer_norm(tn.Tensor(np.array([[1.0, 2.0, 3.0, 4.0]])), np.ones(4), np.zeros(4))
print("layer norm:", ln.data.round(4))

# ### Checking gradients against central differences
#
# `grad_check` perturbs each parameter entry by +-h and compares the slope with
# the tape's answer. Wrapping the call in `corrupt_backward` breaks one rule on
# purpose, which is how the verification suite proves it can catch a bug.

g = tn.parameter(np.random.default_rng(0).normal(size=4))
b = tn.parameter(np.zeros(4))
inp = tn.parameter(np.random.default_rng(1).normal(size=(3, 4)))
proj = np.random.default_rng(2).normal(size=(3, 4))


def loss():
    return (tn.layer_norm(inp, g, b) * proj).sum()


print("clean:", tn.grad_check(loss, {"g": g, "b": b, "inp": inp}))
with tn.corrupt_backward("layer_norm"):
    print("corrupted:", tn.grad_check(loss, {"g": g, "b": b, "inp": inp}))
