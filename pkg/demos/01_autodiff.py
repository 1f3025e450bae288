# Reverse-mode differentiation on numpy arrays.
#
# A Tensor wraps an ndarray. Operations on tensors that require grad record
# their operands; backward() on a scalar replays the adjoints newest-first.

import numpy as np

from mmfuse import tensor as T
from mmfuse.tensor import Tensor

rng = np.random.default_rng(0)

# %% a tiny regression loss
w = T.parameter(rng.normal(size=(3, 2)))
x = Tensor(rng.normal(size=(5, 3)))
target = Tensor(rng.normal(size=(5, 2)))

diff = x @ w - target
loss = T.mean_axis(T.sum_axis(diff * diff, -1))
loss.backward()
print("loss", float(loss.data))
print("dloss/dw\n", w.grad)

# closed form for comparison: 2/N * x^T (xw - t)
print("closed form\n", 2 / 5 * x.data.T @ (x.data @ w.data - target.data))

# %% a second backward needs an explicit reset
try:
    T.mean_axis(T.sum_axis(x @ w, -1)).backward()
except Exception as exc:
    print(type(exc).__name__, "->", exc)
w.zero_grad()

# %% checking an adjoint with central differences (do this in float64)
with T.precision(np.float64):
    a = T.parameter(rng.normal(size=(4, 6)))
    g = T.parameter(np.ones(6))
    b = T.parameter(np.zeros(6))
    probe = Tensor(rng.normal(size=(4, 6)))

    def f():
        return T.sum_axis(T.softmax_lastdim(T.gelu(T.layer_norm(a, g, b))) * probe)

    f().backward()
    numeric = T.numerical_grad(f, a, step=1e-5)
    print("relative error", T.relative_error(a.grad.reshape(-1), numeric))

# %% no_grad records nothing; handy for evaluation
with T.no_grad():
    y = x @ w
print("recorded?", y.requires_grad)
