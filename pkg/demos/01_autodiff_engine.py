"""Tour of the tensor engine: values, gradients, and the numeric oracle.

Run:  python3 demos/01_autodiff_engine.py
"""

import numpy as np

from lifq import Parameter, Tensor, gradient_check, relu, softmax_lastdim

# Every operation builds a graph node; backward() on a scalar walks the graph
# in reverse and accumulates gradients into every Parameter it reaches.
w = Parameter(np.array([[0.5, -1.0], [2.0, 0.25]]), "w")
x = Tensor(np.array([[1.0, 3.0]]))

y = relu(x @ w).sum()
y.backward()
print("value        :", y.item())
print("dL/dw        :", w.grad.reshape(-1))

# Masked logits: -inf entries drop out of the softmax support exactly.
logits = Tensor(np.array([[2.0, 1.0, -np.inf]]))
print("masked probs :", softmax_lastdim(logits).data[0])

# The finite-difference oracle is the house referee for every backward pass:
# it reports max |analytic - numeric| / max(1, |analytic|, |numeric|).
w.zero_grad()
err = gradient_check(lambda: relu(x @ w).sum(), [w], step=1e-5)
print(f"gradcheck err: {err:.2e}")
