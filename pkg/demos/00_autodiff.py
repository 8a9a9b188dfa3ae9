"""The reverse-mode tensor underneath everything else.

Operations on `Tensor` record a tape as they run; `backward()` walks it
once in reverse and frees each node as it goes, so a graph is cheap to
build and single-use. `grad_check` compares the analytic gradient
against central finite differences.
"""

import numpy as np

from ssmcyto.tensor import Tensor, grad_check, layer_norm, silu, softmax

rng = np.random.default_rng(0)

# a small computation: normalized, gated projection into a distribution
w = Tensor(rng.standard_normal((5, 3)))
gamma, beta = Tensor(np.ones(5)), Tensor(np.zeros(5))
x = Tensor(rng.standard_normal((4, 5)), requires_grad=True)

p = softmax(silu(layer_norm(x, gamma, beta)) @ w)
loss = -(p.narrow(1, 0, 1).log()).mean()  # push mass toward class 0
loss.backward()
print(f"loss {loss.item():.4f}")
print(f"x.grad shape {x.grad.shape}, largest entry {np.abs(x.grad).max():.4f}")

report = grad_check(
    lambda t: -(softmax(silu(layer_norm(t, gamma, beta)) @ w)
                .narrow(1, 0, 1).log()).mean(),
    Tensor(rng.standard_normal((4, 5))),
)
print(f"finite-difference agreement: max rel err {report.max_rel_err:.2e} "
      f"(tolerance 1e-4: {'ok' if report.ok(1e-4) else 'FAIL'})")

# broadcasting follows numpy; gradients un-broadcast automatically
b = Tensor(rng.standard_normal(3), requires_grad=True)
(((x.detach() @ w) + b) ** 2).sum().backward()
print(f"bias grad has the bias's shape: {b.grad.shape}")
