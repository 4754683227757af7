"""
Where the outer gradient is taken
=================================

A two-parameter problem with closed-form gradients shows that the meta-test
gradient is evaluated at the adapted point theta*, not at theta.
"""

import torch

from sasvmeta.trainer import inner_adapt, loss_and_grad, outer_update


def quadratic(center, diag):
    c, d = torch.tensor(center, dtype=torch.float64), torch.tensor(diag, dtype=torch.float64)
    return lambda theta: 0.5 * ((theta - c) ** 2 * d).sum()


loss = lambda params, data: data(params["theta"])
meta_train = quadratic([1.0, 1.0], [1.0, 1.0])   # pulls theta towards (1, 1)
meta_test = quadratic([0.0, 0.0], [20.0, 0.0])   # steep only along the first axis

theta = torch.zeros(2, dtype=torch.float64, requires_grad=True)
params = {"theta": theta}

# %%
# One inner step of size 0.5 moves theta = (0, 0) to theta* = (0.5, 0.5).
adapted = inner_adapt(params, loss, meta_train, k=1, inner_lr=0.5)
print("theta* =", adapted["theta"].tolist())

# %%
# At theta the meta-test loss is flat, at theta* it is not: the update direction
# becomes (10, 0) + (-1, -1) = (9, -1) instead of (-1, -1).
_, at_theta = loss_and_grad(loss, {"theta": torch.zeros(2, dtype=torch.float64)}, meta_test)
print("meta-test gradient at theta :", at_theta["theta"].tolist())
result = outer_update(params, adapted, loss, meta_train, meta_test, torch.optim.SGD([theta], lr=0.1))
print("combined meta-gradient      :", result.meta_grad["theta"].tolist())
print("theta after one SGD step    :", theta.detach().tolist())
