# # A small reverse-mode engine
#
# Everything the model learns flows through `Tensor` objects that remember
# how they were made. Calling `backward()` walks that record in reverse.

# %%
import numpy as np

from tieforge import numcore as nc

rng = np.random.default_rng(0)

# %% [markdown]
# A convolution over a 6-token sentence with 4 features per token, then the
# piecewise max pool that splits the sentence at the two entity positions.

# %%
x = nc.Tensor(rng.standard_normal((6, 4)), requires_grad=True)
filters = nc.Tensor(rng.standard_normal((3, 4, 2)) * 0.5, requires_grad=True)
bias = nc.Tensor(np.zeros(2), requires_grad=True)

fm = nc.conv1d_same(x, filters, bias)
pooled = nc.piecewise_max_pool(fm, 1, 4)
print("feature map", fm.shape, "-> pooled", pooled.shape)

# %% [markdown]
# Only the winning row of each segment receives gradient.

# %%
nc.sum_all(pooled).backward()
print("rows of x that got gradient:", np.flatnonzero(np.abs(x.grad).sum(axis=1)))

# %% [markdown]
# Central differences keep the engine honest.

# %%
for name, fn, inputs in [
    ("conv", nc.conv1d_same, [x, filters, bias]),
    ("softmax", lambda z: nc.mul(nc.softmax_row(z), nc.Tensor(np.arange(1.0, 6.0))),
     [nc.Tensor(rng.standard_normal(5), requires_grad=True)]),
    ("nll", lambda z: nc.nll_from_logits(z, 2), [nc.Tensor(rng.standard_normal(5), requires_grad=True)]),
]:
    rep = nc.grad_check(fn, inputs, op_name=name)
    print(f"{name:8s} max relative error {rep.max_rel_error:.2e} passed={rep.passed}")
