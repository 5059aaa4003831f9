# %% [markdown]
# # A rank-r joint distribution over several future tokens
#
# Each expert is a product of per-position token distributions and the
# experts are mixed with simplex weights. Everything is kept in log space;
# the dense tensor is only built here to look at it.

# %%
import numpy as np

from cpmtp import cp_distribution as cpd
from cpmtp import sampler

rng = np.random.default_rng(0)
dist = cpd.from_logits(rng.normal(0, 2, 3), rng.normal(0, 2, (2, 3, 4)))
print("expert weights", np.round(dist.weights, 3))

# %% [markdown]
# The likelihood of a pair of tokens is a logsumexp over experts; it agrees
# with the dense tensor.

# %%
T = cpd.materialize(dist)
print("P(1, 2) from factors:", np.exp(cpd.log_prob(dist, np.array([1, 2]))))
print("P(1, 2) from tensor: ", T[1, 2])

# %% [markdown]
# Observing the first token only reweights the experts. The second position's
# marginal after conditioning matches the renormalized tensor row.

# %%
cond = cpd.condition_on(dist, 0, 1)
print("weights after seeing token 1:", np.round(cond.weights, 3))
print("P(x2 | x1 = 1):", np.round(np.exp(cpd.marginal(cond, 1)), 4))
print("tensor row:    ", np.round(T[1] / T[1].sum(), 4))

# %% [markdown]
# Sequential sampling draws one token per position and conditions as it goes;
# the empirical joint converges to the tensor.

# %%
draws = sampler.sample_sequences(dist, 200_000, 1.0, np.random.default_rng(1))
emp = np.bincount(draws[:, 0] * 4 + draws[:, 1], minlength=16).reshape(4, 4) / len(draws)
print("total variation:", 0.5 * np.abs(emp - T).sum())
print("greedy sequence:", sampler.greedy_sequence(dist))
