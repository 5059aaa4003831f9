# %% [markdown]
# # Joint loss against rank on a chain with hidden groups
#
# Tokens fall into four groups and the next token depends only on the
# current token's group. The joint of the next two tokens is therefore an
# exact four-expert mixture, and lower ranks cannot represent it.

# %%
import numpy as np

from cpmtp import corpus as corp
from cpmtp import training as tr

chain = corp.clustered_markov(32, 4, seed=0, lead=0.3, between=2.0)
data = corp.generate_markov(chain, 200_000, seed=0)
print("true two-token NLL:", round(corp.true_joint_nll(chain, 2), 4))

# %% [markdown]
# Train one model per rank with identical seeds and batches. A few hundred
# steps already show the ordering; the acceptance suite uses 1500.

# %%
for rank in (1, 2, 4):
    cfg = tr.TrainConfig(rank=rank, horizon=2, steps=400, seed=0)
    model, metrics = tr.train(cfg, data)
    ev = tr.evaluate(model, data)
    print(f"rank {rank}: joint {ev['joint_nll']:.4f}  first token {ev['first_token_nll']:.4f}  "
          f"utilization {np.round(ev['balance'].utilization, 2)}")

# %% [markdown]
# The joint NLL falls with rank while the first-token NLL barely moves: the
# first-position marginal is a next-token model no matter how many experts
# are mixed.
