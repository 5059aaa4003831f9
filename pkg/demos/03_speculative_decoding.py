# %% [markdown]
# # Self-speculative decoding
#
# The head drafts two tokens per step. The base next-token model checks the
# draft along the drafted path, keeps the longest agreeing prefix and adds
# one token of its own, so every step emits at least two tokens.

# %%
import numpy as np

from cpmtp import corpus as corp
from cpmtp import speculative as sp
from cpmtp import training as tr
from cpmtp.sampler import SampleConfig

chain = corp.clustered_markov(32, 4, seed=0, lead=0.3, between=2.0)
data = corp.generate_markov(chain, 200_000, seed=0)
models = {r: tr.train(tr.TrainConfig(rank=r, horizon=2, steps=600), data)[0] for r in (1, 4)}

# %% [markdown]
# Greedy decoding is lossless: the output equals plain greedy decoding with
# the base model, token for token.

# %%
val = data.tokens[data.split:]
prompts = [val[k * 200:k * 200 + 10].tolist() for k in range(30)]
for r, model in models.items():
    accepted, same = [], True
    for p in prompts:
        out, stats = sp.generate(model, p, 20)
        same &= out == sp.base_greedy_generate(model, p, 20)
        accepted += stats.accepted
    print(f"rank {r}: mean accepted {np.mean(accepted):.2f}, lossless {same}")

# %% [markdown]
# Sampling mode accepts each draft with probability min(1, p/q) and resamples
# from the residual on rejection. A static tree drafts several candidates
# per position and keeps the deepest path the base model agrees with.

# %%
model = models[4]
out, stats = sp.generate(model, prompts[0], 20, sp.STOCHASTIC, SampleConfig(seed=3))
print("sampled:", out[10:], "mean accepted", round(stats.avg_accepted, 2))
out, stats = sp.generate(model, prompts[0], 20, sp.TREE, SampleConfig(branching=(3, 3)))
print("tree:   ", out[10:], "mean accepted", round(stats.avg_accepted, 2))
