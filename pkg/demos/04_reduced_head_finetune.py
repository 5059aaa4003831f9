# %% [markdown]
# # Fine-tuning a reduced head on top of a frozen next-token model
#
# A single-head model is trained first. Its output matrix becomes a frozen
# shared head; every position and expert gets a small square adapter applied
# before it. With identity adapters the new head reproduces the old logits.

# %%
import numpy as np

from cpmtp import corpus as corp
from cpmtp import heads
from cpmtp import speculative as sp
from cpmtp import training as tr

chain = corp.clustered_markov(32, 4, seed=0, lead=0.3, between=2.0)
data = corp.generate_markov(chain, 100_000, seed=0)
base, _ = tr.train(tr.TrainConfig(rank=1, horizon=1, steps=600), data)

model = tr.finetune_model(base, horizon=2, rank=4, noise=0.0)
e = np.tanh(sp.context_state(model, [3, 17, 5]))
factor, _ = heads.head_logits(model.head, e)
print("identity adapters match base logits:",
      np.array_equal(factor[1, 2], heads.shared_logits(model.head.shared_head, e)))

# %% [markdown]
# Distillation trains the adapters and gate against the frozen head evaluated
# along the ground-truth continuation. The base model itself never changes,
# so greedy speculative decoding stays lossless with respect to it.

# %%
model = tr.finetune_model(base, horizon=2, rank=4)
cfg = tr.TrainConfig(mode=heads.FINETUNE, rank=4, horizon=2, steps=400)
model, metrics = tr.train(cfg, data, model=model)
d = metrics.column("distill")
print(f"distillation loss {d[:20].mean():.3f} -> {d[-20:].mean():.3f}")
ev = tr.evaluate(model, data)
print(f"joint NLL {ev['joint_nll']:.4f}, base next-token NLL {ev['base_nll']:.4f}")

prompt = data.tokens[data.split:data.split + 10].tolist()
out, stats = sp.generate(model, prompt, 30)
print("lossless:", out == sp.base_greedy_generate(base, prompt, 30),
      "mean accepted", round(stats.avg_accepted, 2))
