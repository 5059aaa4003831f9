"""Self-speculative decoding with a CP multi-token head.

One step drafts up to ``n`` tokens from the CP head at the current position,
checks them against the base next-token model along the drafted path, keeps
the longest accepted prefix and appends one token from the base model.

The first drafted position always uses the base model's own distribution
(top choice, sample or top-b candidates). In scratch mode that is exactly the
CP head's first-position marginal; in finetune mode it keeps the guarantee
that the first draft token is accepted, so every step emits at least two
tokens.

Encoder states are extended incrementally with :func:`encoder.step`, the
analogue of a KV cache, and the base-only decoders below use the very same
calls, which makes greedy speculative output bit-identical to them.
"""

import json
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import cp_distribution as cpd
from . import encoder as enc
from . import heads
from .rng import inverse_cdf, make_rng
from .sampler import SampleConfig, build_draft_tree, greedy_sequence, tempered

GREEDY, STOCHASTIC, TREE = "greedy", "stochastic", "tree"


@dataclass
class StepResult:
    tokens: list
    accepted: int
    state: np.ndarray       # encoder state after all emitted tokens


@dataclass
class SpecDecodeStats:
    steps: int = 0
    tokens_emitted: int = 0
    accepted: list = field(default_factory=list)
    wall_total: float = 0.0         # seconds, warmup step excluded
    timed_tokens: int = 0

    @property
    def avg_accepted(self):
        return float(np.mean(self.accepted)) if self.accepted else 0.0

    @property
    def wall_per_token(self):
        return self.wall_total / self.timed_tokens if self.timed_tokens else 0.0

    def record(self, result, seconds):
        if self.steps > 0:
            self.wall_total += seconds
            self.timed_tokens += len(result.tokens)
        self.steps += 1
        self.tokens_emitted += len(result.tokens)
        self.accepted.append(result.accepted)

    def to_dict(self):
        d = asdict(self)
        d["avg_accepted"] = self.avg_accepted
        d["wall_per_token"] = self.wall_per_token
        return d

    def to_json(self):
        return json.dumps(self.to_dict())


def context_state(model, context):
    return enc.run_states(model.encoder, context)[-1]


def _base_log_probs(model, state):
    return heads.base_next_token_dist(model, np.tanh(state))


def spec_step_greedy(model, context=None, state=None):
    """Greedy draft-and-verify step; needs ``context`` or its encoder ``state``."""
    h = context_state(model, context) if state is None else state
    e = np.tanh(h)
    base_lp = heads.base_next_token_dist(model, e)
    first = int(np.argmax(base_lp))
    dist = cpd.condition_on(model.forward(e), 0, first)
    draft = [first] + [int(t) for t in greedy_sequence(dist)]

    accepted, lp = 0, base_lp
    for tok in draft:
        if int(np.argmax(lp)) != tok:
            break
        h = enc.step(model.encoder, h, tok)
        accepted += 1
        lp = _base_log_probs(model, h)
    bonus = int(np.argmax(lp))
    h = enc.step(model.encoder, h, bonus)
    return StepResult(draft[:accepted] + [bonus], accepted, h)


def spec_step_stochastic(model, context=None, temperature=1.0, rng=None, state=None):
    """Sampled draft-and-verify step, lossless in distribution.

    Draft token ``k`` is kept with probability ``min(1, p_base / p_draft)``;
    the first rejection is replaced by a draw from the normalized residual
    ``max(0, p_base - p_draft)``. If every draft survives, a bonus token is
    drawn from the base model.

    Draw order: one uniform per drafted position, then one acceptance uniform
    per checked position, then one uniform for the residual or bonus token.
    """
    if temperature <= 0:
        raise ValueError("stochastic decoding needs temperature > 0")
    rng = make_rng(0) if rng is None else rng
    h = context_state(model, context) if state is None else state
    e = np.tanh(h)
    n = model.dims[0]
    p_first = tempered(heads.base_next_token_dist(model, e), temperature)
    draft = [int(inverse_cdf(p_first, rng.random()))]
    q = [p_first]
    dist = cpd.condition_on(model.forward(e), 0, draft[0])
    for s in range(1, n):
        qs = tempered(cpd.marginal(dist, s), temperature)
        tok = int(inverse_cdf(qs, rng.random()))
        draft.append(tok)
        q.append(qs)
        dist = cpd.condition_on(dist, s, tok)

    h = enc.step(model.encoder, h, draft[0])
    accepted = 1
    for s in range(1, n):
        p = tempered(_base_log_probs(model, h), temperature)
        tok = draft[s]
        if rng.random() < min(1.0, p[tok] / q[s][tok]):
            h = enc.step(model.encoder, h, tok)
            accepted += 1
            continue
        resid = np.maximum(p - q[s], 0.0)
        if resid.sum() <= 0:
            resid = p
        fix = int(inverse_cdf(resid, rng.random()))
        h = enc.step(model.encoder, h, fix)
        return StepResult(draft[:accepted] + [fix], accepted, h)
    p = tempered(_base_log_probs(model, h), temperature)
    bonus = int(inverse_cdf(p, rng.random()))
    h = enc.step(model.encoder, h, bonus)
    return StepResult(draft + [bonus], accepted, h)


def spec_step_tree(model, context=None, branching=(5,), state=None):
    """Greedy verification of a static draft tree.

    Every root-to-leaf path is checked on its own against the base model's
    greedy tokens; encoder states along shared prefixes come from a cache
    keyed by the prefix. The deepest matching path wins (first path on ties).
    """
    h0 = context_state(model, context) if state is None else state
    e = np.tanh(h0)
    base_lp = heads.base_next_token_dist(model, e)
    tree = build_draft_tree(model.forward(e), branching, first_log_probs=base_lp)
    cache = {(): (h0, int(np.argmax(base_lp)))}

    def lookup(prefix):
        if prefix not in cache:
            h_prev, _ = lookup(prefix[:-1])
            h = enc.step(model.encoder, h_prev, prefix[-1])
            cache[prefix] = (h, int(np.argmax(_base_log_probs(model, h))))
        return cache[prefix]

    best, best_len = (), -1
    for path, _ in tree.paths():
        k = 0
        while k < len(path) and lookup(tuple(path[:k]))[1] == path[k]:
            k += 1
        if k > best_len:
            best, best_len = tuple(path[:k]), k
    h, bonus = lookup(best)
    h = enc.step(model.encoder, h, bonus)
    return StepResult(list(best) + [bonus], best_len, h)


def generate(model, prompt, max_tokens, mode=GREEDY, config=None):
    """Speculative generation of ``max_tokens`` tokens after ``prompt``.

    Returns ``(tokens, stats)`` where ``tokens`` is the prompt followed by
    exactly ``max_tokens`` generated tokens (the final step's output is cut
    at the budget; ``stats`` still counts everything that step produced).
    """
    config = SampleConfig() if config is None else config
    prompt = [int(t) for t in prompt]
    if not prompt:
        raise ValueError("prompt must be non-empty")
    out = list(prompt)
    stats = SpecDecodeStats()
    if max_tokens <= 0:
        return out, stats
    rng = make_rng(config.seed)
    h = context_state(model, prompt)
    produced = 0
    while produced < max_tokens:
        t0 = time.perf_counter()
        if mode == GREEDY:
            res = spec_step_greedy(model, state=h)
        elif mode == STOCHASTIC:
            res = spec_step_stochastic(model, temperature=config.temperature, rng=rng, state=h)
        elif mode == TREE:
            res = spec_step_tree(model, branching=config.branching or (1,) * model.dims[0],
                                 state=h)
        else:
            raise ValueError(f"unknown mode {mode!r}")
        stats.record(res, time.perf_counter() - t0)
        take = res.tokens[:max_tokens - produced]
        out.extend(take)
        produced += len(take)
        h = res.state
    return out, stats


def base_greedy_generate(model, prompt, max_tokens):
    """Plain greedy decoding with the base model, one token per call."""
    out = [int(t) for t in prompt]
    h = context_state(model, out)
    for _ in range(max_tokens):
        tok = int(np.argmax(_base_log_probs(model, h)))
        out.append(tok)
        h = enc.step(model.encoder, h, tok)
    return out


def base_sample_generate(model, prompt, max_tokens, temperature=1.0, rng=None):
    """Ancestral sampling from the base model; one uniform per token."""
    rng = make_rng(0) if rng is None else rng
    out = [int(t) for t in prompt]
    h = context_state(model, out)
    for _ in range(max_tokens):
        p = tempered(_base_log_probs(model, h), temperature)
        tok = int(inverse_cdf(p, rng.random()))
        out.append(tok)
        h = enc.step(model.encoder, h, tok)
    return out
