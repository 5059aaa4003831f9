"""Sequential sampling from CP joint distributions and static draft trees.

Sampling never leaves factor space: at each position the current marginal is
read off the (conditioned) mixture, a token is drawn, and the expert weights
absorb that token before moving on. Draws use one uniform per position, taken
in position order, turned into tokens by inverse-CDF lookup.
"""

from dataclasses import dataclass, field

import numpy as np
from ._numeric import logsumexp

from . import cp_distribution as cpd
from .rng import inverse_cdf, make_rng


@dataclass
class SampleConfig:
    temperature: float = 1.0
    seed: int = 0
    branching: tuple = None

    def __post_init__(self):
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")
        if self.branching is not None:
            self.branching = tuple(int(b) for b in self.branching)
            if any(b < 1 for b in self.branching):
                raise ValueError("branching factors must be >= 1")


def tempered(log_probs, temperature):
    """Probabilities of ``log_probs / temperature`` (last axis).

    ``temperature == 0`` gives a one-hot on the argmax (lowest index on ties).
    """
    log_probs = np.asarray(log_probs, dtype=np.float64)
    if temperature == 0:
        out = np.zeros_like(log_probs)
        np.put_along_axis(out, np.argmax(log_probs, axis=-1)[..., None], 1.0, axis=-1)
        return out
    z = log_probs / temperature
    z = z - z.max(axis=-1, keepdims=True)
    p = np.exp(z)
    return p / p.sum(axis=-1, keepdims=True)


def sample_sequences(dist, count, temperature=1.0, rng=None):
    """``count`` independent draws over the free positions, shape (count, m).

    Vectorized form of :func:`sample_sequence`; draws a (count, m) block of
    uniforms, row by row.
    """
    rng = make_rng(0) if rng is None else rng
    free = dist.free_positions
    u = rng.random((count, len(free)))
    a = np.broadcast_to(dist.log_weights, (count, dist.rank)).copy()
    out = np.empty((count, len(free)), dtype=np.int64)
    for j, s in enumerate(free):
        joint = a[:, :, None] + dist.log_factors[s][None]          # (count, r, V)
        lp = logsumexp(joint, axis=1)
        lp -= logsumexp(lp, axis=1, keepdims=True)
        if temperature == 0:
            tok = np.argmax(lp, axis=1)
        else:
            tok = inverse_cdf(tempered(lp, temperature), u[:, j])
        out[:, j] = tok
        a = a + dist.log_factors[s][:, tok].T
    return out


def sample_sequence(dist, config=None, rng=None):
    """One sequence over the free positions, drawn position by position.

    At temperature 1 this is an exact sampler of the CP joint. The temperature
    rescales the mixture marginal logits, never the per-expert factors.
    """
    config = SampleConfig() if config is None else config
    rng = make_rng(config.seed) if rng is None else rng
    return sample_sequences(dist, 1, config.temperature, rng)[0]


def greedy_sequence(dist):
    """Sequence of conditional argmaxes (lowest token index on ties)."""
    out = []
    for s in dist.free_positions:
        tok = int(np.argmax(cpd.marginal(dist, s)))
        out.append(tok)
        dist = cpd.condition_on(dist, s, tok)
    return np.array(out, dtype=np.int64)


def top_k(log_probs, k):
    """Indices of the ``k`` largest entries, ties toward the lowest index."""
    return np.argsort(-np.asarray(log_probs), kind="stable")[:k]


@dataclass
class TreeNode:
    token: int                  # None for the root
    parent: int                 # -1 for the root
    depth: int
    log_prob: float             # cumulative log-probability of the path
    children: list = field(default_factory=list)


@dataclass
class DraftTree:
    nodes: list
    levels: list                # node indices per depth, root level excluded

    def path(self, index):
        toks = []
        while self.nodes[index].parent >= 0:
            toks.append(self.nodes[index].token)
            index = self.nodes[index].parent
        return toks[::-1]

    def leaves(self):
        return self.levels[-1] if self.levels else [0]

    def paths(self):
        """Root-to-leaf token paths with their cumulative log-probabilities."""
        return [(self.path(i), self.nodes[i].log_prob) for i in self.leaves()]


def build_draft_tree(dist, branching, first_log_probs=None):
    """Static draft tree: top-``b_s`` conditional candidates at depth ``s``.

    ``first_log_probs`` optionally replaces the first-position marginal (the
    speculative decoder uses the base model's distribution there); deeper
    levels always condition the CP distribution along the path.
    """
    branching = tuple(int(b) for b in branching)
    free = dist.free_positions
    if len(branching) > len(free):
        raise ValueError(f"tree depth {len(branching)} exceeds horizon {len(free)}")
    if any(b < 1 or b > dist.vocab for b in branching):
        raise ValueError(f"branching factors must lie in [1, {dist.vocab}]")
    nodes = [TreeNode(None, -1, 0, 0.0)]
    frontier = [(0, dist)]
    levels = []
    for depth, b in enumerate(branching):
        s = free[depth]
        level, nxt = [], []
        for idx, d in frontier:
            lp = cpd.marginal(d, s)
            if depth == 0 and first_log_probs is not None:
                lp = np.asarray(first_log_probs, dtype=np.float64)
            for tok in top_k(lp, b):
                tok = int(tok)
                node = TreeNode(tok, idx, depth + 1, nodes[idx].log_prob + float(lp[tok]))
                nodes.append(node)
                nodes[idx].children.append(len(nodes) - 1)
                level.append(len(nodes) - 1)
                nxt.append((len(nodes) - 1, cpd.condition_on(d, s, tok)))
        levels.append(level)
        frontier = nxt
    return DraftTree(nodes, levels)
