r"""Rank-r canonical polyadic (CP) joint distributions over n future tokens.

A :class:`CPJointDist` represents

.. math::

    P(x_1, \ldots, x_n) = \sum_{\alpha=1}^r w_\alpha \prod_{s=1}^n P^{(s)}(x_s \mid \alpha)

entirely through ``log w`` and ``log P^{(s)}(\cdot \mid \alpha)``. Every
operation stays in log space; :func:`materialize` is the only place where the
dense ``V**n`` tensor is built, and it exists as a brute-force oracle.

Positions that have been observed through :func:`condition_on` are tracked by
a ``consumed`` mask, so factor indexing stays aligned with the head outputs.
Distributions over the vocabulary (marginals, conditionals) are plain 1-D
arrays of log-probabilities.
"""

from dataclasses import dataclass

import numpy as np
from ._numeric import log_softmax, logsumexp

from .errors import CapacityError, NumericError, StateError, StructuralError

LOGIT_CLAMP = 700.0
MATERIALIZE_LIMIT = 10**6


def _frozen(a):
    a = np.array(a, dtype=np.float64)
    a.flags.writeable = False
    return a


@dataclass(frozen=True, eq=False)
class CPJointDist:
    log_weights: np.ndarray     # (r,)
    log_factors: np.ndarray     # (n, r, V)
    consumed: np.ndarray        # (n,) bool

    @property
    def horizon(self):
        return self.log_factors.shape[0]

    @property
    def rank(self):
        return self.log_factors.shape[1]

    @property
    def vocab(self):
        return self.log_factors.shape[2]

    @property
    def free_positions(self):
        return [s for s in range(self.horizon) if not self.consumed[s]]

    @property
    def weights(self):
        return np.exp(self.log_weights)


def clamped_log_softmax(logits, axis=-1):
    """log-softmax with inputs clipped to [-700, 700]."""
    return log_softmax(np.clip(logits, -LOGIT_CLAMP, LOGIT_CLAMP), axis=axis)


def from_logits(weight_logits, factor_logits):
    """Build a distribution from unnormalized gate and factor logits.

    ``weight_logits`` has shape (r,), ``factor_logits`` shape (n, r, V).
    """
    weight_logits = np.asarray(weight_logits, dtype=np.float64)
    factor_logits = np.asarray(factor_logits, dtype=np.float64)
    if weight_logits.ndim != 1 or factor_logits.ndim != 3:
        raise StructuralError(
            f"expected (r,) and (n, r, V) logits, got {weight_logits.shape} "
            f"and {factor_logits.shape}")
    if factor_logits.shape[1] != weight_logits.shape[0]:
        raise StructuralError(
            f"rank mismatch: {weight_logits.shape[0]} gate logits vs "
            f"{factor_logits.shape[1]} factor components")
    if min(factor_logits.shape) < 1:
        raise StructuralError(f"empty dimension in {factor_logits.shape}")
    if not (np.all(np.isfinite(weight_logits)) and np.all(np.isfinite(factor_logits))):
        raise NumericError("logits must be finite")
    return CPJointDist(
        log_weights=_frozen(clamped_log_softmax(weight_logits)),
        log_factors=_frozen(clamped_log_softmax(factor_logits, axis=-1)),
        consumed=_frozen_mask(np.zeros(factor_logits.shape[0], dtype=bool)),
    )


def _frozen_mask(mask):
    mask = np.array(mask, dtype=bool)
    mask.flags.writeable = False
    return mask


def _check_token(dist, token):
    if not 0 <= int(token) < dist.vocab:
        raise IndexError(f"token {token} outside vocabulary of size {dist.vocab}")
    return int(token)


def expert_terms(dist, tokens):
    """Per-expert log terms ``log w_a + sum_s log P^(s)(tokens[s] | a)``.

    Consumed positions contribute nothing (their token entries are ignored).
    """
    tokens = np.asarray(tokens)
    if tokens.shape != (dist.horizon,):
        raise StructuralError(f"expected {dist.horizon} tokens, got shape {tokens.shape}")
    terms = np.array(dist.log_weights)
    for s in dist.free_positions:
        terms = terms + dist.log_factors[s, :, _check_token(dist, tokens[s])]
    return terms


def log_prob(dist, tokens):
    """log P(tokens) over the unconsumed positions."""
    return float(logsumexp(expert_terms(dist, tokens)))


def materialize(dist, limit=MATERIALIZE_LIMIT):
    """Dense probability tensor over the free positions (test oracle)."""
    free = dist.free_positions
    size = dist.vocab ** len(free)
    if size > limit:
        raise CapacityError(f"V**n = {size} exceeds materialization limit {limit}")
    w = np.exp(dist.log_weights)
    out = np.zeros((dist.vocab,) * len(free))
    for a in range(dist.rank):
        term = np.array(w[a])
        for s in free:
            term = np.multiply.outer(term, np.exp(dist.log_factors[s, a]))
        out += term
    return out


def marginal(dist, position):
    """Log marginal of one unconsumed position given everything conditioned so far."""
    if dist.consumed[position]:
        raise StateError(f"position {position} has already been conditioned on")
    out = logsumexp(dist.log_weights[:, None] + dist.log_factors[position], axis=0)
    return out - logsumexp(out)


def first_token_marginal(dist):
    """Log marginal of the earliest unconsumed position.

    For a fresh distribution this is the mixture ``sum_a w_a P^(1)(. | a)``.
    """
    free = dist.free_positions
    if not free:
        raise StateError("every position is already conditioned on")
    return marginal(dist, free[0])


def condition_on(dist, position, token):
    """Observe ``token`` at ``position``; returns a new distribution.

    Only the expert weights change: they absorb the observed factor entries
    and are renormalized. Remaining factors are untouched.
    """
    if not 0 <= position < dist.horizon:
        raise IndexError(f"position {position} outside horizon {dist.horizon}")
    if dist.consumed[position]:
        raise StateError(f"position {position} has already been conditioned on")
    token = _check_token(dist, token)
    a = dist.log_weights + dist.log_factors[position, :, token]
    mask = np.array(dist.consumed)
    mask[position] = True
    return CPJointDist(
        log_weights=_frozen(a - logsumexp(a)),
        log_factors=dist.log_factors,
        consumed=_frozen_mask(mask),
    )
