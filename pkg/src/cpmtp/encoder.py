"""Small causal context encoder.

A decayed running sum of token embeddings squashed by ``tanh``::

    h_t = decay * h_{t-1} + (1 - decay) * token_table[x_t],   h_0 = 0
    e_t = tanh(h_t)

It stands in for a transformer trunk: causal, context dependent, cheap to
extend one token at a time, and easy to differentiate by hand.
"""

from dataclasses import dataclass

import numpy as np

from .errors import StructuralError

DEFAULT_DECAY = 0.7
DEFAULT_DIM = 64


@dataclass
class EncoderParams:
    token_table: np.ndarray     # (V, E)
    decay: float = DEFAULT_DECAY
    trainable: bool = True

    def __post_init__(self):
        self.token_table = np.asarray(self.token_table, dtype=np.float64)
        if self.token_table.ndim != 2:
            raise StructuralError("token_table must be a (V, E) matrix")
        if not 0.0 < self.decay < 1.0:
            raise ValueError(f"decay must lie in (0, 1), got {self.decay}")
        if not np.all(np.isfinite(self.token_table)):
            raise ValueError("token_table has non-finite entries")

    @property
    def vocab(self):
        return self.token_table.shape[0]

    @property
    def dim(self):
        return self.token_table.shape[1]


def init_encoder(vocab, dim=DEFAULT_DIM, rng=None, decay=DEFAULT_DECAY, scale=1.0):
    rng = np.random.default_rng(0) if rng is None else rng
    return EncoderParams(rng.normal(0.0, scale, size=(vocab, dim)), decay=decay)


def _check_tokens(params, tokens):
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.ndim != 1 or tokens.size == 0:
        raise ValueError("need a non-empty 1-D token sequence")
    if tokens.min() < 0 or tokens.max() >= params.vocab:
        raise IndexError(f"token outside vocabulary of size {params.vocab}")
    return tokens


def step(params, state, token):
    """Advance the pre-activation state ``h`` by one token."""
    if not 0 <= token < params.vocab:
        raise IndexError(f"token {token} outside vocabulary of size {params.vocab}")
    return params.decay * state + (1.0 - params.decay) * params.token_table[token]


def initial_state(params):
    return np.zeros(params.dim)


def run_states(params, tokens, state=None):
    """Pre-activation states after each token, shape (T, E)."""
    tokens = _check_tokens(params, tokens)
    h = initial_state(params) if state is None else state
    out = np.empty((tokens.size, params.dim))
    for t, x in enumerate(tokens):
        h = step(params, h, x)
        out[t] = h
    return out


def encode(params, tokens):
    """Embeddings ``e_t`` for every position of ``tokens``, shape (T, E)."""
    return np.tanh(run_states(params, tokens))


def encode_grad(params, tokens, upstream):
    """Gradient w.r.t. ``token_table`` given dL/de_t for every position."""
    tokens = _check_tokens(params, tokens)
    upstream = np.asarray(upstream, dtype=np.float64)
    if upstream.shape != (tokens.size, params.dim):
        raise StructuralError(f"upstream must have shape {(tokens.size, params.dim)}")
    e = encode(params, tokens)
    grad = np.zeros_like(params.token_table)
    carry = np.zeros(params.dim)
    for t in range(tokens.size - 1, -1, -1):
        carry = upstream[t] * (1.0 - e[t] ** 2) + params.decay * carry
        grad[tokens[t]] += (1.0 - params.decay) * carry
    return grad


# Batched last-position encoding of left-padded windows, used by training.
# Padding entries are negative token ids.

def window_weights(decay, length):
    """Weight of each window slot in the final state (last slot is newest)."""
    return (1.0 - decay) * decay ** np.arange(length - 1, -1, -1, dtype=np.float64)


def encode_last(params, windows):
    """Final state and embedding of each padded window.

    ``windows`` is an int array (B, L); returns ``(h, e)``, both (B, E).
    """
    windows = np.asarray(windows)
    mask = windows >= 0
    coef = window_weights(params.decay, windows.shape[1])[None, :] * mask
    rows = params.token_table[np.where(mask, windows, 0)]
    h = np.einsum("bl,ble->be", coef, rows)
    return h, np.tanh(h)


def encode_last_grad(params, windows, e, upstream):
    """Gradient w.r.t. ``token_table`` for :func:`encode_last` outputs."""
    windows = np.asarray(windows)
    mask = windows >= 0
    coef = window_weights(params.decay, windows.shape[1])[None, :] * mask
    dh = upstream * (1.0 - e ** 2)
    contrib = coef[:, :, None] * dh[:, None, :]
    grad = np.zeros_like(params.token_table)
    np.add.at(grad, np.where(mask, windows, 0).ravel(), contrib.reshape(-1, params.dim))
    return grad
