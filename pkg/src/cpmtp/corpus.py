"""Token corpora: synthetic Markov chains with exact entropy, and character text.

Binary token files are laid out as::

    8 bytes   magic b"CPTOKv01"
    4 bytes   vocab size, uint32 little-endian
    4 bytes   boundary token, int32 little-endian (-1 for none)
    4 bytes   train/validation split index, uint32
    rest      tokens, uint32 little-endian
"""

import json
from dataclasses import dataclass, field

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import connected_components

from .rng import make_rng

TOKEN_MAGIC = b"CPTOKv01"


@dataclass
class MarkovSpec:
    order: int
    vocab: int
    transitions: np.ndarray     # (vocab**order, vocab)
    seed: int = 0

    def __post_init__(self):
        self.transitions = np.asarray(self.transitions, dtype=np.float64)
        if self.transitions.shape != (self.vocab ** self.order, self.vocab):
            raise ValueError(
                f"transitions must be {(self.vocab ** self.order, self.vocab)}, "
                f"got {self.transitions.shape}")
        if np.any(self.transitions < 0):
            raise ValueError("transition probabilities must be non-negative")
        if not np.allclose(self.transitions.sum(axis=1), 1.0, atol=1e-12, rtol=0):
            raise ValueError("transition rows must sum to 1")

    def state_index(self, history):
        """Index of the state given the last ``order`` tokens (oldest first)."""
        idx = 0
        for x in history[len(history) - self.order:]:
            idx = idx * self.vocab + int(x)
        return idx

    def to_json(self):
        return json.dumps({"order": self.order, "vocab": self.vocab, "seed": self.seed,
                           "transitions": self.transitions.tolist()})

    @classmethod
    def from_json(cls, text):
        d = json.loads(text)
        return cls(d["order"], d["vocab"], np.array(d["transitions"]), d.get("seed", 0))


@dataclass
class Corpus:
    tokens: np.ndarray
    vocab_size: int
    split: int                          # tokens[:split] train, tokens[split:] validation
    boundary: int = -1                  # document separator token, never inside a window
    markov: MarkovSpec = None
    vocab: list = field(default=None)   # characters, for text corpora

    def __post_init__(self):
        self.tokens = np.asarray(self.tokens, dtype=np.int64)
        if self.tokens.size and (self.tokens.min() < 0 or self.tokens.max() >= self.vocab_size):
            raise ValueError("token outside vocabulary")
        if not 0 <= self.split <= self.tokens.size:
            raise ValueError(f"split {self.split} outside [0, {self.tokens.size}]")

    def segments(self, part="train"):
        """(start, end) ranges of boundary-free runs inside one split."""
        lo, hi = (0, self.split) if part == "train" else (self.split, self.tokens.size)
        if part not in ("train", "val"):
            raise ValueError(f"unknown split {part!r}")
        cuts = [lo]
        if self.boundary >= 0:
            cuts += [lo + i for i in np.flatnonzero(self.tokens[lo:hi] == self.boundary)]
        out = []
        for k, a in enumerate(cuts):
            if k > 0:
                a = a + 1
            b = cuts[k + 1] if k + 1 < len(cuts) else hi
            if b > a:
                out.append((a, b))
        return out

    def encode_text(self, text):
        index = {c: i for i, c in enumerate(self.vocab)}
        return np.array([index[c] for c in text], dtype=np.int64)

    def decode_text(self, tokens):
        return "".join(self.vocab[int(t)] for t in tokens)


# --- Markov chains -----------------------------------------------------------

def random_markov(vocab, order=1, seed=0, concentration=1.0):
    rng = make_rng(seed)
    rows = rng.dirichlet(np.full(vocab, concentration), size=vocab ** order)
    return MarkovSpec(order, vocab, rows, seed)


def clustered_markov(vocab, clusters, seed=0, within=0.5, between=0.5, lead=0.0):
    """Order-1 chain whose transition matrix has non-negative rank ``clusters``.

    Tokens are split into ``clusters`` equal groups; the next-token
    distribution depends only on the current token's group. The joint of the
    next two tokens given the current one is then an exact rank-``clusters``
    CP mixture (one expert per group of the first token), so lower ranks are
    strictly misspecified. ``between`` and ``within`` are Dirichlet
    concentrations for the group-to-group and within-group distributions;
    ``lead`` moves that share of each group's mass onto the next group
    (cyclically), which makes the most likely successor group distinct for
    every group.
    """
    if vocab % clusters:
        raise ValueError("vocab must be divisible by clusters")
    rng = make_rng(seed)
    size = vocab // clusters
    group_next = rng.dirichlet(np.full(clusters, between), size=clusters)
    group_next = (1 - lead) * group_next + lead * np.roll(np.eye(clusters), 1, axis=1)
    within_probs = rng.dirichlet(np.full(size, within), size=clusters)
    emit = np.zeros((clusters, vocab))
    for g in range(clusters):
        for h in range(clusters):
            emit[g, h * size:(h + 1) * size] = group_next[g, h] * within_probs[h]
    emit /= emit.sum(axis=1, keepdims=True)
    groups = np.arange(vocab) // size
    return MarkovSpec(1, vocab, emit[groups], seed)


def cycle_markov(vocab):
    return MarkovSpec(1, vocab, np.roll(np.eye(vocab), 1, axis=1))


def uniform_markov(vocab, order=1):
    return MarkovSpec(order, vocab, np.full((vocab ** order, vocab), 1.0 / vocab))


def _state_graph(spec):
    """Sparse state-to-state transition matrix over ``vocab**order`` states."""
    S, V = spec.transitions.shape
    rows, cols = np.nonzero(spec.transitions)
    nxt = (rows * V + cols) % S
    return csr_matrix((spec.transitions[rows, cols], (rows, nxt)), shape=(S, S))


def stationary(spec):
    """Stationary distribution over chain states.

    Raises ``ValueError`` unless the chain has exactly one closed
    communicating class (i.e. a unique stationary distribution).
    """
    P = _state_graph(spec)
    ncomp, labels = connected_components(P, directed=True, connection="strong")
    coo = P.tocoo()
    leaving = labels[coo.row] != labels[coo.col]
    open_classes = set(labels[coo.row[leaving]])
    closed = [c for c in range(ncomp) if c not in open_classes]
    if len(closed) != 1:
        raise ValueError(f"chain is not ergodic: {len(closed)} closed classes")
    S = P.shape[0]
    A = np.vstack([P.toarray().T - np.eye(S), np.ones((1, S))])
    b = np.zeros(S + 1)
    b[-1] = 1.0
    pi = np.linalg.lstsq(A, b, rcond=None)[0]
    pi = np.clip(pi, 0.0, None)
    return pi / pi.sum()


def entropy_rate(spec):
    pi = stationary(spec)
    T = spec.transitions
    with np.errstate(divide="ignore", invalid="ignore"):
        plogp = np.where(T > 0, T * np.log(T), 0.0)
    return float(-(pi * plogp.sum(axis=1)).sum())


def true_joint_nll(spec, horizon):
    """Expected -log P(next ``horizon`` tokens | history) under stationarity.

    Enumerated step by step: the state distribution is propagated through the
    chain and each step adds the expected conditional entropy of that state.
    """
    pi = stationary(spec)
    P = _state_graph(spec)
    T = spec.transitions
    with np.errstate(divide="ignore", invalid="ignore"):
        row_h = -np.where(T > 0, T * np.log(T), 0.0).sum(axis=1)
    total, dist = 0.0, pi
    for _ in range(horizon):
        total += float(dist @ row_h)
        dist = P.T @ dist
    return total


def generate_markov(spec, length, val_fraction=0.1, seed=None):
    """Sample a stream of ``length`` tokens from the chain.

    Draw order: ``order`` uniforms choose the initial tokens, then one uniform
    per generated token.
    """
    if length <= spec.order:
        raise ValueError("length must exceed the chain order")
    rng = make_rng(spec.seed if seed is None else seed)
    u = rng.random(length)
    tokens = np.empty(length, dtype=np.int64)
    tokens[:spec.order] = np.minimum((u[:spec.order] * spec.vocab).astype(np.int64), spec.vocab - 1)
    cdf = np.cumsum(spec.transitions, axis=1)
    cdf[:, -1] = 1.0
    S = spec.transitions.shape[0]
    state = spec.state_index(tokens[:spec.order])
    V = spec.vocab
    for t in range(spec.order, length):
        x = int(np.searchsorted(cdf[state], u[t], side="right"))
        x = min(x, V - 1)
        tokens[t] = x
        state = (state * V + x) % S
    split = length - int(round(val_fraction * length))
    return Corpus(tokens, spec.vocab, split, markov=spec)


# --- text --------------------------------------------------------------------

def build_vocab(text):
    return sorted(set(text))


def load_text(path, vocab=None, unknown="error", boundary=None, val_fraction=0.1):
    """Character-level corpus from a UTF-8 file.

    ``vocab`` defaults to the sorted characters of the file. Characters missing
    from a given vocab raise ``KeyError`` with ``unknown="error"`` or map to
    the vocab's first entry with ``unknown="map"``. ``boundary`` is a
    character that separates documents.
    """
    with open(path, encoding="utf-8") as fh:
        text = fh.read()
    if not text:
        raise ValueError(f"{path} is empty")
    vocab = build_vocab(text) if vocab is None else list(vocab)
    index = {c: i for i, c in enumerate(vocab)}
    if unknown not in ("error", "map"):
        raise ValueError(f"unknown must be 'error' or 'map', got {unknown!r}")
    ids = []
    for c in text:
        if c in index:
            ids.append(index[c])
        elif unknown == "map":
            ids.append(0)
        else:
            raise KeyError(f"character {c!r} not in vocabulary")
    btok = index[boundary] if boundary is not None else -1
    split = len(ids) - int(round(val_fraction * len(ids)))
    return Corpus(np.array(ids, dtype=np.int64), len(vocab), split, boundary=btok, vocab=vocab)


def write_tokens(path, corpus):
    header = TOKEN_MAGIC + np.array([corpus.vocab_size], "<u4").tobytes() \
        + np.array([corpus.boundary], "<i4").tobytes() + np.array([corpus.split], "<u4").tobytes()
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(corpus.tokens.astype("<u4").tobytes())


def read_tokens(path):
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:8] != TOKEN_MAGIC:
        raise ValueError(f"{path}: not a token file")
    vocab = int(np.frombuffer(data[8:12], "<u4")[0])
    boundary = int(np.frombuffer(data[12:16], "<i4")[0])
    split = int(np.frombuffer(data[16:20], "<u4")[0])
    tokens = np.frombuffer(data[20:], "<u4").astype(np.int64)
    return Corpus(tokens, vocab, split, boundary=boundary)


# --- training windows ----------------------------------------------------------

def window_positions(corpus, horizon, part="train"):
    """Index of the last context token for every valid window."""
    out = []
    for a, b in corpus.segments(part):
        if b - a > horizon:
            out.append(np.arange(a, b - horizon))
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


def gather_windows(corpus, positions, horizon, context_length, part="train"):
    """Left-padded context windows (B, L) and targets (B, n) for ``positions``.

    A context never reaches back past the start of its segment; padding is -1.
    """
    starts = np.zeros(corpus.tokens.size + 1, dtype=np.int64)
    for a, b in corpus.segments(part):
        starts[a:b] = a
    positions = np.asarray(positions, dtype=np.int64)
    offs = np.arange(-context_length + 1, 1)
    idx = positions[:, None] + offs[None, :]
    valid = idx >= starts[positions][:, None]
    contexts = np.where(valid, corpus.tokens[np.clip(idx, 0, None)], -1)
    targets = corpus.tokens[positions[:, None] + np.arange(1, horizon + 1)[None, :]]
    return contexts, targets


def batches(corpus, horizon, batch_size, seed=0, context_length=16, part="train", epochs=1):
    """Yield (contexts, targets) minibatches in a seeded shuffled order.

    Each epoch draws one Philox permutation of all valid windows; the last
    partial batch of an epoch is dropped unless it is the only one.
    ``epochs=None`` repeats forever.
    """
    positions = window_positions(corpus, horizon, part)
    if positions.size == 0:
        raise ValueError("corpus has no window long enough for the horizon")
    rng = make_rng(seed)
    epoch = 0
    while epochs is None or epoch < epochs:
        order = positions[rng.permutation(positions.size)]
        stop = max(order.size - order.size % batch_size, min(batch_size, order.size))
        for k in range(0, stop, batch_size):
            yield gather_windows(corpus, order[k:k + batch_size], horizon, context_length, part)
        epoch += 1
