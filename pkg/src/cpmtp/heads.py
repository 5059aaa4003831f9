"""Linear heads mapping a context embedding to a CP joint distribution.

Two parameterizations are supported:

* full head: one ``(V, E)`` matrix per position and expert,
  ``factor_logits[s, a] = W[s, a] @ e``;
* reduced head: a frozen shared ``(V, E)`` output matrix composed with small
  ``(E, E)`` adapters, ``factor_logits[s, a] = W @ (A[s, a] @ e)``.

Both use a bias-free gating layer ``gate_logits = G @ e``.
"""

from dataclasses import dataclass, field

import numpy as np

from . import cp_distribution as cpd
from . import encoder as enc
from .errors import StructuralError

SCRATCH = "scratch"
FINETUNE = "finetune"


def _readonly(a):
    a = np.array(a, dtype=np.float64)
    a.flags.writeable = False
    return a


@dataclass
class FullHeadParams:
    factor_weights: np.ndarray      # (n, r, V, E)
    gate_weights: np.ndarray        # (r, E)

    def __post_init__(self):
        self.factor_weights = np.asarray(self.factor_weights, dtype=np.float64)
        self.gate_weights = np.asarray(self.gate_weights, dtype=np.float64)
        if self.factor_weights.ndim != 4 or self.gate_weights.ndim != 2:
            raise StructuralError("factor_weights must be (n, r, V, E), gate_weights (r, E)")
        n, r, V, E = self.factor_weights.shape
        if self.gate_weights.shape != (r, E):
            raise StructuralError(f"gate_weights shape {self.gate_weights.shape} != {(r, E)}")

    @property
    def dims(self):
        n, r, V, E = self.factor_weights.shape
        return n, r, V, E

    def trainable(self):
        return {"factor_weights": self.factor_weights, "gate_weights": self.gate_weights}


@dataclass
class ReducedHeadParams:
    shared_head: np.ndarray         # (V, E), frozen
    adapters: np.ndarray            # (n, r, E, E)
    gate_weights: np.ndarray        # (r, E)

    def __post_init__(self):
        self.shared_head = _readonly(self.shared_head)
        self.adapters = np.asarray(self.adapters, dtype=np.float64)
        self.gate_weights = np.asarray(self.gate_weights, dtype=np.float64)
        if self.shared_head.ndim != 2 or self.adapters.ndim != 4:
            raise StructuralError("shared_head must be (V, E), adapters (n, r, E, E)")
        V, E = self.shared_head.shape
        n, r = self.adapters.shape[:2]
        if self.adapters.shape[2:] != (E, E):
            raise StructuralError(f"adapters must be (n, r, {E}, {E}), got {self.adapters.shape}")
        if self.gate_weights.shape != (r, E):
            raise StructuralError(f"gate_weights shape {self.gate_weights.shape} != {(r, E)}")

    @property
    def dims(self):
        V, E = self.shared_head.shape
        return self.adapters.shape[0], self.adapters.shape[1], V, E

    def trainable(self):
        return {"adapters": self.adapters, "gate_weights": self.gate_weights}

    def composed(self):
        """Equivalent full head, ``W @ A[s, a]`` for every position and expert."""
        return FullHeadParams(
            np.einsum("vf,nrfe->nrve", self.shared_head, self.adapters),
            self.gate_weights.copy())


def init_full_head(horizon, rank, vocab, dim, rng):
    bound = 1.0 / np.sqrt(dim)
    return FullHeadParams(
        rng.uniform(-bound, bound, size=(horizon, rank, vocab, dim)),
        rng.uniform(-bound, bound, size=(rank, dim)))


def init_reduced_head(shared_head, horizon, rank, rng, identity=True, noise=0.0):
    """Reduced head around a pretrained ``shared_head``.

    With ``identity=True`` every adapter starts at the identity (plus optional
    uniform noise of half-width ``noise`` to break expert symmetry), so the
    head initially reproduces the pretrained logits at every position.
    """
    V, E = np.shape(shared_head)
    bound = 1.0 / np.sqrt(E)
    if identity:
        adapters = np.broadcast_to(np.eye(E), (horizon, rank, E, E)).copy()
        if noise:
            adapters += rng.uniform(-noise, noise, size=adapters.shape)
    else:
        adapters = rng.uniform(-bound, bound, size=(horizon, rank, E, E))
    gate = rng.uniform(-bound, bound, size=(rank, E))
    return ReducedHeadParams(shared_head, adapters, gate)


def _check_embedding(params, e):
    e = np.asarray(e, dtype=np.float64)
    E = params.dims[3]
    if e.shape[-1] != E:
        raise StructuralError(f"embedding length {e.shape[-1]} != {E}")
    return e


def shared_logits(shared_head, x):
    """``shared_head @ x`` over the last axis of ``x``.

    Every use of the frozen head goes through this one contraction, whose
    per-row accumulation order does not depend on the batch shape; identity
    adapters therefore reproduce the base logits bit for bit.
    """
    return np.einsum("vf,...f->...v", shared_head, x)


def head_logits(params, e):
    """Factor and gate logits for a batch of embeddings.

    ``e`` is (B, E) or (E,); returns ``(factor_logits, gate_logits)`` with
    shapes (B, n, r, V) and (B, r) (leading axis dropped for a single e).
    """
    e = _check_embedding(params, e)
    single = e.ndim == 1
    eb = e[None] if single else e
    if isinstance(params, ReducedHeadParams):
        # adapter first; the (V, E) product W @ A is never formed
        inner = np.einsum("nrfe,be->bnrf", params.adapters, eb)
        factor = shared_logits(params.shared_head, inner)
    else:
        factor = np.einsum("nrve,be->bnrv", params.factor_weights, eb)
    gate = eb @ params.gate_weights.T
    if single:
        return factor[0], gate[0]
    return factor, gate


def forward_full(params, e):
    factor, gate = head_logits(params, e)
    return cpd.from_logits(gate, factor)


def forward_reduced(params, e):
    factor, gate = head_logits(params, e)
    return cpd.from_logits(gate, factor)


def head_backward(params, e, d_factor, d_gate):
    """Map logit gradients to parameter gradients and dL/de.

    ``d_factor`` (B, n, r, V) and ``d_gate`` (B, r) are summed over the batch.
    """
    if isinstance(params, ReducedHeadParams):
        back = np.einsum("vf,bnrv->bnrf", params.shared_head, d_factor)
        grads = {"adapters": np.einsum("bnrf,be->nrfe", back, e)}
        de = np.einsum("nrfe,bnrf->be", params.adapters, back)
    else:
        grads = {"factor_weights": np.einsum("bnrv,be->nrve", d_factor, e)}
        de = np.einsum("nrve,bnrv->be", params.factor_weights, d_factor)
    grads["gate_weights"] = d_gate.T @ e
    de = de + d_gate @ params.gate_weights
    return grads, de


@dataclass
class CPModel:
    """Encoder plus multi-token head.

    In ``scratch`` mode the base next-token model is the first-position
    marginal of the CP head. In ``finetune`` mode it is the frozen pretrained
    head ``softmax(shared_head @ e)`` and the encoder is frozen.
    """
    encoder: enc.EncoderParams
    head: object
    mode: str = SCRATCH
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.mode not in (SCRATCH, FINETUNE):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.mode == FINETUNE and not isinstance(self.head, ReducedHeadParams):
            raise StructuralError("finetune mode needs a ReducedHeadParams head")
        n, r, V, E = self.head.dims
        if (V, E) != self.encoder.token_table.shape:
            raise StructuralError(
                f"head expects V={V}, E={E}, encoder has {self.encoder.token_table.shape}")
        if self.mode == FINETUNE:
            self.encoder.trainable = False

    @property
    def dims(self):
        return self.head.dims

    def forward(self, e):
        if isinstance(self.head, ReducedHeadParams):
            return forward_reduced(self.head, e)
        return forward_full(self.head, e)


def base_next_token_dist(model, e):
    """Log next-token distribution of the base (verifier) model at ``e``."""
    if model.mode == FINETUNE:
        return cpd.clamped_log_softmax(
            shared_logits(model.head.shared_head, np.asarray(e, dtype=np.float64)))
    return cpd.first_token_marginal(model.forward(e))
