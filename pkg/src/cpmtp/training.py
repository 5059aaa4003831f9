"""Losses, analytic gradients and the training loop.

All losses are computed on batched logits in log space. The gradient path is
written out by hand:

* joint NLL: ``d/d factor_logits[s, a, v] = rho_a (softmax_v - [v == x_s])``
  and ``d/d gate_logits = w - rho`` where ``rho`` is the posterior over
  experts given the targets;
* the balancing surrogate acts on batch-mean gate probabilities;
* the distillation loss is backpropagated through the sequence of
  conditional marginals obtained by conditioning on ground-truth tokens.
"""

import json
import time
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np
from ._numeric import logsumexp, softmax

from . import corpus as corp
from . import cp_distribution as cpd
from . import encoder as enc
from . import heads
from .errors import TrainingDiverged
from .rng import spawn

CHUNK = 64
TEACHER_FLOOR = -700.0


# --- per-example building blocks ---------------------------------------------

def _normalized(factor_logits, gate_logits):
    return (cpd.clamped_log_softmax(factor_logits, axis=-1),
            cpd.clamped_log_softmax(gate_logits, axis=-1))


def _picked(log_f, targets):
    """C[b, s, a] = log P^(s)(targets[b, s] | a)."""
    B, n = targets.shape
    return log_f[np.arange(B)[:, None], np.arange(n)[None, :], :, targets]


def joint_nll(dist, targets):
    return -cpd.log_prob(dist, targets)


def joint_nll_logits(factor_logits, gate_logits, targets):
    """Batched joint NLL and its gradients w.r.t. the logits.

    Returns ``(loss (B,), d_factor (B, n, r, V), d_gate (B, r), rho (B, r))``.
    """
    targets = np.asarray(targets)
    log_f, log_w = _normalized(factor_logits, gate_logits)
    C = _picked(log_f, targets)                    # (B, n, r)
    terms = log_w + C.sum(axis=1)
    loss = -logsumexp(terms, axis=1)
    rho = softmax(terms, axis=1)
    d_factor = np.exp(log_f) * rho[:, None, :, None]
    B, n = targets.shape
    b_idx, s_idx = np.meshgrid(np.arange(B), np.arange(n), indexing="ij")
    d_factor[b_idx, s_idx, :, targets] -= rho[:, None, :]
    d_gate = np.exp(log_w) - rho
    return loss, d_factor, d_gate, rho


def first_token_nll_logits(factor_logits, gate_logits, targets):
    log_f, log_w = _normalized(factor_logits, gate_logits)
    lp = logsumexp(log_w[:, :, None] + log_f[:, 0], axis=1)
    return -np.take_along_axis(lp, np.asarray(targets)[:, :1], axis=1)[:, 0]


def joint_nll_grad(params, e, targets):
    """Gradient of ``-log P(targets)`` for one embedding.

    Returns ``(loss, grads)``; ``grads`` holds one entry per trainable head
    array plus ``"embedding"`` (dL/de).
    """
    e = np.atleast_2d(np.asarray(e, dtype=np.float64))
    targets = np.atleast_2d(np.asarray(targets))
    factor, gate = heads.head_logits(params, e)
    loss, d_factor, d_gate, _ = joint_nll_logits(factor, gate, targets)
    grads, de = heads.head_backward(params, e, d_factor, d_gate)
    grads["embedding"] = de[0]
    return float(loss[0]), grads


# --- load balancing ------------------------------------------------------------

@dataclass
class BalanceStats:
    counts: np.ndarray          # argmax counts per expert
    total: int
    hard_loss: float
    mean_probs: np.ndarray

    @property
    def utilization(self):
        return self.counts / self.total

    @property
    def max_utilization(self):
        return float(self.utilization.max())


def balance_stats(gate_probs):
    gate_probs = np.asarray(gate_probs, dtype=np.float64)
    if gate_probs.ndim != 2 or gate_probs.shape[0] == 0:
        raise ValueError("need a non-empty (B, r) matrix of gate probabilities")
    B, r = gate_probs.shape
    counts = np.bincount(np.argmax(gate_probs, axis=1), minlength=r)
    hard = float(((counts / B - 1.0 / r) ** 2).sum())
    return BalanceStats(counts, B, hard, gate_probs.mean(axis=0))


def aux_loss(gate_probs):
    """Balancing penalty on a batch of gate weights.

    Returns ``(hard, surrogate, grad)``: the argmax-count penalty (reported
    only), the same penalty on column-mean probabilities, and the gradient of
    the surrogate w.r.t. ``gate_probs``.
    """
    stats = balance_stats(gate_probs)
    B, r = np.shape(gate_probs)
    dev = stats.mean_probs - 1.0 / r
    surrogate = float((dev ** 2).sum())
    grad = np.broadcast_to(2.0 * dev / B, (B, r)).copy()
    return stats.hard_loss, surrogate, grad


def _softmax_backward(probs, grad):
    return probs * (grad - (probs * grad).sum(axis=-1, keepdims=True))


# --- conditional marginals and distillation -------------------------------------

def conditional_marginals(factor_logits, gate_logits, targets):
    """Log marginal of each position given the preceding ground-truth targets.

    Returns ``(log_p (B, n, V), cache)``; position ``k`` conditions on
    ``targets[:, :k]``.
    """
    targets = np.asarray(targets)
    log_f, log_w = _normalized(factor_logits, gate_logits)
    C = _picked(log_f, targets)
    B, n, r, V = log_f.shape
    a = np.empty((B, n, r))
    a[:, 0] = log_w
    for k in range(1, n):
        a[:, k] = a[:, k - 1] + C[:, k - 1]
    joint = a[..., None] + log_f                   # (B, n, r, V)
    log_p = logsumexp(joint, axis=2) - logsumexp(a, axis=2)[..., None]
    return log_p, (log_f, log_w, a, joint, targets)


def conditional_marginals_backward(cache, g):
    """Logit gradients given dL/d log_p of :func:`conditional_marginals`."""
    log_f, log_w, a, joint, targets = cache
    B, n, r, V = log_f.shape
    post_v = softmax(joint, axis=2)                # pi(a | v) per position
    post = softmax(a, axis=2)                      # pi(a) per position
    dF = g[:, :, None, :] * post_v
    da = (g[:, :, None, :] * post_v).sum(axis=3) - post * g.sum(axis=2)[..., None]
    dlogw = da.sum(axis=1)
    # a[k] includes C[j] for every j < k
    dC = np.cumsum(da[:, ::-1], axis=1)[:, ::-1]
    b_idx, s_idx = np.meshgrid(np.arange(B), np.arange(n - 1), indexing="ij")
    if n > 1:
        dF[b_idx, s_idx, :, targets[:, :n - 1]] += dC[:, 1:]
    d_factor = dF - np.exp(log_f) * dF.sum(axis=3, keepdims=True)
    d_gate = dlogw - np.exp(log_w) * dlogw.sum(axis=1, keepdims=True)
    return d_factor, d_gate


def distill_loss(draft_log, teacher_log, targets, beta=0.9, gamma=0.9):
    """Discounted distillation loss for one window.

    ``draft_log`` and ``teacher_log`` are (n, V) log distributions; the loss
    is ``sum_k gamma**k [beta KL(draft_k || teacher_k) + (1 - beta) CE]`` with
    ``k`` counted from 0. Returns ``(loss, grad)`` with ``grad`` the gradient
    w.r.t. ``draft_log``; the teacher gets none.
    """
    draft_log = np.asarray(draft_log, dtype=np.float64)
    teacher_log = np.asarray(teacher_log, dtype=np.float64)
    targets = np.asarray(targets)
    if not 0.0 <= beta <= 1.0 or not 0.0 < gamma <= 1.0:
        raise ValueError("need beta in [0, 1] and gamma in (0, 1]")
    p = np.exp(draft_log)
    if np.any((teacher_log < TEACHER_FLOOR) & (p > 0)):
        warnings.warn("teacher assigns zero probability where the draft has mass; "
                      "clamping teacher log-probs at -700", RuntimeWarning)
    teacher_log = np.maximum(teacher_log, TEACHER_FLOOR)
    n = draft_log.shape[0]
    disc = gamma ** np.arange(n)
    diff = draft_log - teacher_log
    kl = (p * diff).sum(axis=1)
    ce = -draft_log[np.arange(n), targets]
    loss = float((disc * (beta * kl + (1 - beta) * ce)).sum())
    grad = beta * p * (diff + 1.0)
    grad[np.arange(n), targets] -= 1 - beta
    return loss, grad * disc[:, None]


def distill_grad(params, e, teacher_log, targets, beta=0.9, gamma=0.9):
    """Distillation loss and head gradients for one embedding."""
    e = np.atleast_2d(np.asarray(e, dtype=np.float64))
    factor, gate = heads.head_logits(params, e)
    log_p, cache = conditional_marginals(factor, gate, np.atleast_2d(targets))
    loss, g = distill_loss(log_p[0], teacher_log, targets, beta, gamma)
    d_factor, d_gate = conditional_marginals_backward(cache, g[None])
    grads, de = heads.head_backward(params, e, d_factor, d_gate)
    grads["embedding"] = de[0]
    return loss, grads


# --- optimizer ------------------------------------------------------------------

class Adam:
    def __init__(self, params, lr=1e-2, b1=0.9, b2=0.999, eps=1e-8, warmup=0):
        self.lr, self.b1, self.b2, self.eps, self.warmup = lr, b1, b2, eps, warmup
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params, grads):
        self.t += 1
        lr = self.lr * min(1.0, self.t / self.warmup) if self.warmup else self.lr
        c1 = 1 - self.b1 ** self.t
        c2 = 1 - self.b2 ** self.t
        for k, p in params.items():
            g = grads[k]
            self.m[k] = self.b1 * self.m[k] + (1 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1 - self.b2) * g * g
            p -= lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)


# --- training loop ----------------------------------------------------------------

@dataclass
class TrainConfig:
    mode: str = heads.SCRATCH
    rank: int = 4
    horizon: int = 2
    aux_coefficient: float = 0.1
    distill_beta: float = 0.9
    discount: float = 0.9
    learning_rate: float = 1e-2
    batch_size: int = 128
    steps: int = 1000
    seed: int = 0
    embed_dim: int = enc.DEFAULT_DIM
    decay: float = enc.DEFAULT_DECAY
    context_length: int = 16
    warmup_steps: int = 0
    workers: int = 1

    def __post_init__(self):
        if self.mode not in (heads.SCRATCH, heads.FINETUNE):
            raise ValueError(f"unknown mode {self.mode!r}")
        if not 0.0 <= self.distill_beta <= 1.0:
            raise ValueError("distill_beta must lie in [0, 1]")
        if not 0.0 < self.discount <= 1.0:
            raise ValueError("discount must lie in (0, 1]")
        if self.aux_coefficient < 0:
            raise ValueError("aux_coefficient must be non-negative")
        if self.rank < 1 or self.horizon < 1 or self.batch_size < 1 or self.steps < 0:
            raise ValueError("rank, horizon and batch_size must be positive, steps >= 0")

    def to_dict(self):
        return asdict(self)


@dataclass
class TrainMetrics:
    records: list = field(default_factory=list)

    def column(self, key):
        return np.array([r[key] for r in self.records])

    @property
    def joint_nll(self):
        return self.column("joint_nll")

    @property
    def first_token_nll(self):
        return self.column("first_token_nll")


def init_model(config, vocab):
    rng = spawn(config.seed, 1)
    encoder = enc.init_encoder(vocab, config.embed_dim, rng, decay=config.decay)
    head = heads.init_full_head(config.horizon, config.rank, vocab, config.embed_dim, rng)
    return heads.CPModel(encoder, head, heads.SCRATCH)


def finetune_model(base, horizon, rank, seed=0, noise=1e-2):
    """Reduced-head model around a pretrained single-head ``base`` model.

    ``base`` must be a scratch model with one position and one expert; its
    output matrix becomes the frozen shared head and its encoder is frozen.
    """
    n, r, V, E = base.dims
    if base.mode != heads.SCRATCH or (n, r) != (1, 1):
        raise ValueError("base model must be a scratch model with horizon 1 and rank 1")
    shared = base.head.factor_weights[0, 0]
    head = heads.init_reduced_head(shared, horizon, rank, spawn(seed, 2), noise=noise)
    encoder = enc.EncoderParams(base.encoder.token_table.copy(), base.encoder.decay,
                                trainable=False)
    return heads.CPModel(encoder, head, heads.FINETUNE)


def _extended_embeddings(model, h0, targets):
    """Embeddings after appending targets[:, :k] for k = 0..n-1, shape (B, n, E)."""
    lam = model.encoder.decay
    table = model.encoder.token_table
    B, n = targets.shape
    out = np.empty((B, n, h0.shape[1]))
    h = h0
    out[:, 0] = np.tanh(h)
    for k in range(1, n):
        h = lam * h + (1 - lam) * table[targets[:, k - 1]]
        out[:, k] = np.tanh(h)
    return out


def teacher_log_probs(model, h0, targets):
    """Frozen pretrained next-token log-probs along the ground-truth path."""
    e = _extended_embeddings(model, h0, targets)
    return cpd.clamped_log_softmax(heads.shared_logits(model.head.shared_head, e), axis=-1)


def _chunk(model, config, contexts, targets, aux_grad_coef, batch_size):
    """Loss sums and gradient sums for one fixed-size chunk of a batch."""
    head = model.head
    h0, e = enc.encode_last(model.encoder, contexts)
    factor, gate = heads.head_logits(head, e)
    nll, d_factor, d_gate, _ = joint_nll_logits(factor, gate, targets)
    first = first_token_nll_logits(factor, gate, targets)
    probs = softmax(np.clip(gate, -cpd.LOGIT_CLAMP, cpd.LOGIT_CLAMP), axis=1)
    if config.mode == heads.FINETUNE:
        log_p, cache = conditional_marginals(factor, gate, targets)
        teacher = teacher_log_probs(model, h0, targets)
        losses, g = zip(*(distill_loss(log_p[b], teacher[b], targets[b],
                                       config.distill_beta, config.discount)
                          for b in range(targets.shape[0])))
        loss_sum = float(np.sum(losses))
        d_factor, d_gate = conditional_marginals_backward(cache, np.stack(g))
    else:
        loss_sum = float(nll.sum())
    d_factor = d_factor / batch_size
    d_gate = d_gate / batch_size
    if aux_grad_coef is not None:
        d_gate = d_gate + _softmax_backward(probs, np.broadcast_to(aux_grad_coef, probs.shape))
    grads, de = heads.head_backward(head, e, d_factor, d_gate)
    if model.encoder.trainable:
        grads["token_table"] = enc.encode_last_grad(model.encoder, contexts, e, de)
    return loss_sum, float(nll.sum()), float(first.sum()), probs, grads


def _batch_gate_probs(model, contexts):
    _, e = enc.encode_last(model.encoder, contexts)
    gate = e @ model.head.gate_weights.T
    return softmax(np.clip(gate, -cpd.LOGIT_CLAMP, cpd.LOGIT_CLAMP), axis=1)


def batch_step(model, config, contexts, targets, pool=None):
    """Loss terms and summed gradients for one minibatch.

    The batch is cut into fixed chunks of 64 windows and chunk results are
    added in chunk order, so the result does not depend on the worker count.
    """
    B = targets.shape[0]
    r = model.dims[1]
    aux_coef = None
    if config.aux_coefficient > 0 and r > 1:
        pbar = _batch_gate_probs(model, contexts).mean(axis=0)
        aux_coef = config.aux_coefficient * 2.0 * (pbar - 1.0 / r) / B
    spans = [(k, min(k + CHUNK, B)) for k in range(0, B, CHUNK)]
    job = lambda sp: _chunk(model, config, contexts[sp[0]:sp[1]], targets[sp[0]:sp[1]],
                            aux_coef, B)
    results = list(pool.map(job, spans)) if pool is not None else [job(sp) for sp in spans]
    loss = sum(r_[0] for r_ in results) / B
    nll = sum(r_[1] for r_ in results) / B
    first = sum(r_[2] for r_ in results) / B
    probs = np.concatenate([r_[3] for r_ in results])
    grads = {k: v.copy() for k, v in results[0][4].items()}
    for res in results[1:]:
        for k, v in res[4].items():
            grads[k] += v
    hard, surrogate, _ = aux_loss(probs)
    if aux_coef is not None:
        loss += config.aux_coefficient * surrogate
    return {"loss": loss, "joint_nll": nll, "first_token_nll": first, "aux_hard": hard,
            "aux_surrogate": surrogate, "utilization": balance_stats(probs).utilization,
            "grads": grads}


def trainable_arrays(model):
    params = dict(model.head.trainable())
    if model.encoder.trainable:
        params["token_table"] = model.encoder.token_table
    return params


def train(config, corpus, model=None, metrics_path=None, dump_path=None):
    """Minibatch Adam training; returns ``(model, TrainMetrics)``.

    Scratch mode minimizes mean joint NLL plus the weighted balancing
    surrogate. Finetune mode (``model`` from :func:`finetune_model`) minimizes
    the distillation loss plus the same surrogate, with the encoder and the
    shared head frozen. A JSON-lines record is written per step when
    ``metrics_path`` is given; its first line is a header holding the config.
    """
    if model is None:
        if config.mode != heads.SCRATCH:
            raise ValueError("finetune mode needs a model built by finetune_model")
        model = init_model(config, corpus.vocab_size)
    n, r, V, E = model.dims
    if (n, r) != (config.horizon, config.rank) or model.mode != config.mode:
        raise ValueError(f"model (n={n}, r={r}, {model.mode}) does not match config")
    params = trainable_arrays(model)
    opt = Adam(params, lr=config.learning_rate, warmup=config.warmup_steps)
    stream = corp.batches(corpus, n, config.batch_size, seed=config.seed,
                          context_length=config.context_length, epochs=None)
    metrics = TrainMetrics()
    out = open(metrics_path, "w") if metrics_path else None
    pool = ThreadPoolExecutor(config.workers) if config.workers > 1 else None
    try:
        if out:
            out.write(json.dumps({"header": True, "config": config.to_dict()}) + "\n")
        for step_idx in range(config.steps):
            t0 = time.perf_counter()
            contexts, targets = next(stream)
            res = batch_step(model, config, contexts, targets, pool)
            if not np.isfinite(res["loss"]):
                if dump_path:
                    np.savez(dump_path, contexts=contexts, targets=targets)
                raise TrainingDiverged(f"non-finite loss at step {step_idx}", step_idx,
                                       (contexts, targets))
            opt.step(params, res["grads"])
            rec = {"step": step_idx,
                   "joint_nll": res["joint_nll"],
                   "first_token_nll": res["first_token_nll"],
                   "aux_hard": res["aux_hard"],
                   "aux_surrogate": res["aux_surrogate"],
                   "utilization": res["utilization"].tolist(),
                   "wall_ms": (time.perf_counter() - t0) * 1e3}
            if config.mode == heads.FINETUNE:
                rec["distill"] = res["loss"]
            metrics.records.append(rec)
            if out:
                out.write(json.dumps(rec) + "\n")
    finally:
        if out:
            out.close()
        if pool:
            pool.shutdown()
    return model, metrics


def evaluate(model, corpus, part="val", context_length=16, max_windows=20000, horizon=None):
    """Mean joint NLL, first-token NLL and balance statistics on a split.

    Uses the first ``max_windows`` windows of the split in stream order.
    """
    n = model.dims[0] if horizon is None else horizon
    pos = corp.window_positions(corpus, n, part)[:max_windows]
    contexts, targets = corp.gather_windows(corpus, pos, n, context_length, part)
    h0, e = enc.encode_last(model.encoder, contexts)
    factor, gate = heads.head_logits(model.head, e)
    nll, _, _, _ = joint_nll_logits(factor, gate, targets)
    first = first_token_nll_logits(factor, gate, targets)
    probs = softmax(np.clip(gate, -cpd.LOGIT_CLAMP, cpd.LOGIT_CLAMP), axis=1)
    out = {"joint_nll": float(nll.mean()), "first_token_nll": float(first.mean()),
           "balance": balance_stats(probs)}
    if model.mode == heads.FINETUNE:
        base = cpd.clamped_log_softmax(heads.shared_logits(model.head.shared_head, e), axis=-1)
        out["base_nll"] = float(-base[np.arange(len(pos)), targets[:, 0]].mean())
    return out
