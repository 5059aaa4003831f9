"""Self-check suite run by ``cpmtp verify``.

Each check builds fresh random instances, compares a fast path with a
brute-force or finite-difference oracle and returns a result dict.
"""

import numpy as np

from . import cp_distribution as cpd
from . import encoder as enc
from . import heads
from . import sampler
from . import speculative as sp
from . import training as tr
from .rng import make_rng


def random_dist(rng, n, r, V, scale=2.0):
    return cpd.from_logits(rng.normal(0, scale, r), rng.normal(0, scale, (n, r, V)))


def central_difference(f, arr, h=1e-5):
    """Numerical gradient of scalar ``f()`` w.r.t. ``arr`` (perturbed in place)."""
    out = np.zeros_like(arr)
    for i in np.ndindex(arr.shape):
        old = arr[i]
        arr[i] = old + h
        fp = f()
        arr[i] = old - h
        fm = f()
        arr[i] = old
        out[i] = (fp - fm) / (2 * h)
    return out


def rel_err(a, b):
    scale = max(np.linalg.norm(a), np.linalg.norm(b))
    return float(np.linalg.norm(a - b) / scale) if scale > 0 else 0.0


def _result(name, value, tol):
    return {"check": name, "passed": bool(value <= tol), "value": float(value), "tolerance": tol}


def check_materialize(rng, cases=200):
    worst = 0.0
    for _ in range(cases):
        n, r, V = rng.integers(1, 4), rng.integers(1, 6), rng.integers(2, 8)
        d = random_dist(rng, n, r, V)
        T = cpd.materialize(d)
        for idx in np.ndindex(T.shape):
            worst = max(worst, abs(np.exp(cpd.log_prob(d, np.array(idx))) - T[idx]))
    return _result("materialize_vs_log_prob", worst, 1e-9)


def check_conditioning(rng, cases=100):
    worst = 0.0
    for _ in range(cases):
        d = random_dist(rng, 3, 3, 5)
        x = int(rng.integers(5))
        T = cpd.materialize(d)
        oracle = T[x].sum(axis=1) / T[x].sum()
        got = np.exp(cpd.marginal(cpd.condition_on(d, 0, x), 1))
        worst = max(worst, float(np.abs(got - oracle).max()))
    return _result("condition_then_marginal", worst, 1e-9)


def check_gradients(rng, cases=10, n=2, r=3, V=6, E=8):
    worst = 0.0
    for _ in range(cases):
        p = heads.init_full_head(n, r, V, E, rng)
        p.factor_weights *= 4
        p.gate_weights *= 4
        e = rng.normal(size=E)
        t = rng.integers(0, V, n)
        _, g = tr.joint_nll_grad(p, e, t)
        f = lambda: tr.joint_nll(heads.forward_full(p, e), t)
        for k in ("factor_weights", "gate_weights"):
            worst = max(worst, rel_err(g[k], central_difference(f, getattr(p, k))))
        teacher = cpd.clamped_log_softmax(rng.normal(size=(n, V)))
        _, g = tr.distill_grad(p, e, teacher, t)

        def fd():
            fl, gl = heads.head_logits(p, e[None])
            lp, _ = tr.conditional_marginals(fl, gl, t[None])
            return tr.distill_loss(lp[0], teacher, t)[0]
        for k in ("factor_weights", "gate_weights"):
            worst = max(worst, rel_err(g[k], central_difference(fd, getattr(p, k))))
        probs = rng.dirichlet(np.ones(r), size=16)
        _, _, g = tr.aux_loss(probs)
        worst = max(worst, rel_err(g, central_difference(lambda: tr.aux_loss(probs)[1], probs)))
        params = enc.init_encoder(V, E, rng)
        toks = rng.integers(0, V, 6)
        up = rng.normal(size=(6, E))
        g = enc.encode_grad(params, toks, up)
        num = central_difference(lambda: float((enc.encode(params, toks) * up).sum()),
                                 params.token_table)
        worst = max(worst, rel_err(g, num))
    return _result("gradients_vs_finite_differences", worst, 1e-5)


def check_sampler(rng, samples=200_000):
    d = random_dist(rng, 2, 3, 4)
    draws = sampler.sample_sequences(d, samples, 1.0, rng)
    emp = np.bincount(draws[:, 0] * 4 + draws[:, 1], minlength=16) / samples
    tv = 0.5 * np.abs(emp - cpd.materialize(d).ravel()).sum()
    return _result("sampler_total_variation", tv, 0.01)


def check_lossless(rng, prompts=20, V=12, E=8):
    model = heads.CPModel(enc.init_encoder(V, E, rng), heads.init_full_head(3, 3, V, E, rng))
    model.head.factor_weights *= 6
    mismatches = 0
    for _ in range(prompts):
        p = list(rng.integers(0, V, 5))
        if sp.generate(model, p, 25)[0] != sp.base_greedy_generate(model, p, 25):
            mismatches += 1
    return _result("greedy_losslessness", mismatches, 0)


def check_reduced(rng, cases=20, n=2, r=3, V=10, E=6):
    worst = 0.0
    for _ in range(cases):
        p = heads.init_reduced_head(rng.normal(size=(V, E)), n, r, rng, identity=False)
        e = rng.normal(size=E)
        a = heads.forward_reduced(p, e)
        b = heads.forward_full(p.composed(), e)
        worst = max(worst, float(np.abs(a.log_factors - b.log_factors).max()))
    return _result("reduced_vs_full_head", worst, 1e-10)


CHECKS = (check_materialize, check_conditioning, check_gradients, check_sampler,
          check_lossless, check_reduced)


def run_all(seed=0):
    return [check(make_rng(seed + i)) for i, check in enumerate(CHECKS)]
