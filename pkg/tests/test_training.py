import json
import warnings

import numpy as np
import pytest
from scipy.special import log_softmax, softmax

from cpmtp import corpus as corp
from cpmtp import cp_distribution as cpd
from cpmtp import encoder as enc
from cpmtp import heads
from cpmtp import training as tr
from cpmtp.errors import TrainingDiverged

from conftest import random_dist
from oracles import central_difference, rel_err


def scaled_head(rng, n=2, r=3, V=6, E=8, scale=4.0):
    p = heads.init_full_head(n, r, V, E, rng)
    p.factor_weights *= scale
    p.gate_weights *= scale
    return p


class TestJointNLL:
    def test_uniform(self):
        d = cpd.from_logits(np.zeros(2), np.zeros((2, 2, 4)))
        assert tr.joint_nll(d, np.array([0, 3])) == pytest.approx(2 * np.log(4), abs=1e-12)

    def test_point_mass(self):
        fl = np.full((2, 3, 4), -1e4)
        fl[0, :, 1] = fl[1, :, 2] = 0.0
        d = cpd.from_logits(np.zeros(3), fl)
        assert tr.joint_nll(d, np.array([1, 2])) == pytest.approx(0.0, abs=1e-12)

    def test_matches_materialized(self, rng):
        d = random_dist(rng, 3, 3, 5)
        T = cpd.materialize(d)
        x = (1, 4, 0)
        assert tr.joint_nll(d, np.array(x)) == pytest.approx(-np.log(T[x]), abs=1e-9)

    def test_batched_logits_agree(self, rng):
        fl = rng.normal(size=(5, 2, 3, 6))
        gl = rng.normal(size=(5, 3))
        t = rng.integers(0, 6, (5, 2))
        loss, _, _, _ = tr.joint_nll_logits(fl, gl, t)
        for b in range(5):
            d = cpd.from_logits(gl[b], fl[b])
            assert loss[b] == pytest.approx(tr.joint_nll(d, t[b]), abs=1e-12)


class TestJointGradients:
    def test_rank_one_is_cross_entropy(self, rng):
        fl = rng.normal(size=(1, 2, 1, 5))
        t = np.array([[3, 1]])
        _, d_factor, d_gate, rho = tr.joint_nll_logits(fl, np.zeros((1, 1)), t)
        assert rho[0, 0] == 1.0
        assert d_gate[0, 0] == 0.0
        for s in range(2):
            expect = softmax(fl[0, s, 0])
            expect[t[0, s]] -= 1
            np.testing.assert_allclose(d_factor[0, s, 0], expect, atol=1e-15)

    def test_point_mass_zero_gradient(self):
        fl = np.full((1, 2, 2, 4), -1e4)
        fl[0, 0, :, 1] = fl[0, 1, :, 2] = 0.0
        _, d_factor, d_gate, _ = tr.joint_nll_logits(fl, np.zeros((1, 2)), np.array([[1, 2]]))
        assert np.abs(d_factor).max() <= 1e-12
        assert np.abs(d_gate).max() <= 1e-12

    def test_responsibilities(self, rng):
        fl = rng.normal(size=(8, 2, 4, 5)) * 3
        gl = rng.normal(size=(8, 4)) * 3
        _, _, d_gate, rho = tr.joint_nll_logits(fl, gl, rng.integers(0, 5, (8, 2)))
        np.testing.assert_allclose(rho.sum(axis=1), 1.0, atol=1e-12)
        np.testing.assert_allclose(d_gate.sum(axis=1), 0.0, atol=1e-12)

    def test_full_head_finite_differences(self, rng):
        for _ in range(5):
            p = scaled_head(rng)
            e = rng.normal(size=8)
            t = rng.integers(0, 6, 2)
            _, g = tr.joint_nll_grad(p, e, t)
            f = lambda: tr.joint_nll(heads.forward_full(p, e), t)
            assert rel_err(g["factor_weights"], central_difference(f, p.factor_weights)) <= 1e-5
            assert rel_err(g["gate_weights"], central_difference(f, p.gate_weights)) <= 1e-5
            assert rel_err(g["embedding"], central_difference(f, e)) <= 1e-5

    def test_reduced_head_finite_differences(self, rng):
        W = rng.normal(size=(6, 5))
        p = heads.init_reduced_head(W, 2, 3, rng, identity=False)
        e = rng.normal(size=5)
        t = np.array([2, 5])
        _, g = tr.joint_nll_grad(p, e, t)
        f = lambda: tr.joint_nll(heads.forward_reduced(p, e), t)
        assert rel_err(g["adapters"], central_difference(f, p.adapters)) <= 1e-5
        assert rel_err(g["gate_weights"], central_difference(f, p.gate_weights)) <= 1e-5
        assert "shared_head" not in g


class TestAuxLoss:
    @staticmethod
    def one_hot(counts):
        r = len(counts)
        return np.repeat(np.eye(r), counts, axis=0)

    @pytest.mark.parametrize("counts, expect", [((25, 25, 25, 25), 0.0),
                                                ((100, 0, 0, 0), 0.75),
                                                ((50, 50, 0, 0), 0.25)])
    def test_hard_values(self, counts, expect):
        hard, surrogate, _ = tr.aux_loss(self.one_hot(counts))
        assert hard == pytest.approx(expect, abs=1e-15)
        assert surrogate == pytest.approx(expect, abs=1e-15)    # one-hot rows

    def test_ties_go_to_lowest_expert(self):
        stats = tr.balance_stats(np.full((10, 4), 0.25))
        np.testing.assert_array_equal(stats.counts, [10, 0, 0, 0])
        assert stats.max_utilization == 1.0

    def test_empty_batch(self):
        with pytest.raises(ValueError):
            tr.aux_loss(np.zeros((0, 3)))

    def test_surrogate_gradient(self, rng):
        probs = rng.dirichlet(np.ones(4), size=20)
        _, _, g = tr.aux_loss(probs)
        num = central_difference(lambda: tr.aux_loss(probs)[1], probs)
        assert rel_err(g, num) <= 1e-5


def naive_distill(draft_log, teacher_log, targets, beta, gamma):
    total = 0.0
    for k in range(len(targets)):
        kl = 0.0
        for v in range(draft_log.shape[1]):
            p = np.exp(draft_log[k, v])
            kl += p * (draft_log[k, v] - teacher_log[k, v])
        ce = -draft_log[k, targets[k]]
        total += gamma ** k * (beta * kl + (1 - beta) * ce)
    return total


class TestDistillation:
    def test_point_masses(self):
        lp = np.log(np.array([[1e-300, 1.0, 1e-300]] * 2))
        loss, _ = tr.distill_loss(lp, lp, np.array([1, 1]))
        assert loss == pytest.approx(0.0, abs=1e-12)

    def test_identical_distributions(self, rng):
        lp = log_softmax(rng.normal(size=(3, 5)), axis=1)
        t = np.array([0, 4, 2])
        loss, _ = tr.distill_loss(lp, lp, t, beta=0.9, gamma=0.9)
        ce = -lp[np.arange(3), t]
        assert loss == pytest.approx(0.1 * (ce * 0.9 ** np.arange(3)).sum(), abs=1e-12)

    def test_naive_oracle(self, rng):
        for _ in range(10):
            d = log_softmax(rng.normal(size=(3, 5)) * 2, axis=1)
            c = log_softmax(rng.normal(size=(3, 5)) * 2, axis=1)
            t = rng.integers(0, 5, 3)
            beta, gamma = rng.uniform(), rng.uniform(0.1, 1)
            loss, _ = tr.distill_loss(d, c, t, beta, gamma)
            assert loss == pytest.approx(naive_distill(d, c, t, beta, gamma), abs=1e-10)

    def test_gradient_wrt_draft_log(self, rng):
        d = log_softmax(rng.normal(size=(2, 5)), axis=1)
        c = log_softmax(rng.normal(size=(2, 5)), axis=1)
        t = np.array([1, 3])
        _, g = tr.distill_loss(d, c, t)
        num = central_difference(lambda: tr.distill_loss(d, c, t)[0], d)
        assert rel_err(g, num) <= 1e-5

    def test_teacher_zero_is_clamped(self):
        d = np.log(np.array([[0.5, 0.5]]))
        c = np.array([[0.0, -np.inf]])
        with pytest.warns(RuntimeWarning, match="clamping"):
            loss, g = tr.distill_loss(d, c, np.array([0]))
        assert np.isfinite(loss) and np.all(np.isfinite(g))
        assert loss == pytest.approx(0.9 * 0.5 * (np.log(0.5) - 0.0 + np.log(0.5) + 700)
                                     + 0.1 * np.log(2), rel=1e-12)

    def test_no_warning_for_small_teacher(self):
        d = np.log(np.array([[0.5, 0.5]]))
        with warnings.catch_warnings():
            warnings.simplefilter("error")
            tr.distill_loss(d, np.log(np.array([[1 - 1e-9, 1e-9]])), np.array([0]))

    def test_conditional_marginals_match_conditioning(self, rng):
        fl = rng.normal(size=(1, 3, 3, 4)) * 2
        gl = rng.normal(size=(1, 3)) * 2
        t = np.array([[2, 0, 3]])
        lp, _ = tr.conditional_marginals(fl, gl, t)
        d = cpd.from_logits(gl[0], fl[0])
        for k in range(3):
            np.testing.assert_allclose(lp[0, k], cpd.marginal(d, k), atol=1e-12)
            d = cpd.condition_on(d, k, t[0, k])

    def test_head_gradients(self, rng):
        for _ in range(5):
            p = scaled_head(rng)
            e = rng.normal(size=8)
            t = rng.integers(0, 6, 2)
            teacher = log_softmax(rng.normal(size=(2, 6)), axis=1)
            _, g = tr.distill_grad(p, e, teacher, t)

            def f():
                fl, gl = heads.head_logits(p, e[None])
                lp, _ = tr.conditional_marginals(fl, gl, t[None])
                return tr.distill_loss(lp[0], teacher, t)[0]
            assert rel_err(g["factor_weights"], central_difference(f, p.factor_weights)) <= 1e-5
            assert rel_err(g["gate_weights"], central_difference(f, p.gate_weights)) <= 1e-5


class TestAdam:
    def test_first_step_moves_by_lr(self):
        x = np.array([1.0, -2.0, 3.0])
        opt = tr.Adam({"x": x}, lr=0.1)
        opt.step({"x": x}, {"x": np.array([0.5, -3.0, 0.0])})
        np.testing.assert_allclose(x, [0.9, -1.9, 3.0], atol=1e-7)

    def test_warmup_scales_rate(self):
        x = np.zeros(1)
        opt = tr.Adam({"x": x}, lr=0.1, warmup=4)
        opt.step({"x": x}, {"x": np.ones(1)})
        assert x[0] == pytest.approx(-0.025, abs=1e-8)


def reference_independent_trainer(corpus, cfg, table, factors, steps):
    """Per-position softmax heads trained with plain cross-entropy.

    Written without the library's loss code: logits are ``W[s] @ e``, the
    encoder gradient flows through ``tanh`` and the decayed window sum.
    """
    table, W = table.copy(), factors.copy()         # W: (n, V, E)
    state = {k: (np.zeros_like(v), np.zeros_like(v)) for k, v in (("T", table), ("W", W))}
    stream = corp.batches(corpus, cfg.horizon, cfg.batch_size, seed=cfg.seed,
                          context_length=cfg.context_length, epochs=None)
    lam = cfg.decay
    losses = []
    for t in range(1, steps + 1):
        ctx, tgt = next(stream)
        B, L = ctx.shape
        coef = (1 - lam) * lam ** np.arange(L - 1, -1, -1) * (ctx >= 0)
        h = (coef[:, :, None] * table[np.maximum(ctx, 0)]).sum(axis=1)
        e = np.tanh(h)
        loss, dW, de = 0.0, np.zeros_like(W), np.zeros_like(e)
        for s in range(cfg.horizon):
            z = e @ W[s].T
            lp = log_softmax(z, axis=1)
            loss -= lp[np.arange(B), tgt[:, s]].sum()
            dz = np.exp(lp)
            dz[np.arange(B), tgt[:, s]] -= 1
            dW[s] = dz.T @ e / B
            de += dz @ W[s] / B
        dh = de * (1 - e ** 2)
        dT = np.zeros_like(table)
        for b in range(B):
            for l in range(L):
                if ctx[b, l] >= 0:
                    dT[ctx[b, l]] += coef[b, l] * dh[b]
        for key, p, g in (("T", table, dT), ("W", W, dW)):
            m, v = state[key]
            m[:] = 0.9 * m + 0.1 * g
            v[:] = 0.999 * v + 0.001 * g * g
            p -= cfg.learning_rate * (m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
        losses.append(loss / B)
    return np.array(losses), table, W


@pytest.fixture(scope="module")
def small_corpus():
    return corp.generate_markov(corp.random_markov(8, seed=3), 20_000, seed=3)


class TestTrain:
    def test_rank_one_equals_independent_heads(self, small_corpus):
        cfg = tr.TrainConfig(rank=1, horizon=2, aux_coefficient=0.0, steps=25, batch_size=32,
                             embed_dim=6, seed=4)
        init = tr.init_model(cfg, 8)
        ref_losses, ref_table, ref_W = reference_independent_trainer(
            small_corpus, cfg, init.encoder.token_table, init.head.factor_weights[:, 0], 25)
        model, metrics = tr.train(cfg, small_corpus)
        np.testing.assert_allclose(metrics.joint_nll, ref_losses, rtol=1e-10)
        np.testing.assert_allclose(model.encoder.token_table, ref_table, rtol=1e-8, atol=1e-12)
        np.testing.assert_allclose(model.head.factor_weights[:, 0], ref_W, rtol=1e-8, atol=1e-12)

    def test_uniform_corpus_reaches_entropy(self):
        c = corp.generate_markov(corp.uniform_markov(8, order=0), 100_000, seed=1)
        cfg = tr.TrainConfig(rank=2, horizon=2, steps=400, learning_rate=3e-3, embed_dim=16)
        model, _ = tr.train(cfg, c)
        assert abs(tr.evaluate(model, c)["joint_nll"] - 2 * np.log(8)) <= 0.01

    def test_markov_corpus_near_true_entropy(self, rank_models, main_chain):
        truth = corp.true_joint_nll(main_chain, 2)
        assert rank_models[4]["eval"]["joint_nll"] <= 1.05 * truth

    def test_worker_count_is_bit_identical(self, small_corpus):
        runs = []
        for workers in (1, 3):
            cfg = tr.TrainConfig(rank=3, horizon=2, steps=8, batch_size=200, embed_dim=8,
                                 workers=workers)
            model, metrics = tr.train(cfg, small_corpus)
            runs.append((model, [{k: v for k, v in r.items() if k != "wall_ms"}
                                 for r in metrics.records]))
        assert runs[0][1] == runs[1][1]
        np.testing.assert_array_equal(runs[0][0].head.factor_weights,
                                      runs[1][0].head.factor_weights)
        np.testing.assert_array_equal(runs[0][0].encoder.token_table,
                                      runs[1][0].encoder.token_table)

    def test_metrics_file(self, small_corpus, tmp_path):
        path = tmp_path / "m.jsonl"
        cfg = tr.TrainConfig(rank=2, horizon=2, steps=3, batch_size=16, embed_dim=4)
        tr.train(cfg, small_corpus, metrics_path=path)
        lines = [json.loads(x) for x in path.read_text().splitlines()]
        assert lines[0]["header"] and lines[0]["config"]["rank"] == 2
        assert [r["step"] for r in lines[1:]] == [0, 1, 2]
        assert set(lines[1]) == {"step", "joint_nll", "first_token_nll", "aux_hard",
                                 "aux_surrogate", "utilization", "wall_ms"}
        assert len(lines[1]["utilization"]) == 2

    def test_divergence_dumps_batch(self, small_corpus, tmp_path):
        cfg = tr.TrainConfig(rank=2, horizon=2, steps=3, batch_size=16, embed_dim=4)
        model = tr.init_model(cfg, 8)
        model.encoder.token_table[0] = np.nan
        dump = tmp_path / "dump.npz"
        with pytest.raises(TrainingDiverged) as info:
            tr.train(cfg, small_corpus, model=model, dump_path=dump)
        assert info.value.step == 0
        assert np.load(dump)["targets"].shape == (16, 2)

    def test_config_validation(self):
        with pytest.raises(ValueError):
            tr.TrainConfig(mode="other")
        with pytest.raises(ValueError):
            tr.TrainConfig(distill_beta=1.5)
        with pytest.raises(ValueError):
            tr.TrainConfig(rank=0)


class TestFinetune:
    def test_distillation_run(self):
        c = corp.generate_markov(corp.clustered_markov(16, 4, seed=1, lead=0.3), 30_000, seed=1)
        base_cfg = tr.TrainConfig(rank=1, horizon=1, steps=150, embed_dim=16)
        base, _ = tr.train(base_cfg, c)
        model = tr.finetune_model(base, horizon=2, rank=3)
        W0 = model.head.shared_head.copy()
        T0 = model.encoder.token_table.copy()
        cfg = tr.TrainConfig(mode=heads.FINETUNE, rank=3, horizon=2, steps=100, embed_dim=16)
        model, metrics = tr.train(cfg, c, model=model)
        distill = metrics.column("distill")
        assert distill[-10:].mean() < distill[:10].mean()
        np.testing.assert_array_equal(model.head.shared_head, W0)
        np.testing.assert_array_equal(model.encoder.token_table, T0)
        # the frozen head still defines the base model on the same windows
        pos = corp.window_positions(c, 2, "val")[:20000]
        ctx, tgt = corp.gather_windows(c, pos, 2, 16, "val")
        _, e = enc.encode_last(base.encoder, ctx)
        lp = log_softmax(e @ base.head.factor_weights[0, 0].T, axis=1)
        expect = -lp[np.arange(len(pos)), tgt[:, 0]].mean()
        assert tr.evaluate(model, c)["base_nll"] == pytest.approx(expect, abs=1e-10)

    def test_base_must_be_single_head(self, rng):
        cfg = tr.TrainConfig(rank=2, horizon=1, embed_dim=4)
        with pytest.raises(ValueError):
            tr.finetune_model(tr.init_model(cfg, 5), 2, 2)
