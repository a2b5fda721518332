import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from finealign.core import TokenSet, global_similarity, l2_normalize
from finealign.errors import SpecInfeasible
from finealign.grad import BatchSimilarity, finite_diff_gradient
from finealign.harness import CorpusSpec, DistillConfig, TrainConfig, generate_corpus, train_toy
from finealign.loss import BatchScores, contrastive_loss
from finealign.strategies import StrategyConfig, pair_similarity, score_matrices


class TestCorpus:
    def test_noiseless_plain(self):
        c = generate_corpus(CorpusSpec(n_pairs=6, tokens_per_item=1, dim=8, concept_count=8, noise_sigma=0.0,
                                       collision_mode=False, seed=3))
        for i in range(6):
            for j in range(6):
                g = global_similarity(c.visual[i], c.text[j])
                if c.concepts[i] == c.concepts[j]:
                    assert g == pytest.approx(1.0, abs=1e-12)
                else:
                    assert g == pytest.approx(0.0, abs=1e-12)

    def test_noiseless_collisions(self):
        c = generate_corpus(CorpusSpec(n_pairs=8, noise_sigma=0.0, seed=1))
        a, b = 0, 1
        assert c.concepts[a] != c.concepts[b]
        gap_global = global_similarity(c.visual[a], c.text[b]) - global_similarity(c.visual[a], c.text[a])
        assert abs(gap_global) < 1e-6
        for kind in ("max-avg", "scan", "tokenflow"):
            cfg = StrategyConfig(kind, global_blend_w=0.0)
            gap = pair_similarity(c.visual[a], c.text[a], cfg).s_t - pair_similarity(c.visual[a], c.text[b], cfg).s_t
            assert gap > 0.1

    def test_uniform_cannot_separate_collisions(self):
        # mean pooling of (base +- diff) / sqrt(2) erases diff
        c = generate_corpus(CorpusSpec(n_pairs=4, noise_sigma=0.0, seed=1))
        cfg = StrategyConfig("uniform")
        s_true = pair_similarity(c.visual[0], c.text[0], cfg).s_t
        s_conf = pair_similarity(c.visual[0], c.text[1], cfg).s_t
        assert abs(s_true - s_conf) < 1e-12

    def test_deterministic(self):
        a = generate_corpus(CorpusSpec(n_pairs=5, seed=9))
        b = generate_corpus(CorpusSpec(n_pairs=5, seed=9))
        assert_array_equal(a.visual_tokens, b.visual_tokens)
        assert_array_equal(a.text_tokens, b.text_tokens)

    def test_tokens_unit_norm(self):
        c = generate_corpus(CorpusSpec(n_pairs=3))
        assert_allclose(np.linalg.norm(c.visual_tokens, axis=-1), 1.0)

    @pytest.mark.parametrize(
        "kw",
        [
            {"concept_count": 40, "dim": 32},
            {"tokens_per_item": 3},
            {"n_pairs": 0},
            {"noise_sigma": -1.0},
            {"concept_count": 2, "dim": 8, "tokens_per_item": 4},
        ],
    )
    def test_infeasible(self, kw):
        with pytest.raises(SpecInfeasible):
            CorpusSpec(**kw)


def small_corpus(**kw):
    spec = dict(n_pairs=8, tokens_per_item=2, dim=8, concept_count=8, seed=0)
    spec.update(kw)
    return generate_corpus(CorpusSpec(**spec))


class TestTrainConfig:
    @pytest.mark.parametrize(
        "kw",
        [{"lr": -1.0}, {"steps": 0}, {"batch": 1}, {"param_mode": "other"}, {"blend_mode": "x"}, {"train_fraction": 0}],
    )
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            TrainConfig(**kw)

    def test_emd_rejected(self):
        with pytest.raises(ValueError):
            TrainConfig(strategy=StrategyConfig("emd"))


class TestTrainer:
    def test_zero_lr_constant_loss(self):
        trace = train_toy(TrainConfig(steps=4, lr=0.0), small_corpus())
        assert len(set(trace.losses)) == 1

    def test_first_loss_closed_form(self):
        corpus = small_corpus()
        cfg = StrategyConfig("tokenflow")
        trace = train_toy(TrainConfig(strategy=cfg, steps=1, train_fraction=1.0), corpus)
        sm = score_matrices(corpus.visual, corpus.text, cfg)
        assert trace.records[0]["loss"] == pytest.approx(contrastive_loss(BatchScores(sm.s_v, sm.s_t)), abs=1e-12)

    @pytest.mark.parametrize("blend_mode", ["similarity", "loss"])
    @pytest.mark.parametrize("kind", ["scan", "tokenflow", "learnable"])
    def test_step_is_gradient_descent(self, kind, blend_mode):
        corpus = small_corpus(n_pairs=4, dim=4, concept_count=4)
        strategy = StrategyConfig(kind, lam=2.0, global_blend_w=0.3)
        cfg = TrainConfig(strategy=strategy, steps=1, lr=1.0, param_mode="linear-projection", logit_scale=5.0,
                          blend_mode=blend_mode, train_fraction=1.0)
        trace = train_toy(cfg, corpus)
        xv, xt = corpus.visual_tokens, corpus.text_tokens

        def feats(x, w):
            z = x @ w.T
            g = z.mean(axis=1)
            return z / np.linalg.norm(z, axis=-1, keepdims=True), g / np.linalg.norm(g, axis=-1, keepdims=True)

        def loss(wv, wt, logits):
            mu, mg = feats(xv, wv)
            om, og = feats(xt, wt)
            s = StrategyConfig(kind, lam=2.0, global_blend_w=0.0 if blend_mode == "loss" else 0.3,
                               learnable_params=logits)
            bs = BatchSimilarity(mu, om, mg, og, s)
            value = contrastive_loss(BatchScores(bs.s_v, bs.s_t, 5.0))
            if blend_mode == "loss":
                value = 0.7 * value + 0.3 * contrastive_loss(BatchScores(bs.s_global, bs.s_global, 5.0))
            return value

        point = [np.eye(4), np.eye(4), np.zeros((2, 2))]
        numeric = finite_diff_gradient(loss, point)
        assert_allclose(np.eye(4) - trace.params["W_v"], numeric[0], atol=1e-8)
        assert_allclose(np.eye(4) - trace.params["W_t"], numeric[1], atol=1e-8)
        if kind == "learnable":
            assert_allclose(-trace.params["logits"], numeric[2], atol=1e-8)

    def test_md_step_uses_fixed_soft_targets(self):
        corpus = small_corpus(n_pairs=4, dim=4, concept_count=4)
        strategy = StrategyConfig("tokenflow", lam=2.0)
        cfg = TrainConfig(strategy=strategy, steps=1, lr=1.0, param_mode="linear-projection", logit_scale=5.0,
                          md=DistillConfig(target_alpha=0.4), train_fraction=1.0)
        trace = train_toy(cfg, corpus)
        xv, xt = corpus.visual_tokens, corpus.text_tokens

        def scores(wv, wt):
            zv, zt = xv @ wv.T, xt @ wt.T
            gv, gt = zv.mean(axis=1), zt.mean(axis=1)
            bs = BatchSimilarity(
                zv / np.linalg.norm(zv, axis=-1, keepdims=True),
                zt / np.linalg.norm(zt, axis=-1, keepdims=True),
                gv / np.linalg.norm(gv, axis=-1, keepdims=True),
                gt / np.linalg.norm(gt, axis=-1, keepdims=True),
                strategy,
            )
            return BatchScores(bs.s_v, bs.s_t, 5.0)

        from finealign.loss import md_pseudo_targets, md_soft_targets, one_hot_targets

        # the teacher equals the student at the first step; its targets are constants
        y_m_v, y_m_t = md_pseudo_targets(scores(np.eye(4), np.eye(4)))
        targets = md_soft_targets(y_m_v, y_m_t, one_hot_targets(4), 0.4)
        numeric = finite_diff_gradient(lambda wv, wt: contrastive_loss(scores(wv, wt), targets), [np.eye(4), np.eye(4)])
        assert_allclose(np.eye(4) - trace.params["W_v"], numeric[0], atol=1e-8)
        assert_allclose(np.eye(4) - trace.params["W_t"], numeric[1], atol=1e-8)

    def test_deterministic(self):
        cfg = TrainConfig(steps=5, batch=4, md=DistillConfig(queue_len=4))
        a = train_toy(cfg, small_corpus())
        b = train_toy(cfg, small_corpus())
        assert a.to_jsonl() == b.to_jsonl()

    def test_minibatches_cycle(self):
        trace = train_toy(TrainConfig(steps=6, batch=2, lr=0.1), small_corpus())
        assert len(trace.records) == 6

    def test_md_zero_momentum_teacher_is_student(self):
        cfg = TrainConfig(steps=3, md=DistillConfig(ema_momentum=0.0, queue_len=4), record_params=True)
        trace = train_toy(cfg, small_corpus())
        last = trace.param_history[-1]
        for k in last:
            assert_allclose(trace.teacher_params[k], last[k], atol=1e-15)

    def test_md_changes_trace(self):
        plain = train_toy(TrainConfig(steps=4, lr=0.5), small_corpus())
        md = train_toy(TrainConfig(steps=4, lr=0.5, md=DistillConfig()), small_corpus())
        assert plain.losses != md.losses
        assert md.teacher_params is not None and plain.teacher_params is None

    def test_reports_held_out(self):
        trace = train_toy(TrainConfig(steps=2), small_corpus())
        assert trace.t2v.n_queries == 4 and trace.confuser_accuracy is not None
        final = trace.to_jsonl().strip().splitlines()[-1]
        assert final.startswith('{"final"')

    def test_no_held_out_skips_eval(self):
        trace = train_toy(TrainConfig(steps=2, train_fraction=1.0), small_corpus())
        assert trace.t2v is None and trace.final_record() == {}

    def test_rejects_padded_sets(self):
        corpus = small_corpus()
        v0 = corpus.visual[0]
        corpus.visual[0] = TokenSet(v0.tokens, v0.global_vector, mask=[True, False])
        with pytest.raises(ValueError):
            train_toy(TrainConfig(steps=1), corpus)

    def test_learning_helps(self):
        corpus = generate_corpus(CorpusSpec(n_pairs=32, seed=2))
        trace = train_toy(TrainConfig(steps=60, lr=0.01, param_mode="linear-projection"), corpus)
        assert trace.losses[-1] < trace.losses[0]
        assert trace.t2v.r_at[1] > 100.0 / 16


def test_unit_helpers_normalized():
    t = l2_normalize(TokenSet.from_tokens([[2.0, 0.0]]))
    assert t.tokens[0, 0] == 1.0
