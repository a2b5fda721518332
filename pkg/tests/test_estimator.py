import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from finealign import FineGrainedRetriever
from finealign.core import TokenSet, l2_normalize
from finealign.errors import DimMismatch
from finealign.estimator import check_paired, check_token_sets
from finealign.harness import CorpusSpec, generate_corpus
from finealign.strategies import StrategyConfig, score_matrices


@pytest.fixture(scope="module")
def corpus():
    return generate_corpus(CorpusSpec(n_pairs=16, dim=16, concept_count=16, seed=5))


class TestValidation:
    def test_array_input(self, rng):
        sets = check_token_sets(rng.standard_normal((3, 2, 4)))
        assert len(sets) == 3 and sets[0].global_derived

    def test_list_of_arrays_ragged(self, rng):
        sets = check_token_sets([rng.standard_normal((2, 4)), rng.standard_normal((5, 4))])
        assert [s.L for s in sets] == [2, 5]

    def test_rejects(self, rng):
        with pytest.raises(ValueError):
            check_token_sets(rng.standard_normal((3, 4)))
        with pytest.raises(ValueError):
            check_token_sets([])
        with pytest.raises(TypeError):
            check_token_sets(TokenSet.from_tokens(np.ones((1, 2))))
        bad = rng.standard_normal((2, 2, 3))
        bad[1, 0, 0] = np.nan
        with pytest.raises(ValueError):
            check_token_sets(bad)

    def test_dims(self, rng):
        with pytest.raises(DimMismatch):
            check_token_sets([rng.standard_normal((2, 4)), rng.standard_normal((2, 5))])
        with pytest.raises(DimMismatch):
            check_token_sets(rng.standard_normal((2, 2, 4)), dim=3)
        with pytest.raises(DimMismatch):
            check_paired(rng.standard_normal((2, 2, 4)), rng.standard_normal((2, 2, 5)))
        with pytest.raises(ValueError):
            check_paired(rng.standard_normal((2, 2, 4)), rng.standard_normal((3, 2, 4)))


class TestEstimator:
    def test_params_and_clone(self):
        est = FineGrainedRetriever(strategy="scan", lam=2.0, steps=3)
        params = est.get_params()
        assert params["strategy"] == "scan" and params["lam"] == 2.0 and params["steps"] == 3
        twin = clone(est)
        assert twin.get_params() == params and twin is not est
        est.set_params(lam=5.0)
        assert est.lam == 5.0

    def test_not_fitted(self, corpus):
        with pytest.raises(NotFittedError):
            FineGrainedRetriever().transform(corpus.visual)

    def test_zero_steps_is_plain_scorer(self, corpus):
        est = FineGrainedRetriever(strategy="tokenflow", steps=0).fit(corpus.visual, corpus.text)
        sm = est.similarity(corpus.visual, corpus.text)
        ref = score_matrices(corpus.visual, corpus.text, StrategyConfig("tokenflow"))
        assert_allclose(sm.s_v, ref.s_v, atol=1e-12)
        assert_allclose(sm.s_t, ref.s_t, atol=1e-12)

    def test_predict_and_score(self, corpus):
        est = FineGrainedRetriever(strategy="max-avg", steps=0).fit(corpus.visual, corpus.text)
        pred = est.predict(corpus.visual, corpus.text)
        assert pred.shape == (16,)
        assert est.score(corpus.visual, corpus.text) == pytest.approx(100.0 * np.mean(pred == np.arange(16)))

    def test_report_directions(self, corpus):
        est = FineGrainedRetriever(steps=0).fit(corpus.visual, corpus.text)
        sm = est.similarity(corpus.visual, corpus.text)
        t2v = est.retrieval_report(corpus.visual, corpus.text, direction="t2v")
        v2t = est.retrieval_report(corpus.visual, corpus.text, direction="v2t")
        truth_t = np.array([np.sum(sm.s_t[:, j] > sm.s_t[j, j]) + 1 for j in range(16)])
        truth_v = np.array([np.sum(sm.s_v[i] > sm.s_v[i, i]) + 1 for i in range(16)])
        assert t2v.mnr == pytest.approx(truth_t.mean())
        assert v2t.mnr == pytest.approx(truth_v.mean())
        with pytest.raises(ValueError):
            est.retrieval_report(corpus.visual, corpus.text, direction="both")

    def test_fit_learns(self, corpus):
        est = FineGrainedRetriever(strategy="tokenflow", steps=40, lr=0.01, batch_size=16).fit(
            corpus.visual, corpus.text
        )
        assert est.trace_.losses[-1] < est.trace_.losses[0]
        assert not np.allclose(est.projection_visual_, np.eye(16))

    def test_fit_deterministic(self, corpus):
        a = FineGrainedRetriever(steps=3, momentum_distill=True, queue_len=4).fit(corpus.visual, corpus.text)
        b = FineGrainedRetriever(steps=3, momentum_distill=True, queue_len=4).fit(corpus.visual, corpus.text)
        assert_array_equal(a.projection_text_, b.projection_text_)

    def test_transform(self, corpus):
        est = FineGrainedRetriever(steps=0).fit(corpus.visual, corpus.text)
        out = est.transform(corpus.text[:2], modality="text")
        assert_allclose(out[0].tokens, l2_normalize(corpus.text[0]).tokens, atol=1e-15)
        with pytest.raises(ValueError):
            est.transform(corpus.text, modality="audio")
        with pytest.raises(DimMismatch):
            est.transform(np.ones((1, 2, 3)))

    def test_learnable_fit_keeps_logits(self, corpus):
        est = FineGrainedRetriever(strategy="learnable", steps=2).fit(corpus.visual, corpus.text)
        assert est.learnable_params_ is not None
        est.similarity(corpus.visual, corpus.text)
