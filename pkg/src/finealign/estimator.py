"""scikit-learn style wrapper around the toy trainer and the strategy scorer."""

from __future__ import annotations

from typing import Sequence

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .core import TokenSet, l2_normalize
from .errors import DimMismatch
from .harness import Corpus, DistillConfig, TrainConfig, _features, train_toy
from .metrics import DEFAULT_KS, RetrievalReport, retrieval_report
from .strategies import StrategyConfig, score_matrices
from .transport import TransportConfig


def check_token_sets(X, name: str = "X", dim: int | None = None) -> list[TokenSet]:
    """Coerce ``X`` into a list of TokenSets.

    Accepts a sequence of TokenSets, a sequence of ``(L, d)`` arrays, or one
    ``(N, L, d)`` array.  Arrays get globals derived by mean pooling.
    """
    if isinstance(X, TokenSet):
        raise TypeError(f"{name} must be a collection of token sets, not a single TokenSet")
    if isinstance(X, np.ndarray):
        if X.ndim != 3:
            raise ValueError(f"{name} array must be (N, L, d), got shape {X.shape}")
        X = list(X)
    out = []
    for k, item in enumerate(X):
        ts = item if isinstance(item, TokenSet) else TokenSet.from_tokens(np.asarray(item, dtype=np.float64))
        if not (np.all(np.isfinite(ts.tokens)) and np.all(np.isfinite(ts.global_vector))):
            raise ValueError(f"{name}[{k}] contains non-finite values")
        out.append(ts)
    if not out:
        raise ValueError(f"{name} is empty")
    dims = {ts.dim for ts in out}
    if len(dims) != 1:
        raise DimMismatch(f"{name} mixes embedding dims {sorted(dims)}")
    if dim is not None and dims != {dim}:
        raise DimMismatch(f"{name} has dim {dims.pop()}, expected {dim}")
    return out


def _compact(ts: TokenSet) -> TokenSet:
    return TokenSet(ts.valid_tokens, ts.global_vector)


def check_paired(X, y) -> tuple[list[TokenSet], list[TokenSet]]:
    visual = check_token_sets(X, "X")
    text = check_token_sets(y, "y")
    if len(visual) != len(text):
        raise ValueError(f"X and y must be paired, got {len(visual)} and {len(text)} items")
    if visual[0].dim != text[0].dim:
        raise DimMismatch(f"visual dim {visual[0].dim} differs from text dim {text[0].dim}")
    return visual, text


class FineGrainedRetriever(BaseEstimator):
    """Cross-modal retriever scoring token-level alignment.

    ``fit(X, y)`` learns one linear projection per modality by contrastive
    gradient descent on paired visual token sets ``X`` and text token sets
    ``y``; scoring uses the configured token-weighting strategy.  With
    ``steps=0`` the projections stay at identity and the estimator is a
    pure scorer.  Globals of transformed sets are always re-derived as the
    normalized mean of the projected tokens, matching training.

    Parameters mirror :class:`~finealign.strategies.StrategyConfig` and
    :class:`~finealign.harness.TrainConfig`.
    """

    def __init__(
        self,
        strategy="tokenflow",
        lam=4.0,
        global_blend_w=None,
        epsilon=0.05,
        steps=200,
        lr=0.01,
        batch_size=32,
        logit_scale=100.0,
        momentum_distill=False,
        ema_momentum=0.95,
        target_alpha=0.4,
        queue_len=16,
        random_state=0,
    ):
        self.strategy = strategy
        self.lam = lam
        self.global_blend_w = global_blend_w
        self.epsilon = epsilon
        self.steps = steps
        self.lr = lr
        self.batch_size = batch_size
        self.logit_scale = logit_scale
        self.momentum_distill = momentum_distill
        self.ema_momentum = ema_momentum
        self.target_alpha = target_alpha
        self.queue_len = queue_len
        self.random_state = random_state

    def _strategy_config(self, learnable_params=None) -> StrategyConfig:
        return StrategyConfig(
            kind=self.strategy,
            lam=self.lam,
            global_blend_w=self.global_blend_w,
            transport=TransportConfig(epsilon=self.epsilon),
            learnable_params=learnable_params,
        )

    def fit(self, X, y):
        visual, text = check_paired(X, y)
        d = visual[0].dim
        self.n_features_in_ = d
        self.projection_visual_ = np.eye(d)
        self.projection_text_ = np.eye(d)
        self.learnable_params_ = None
        self.trace_ = None
        if self.steps > 0:
            n = len(visual)
            corpus = Corpus(
                [_compact(l2_normalize(v)) for v in visual],
                [_compact(l2_normalize(t)) for t in text],
                np.arange(n),
            )
            md = DistillConfig(self.ema_momentum, self.target_alpha, self.queue_len) if self.momentum_distill else None
            cfg = TrainConfig(
                strategy=self._strategy_config(),
                steps=self.steps,
                lr=self.lr,
                batch=self.batch_size,
                md=md,
                param_mode="linear-projection",
                logit_scale=self.logit_scale,
                train_fraction=1.0,
                seed=self.random_state,
            )
            self.trace_ = train_toy(cfg, corpus)
            self.projection_visual_ = self.trace_.params["W_v"]
            self.projection_text_ = self.trace_.params["W_t"]
            self.learnable_params_ = self.trace_.params.get("logits")
        return self

    def _project(self, sets: Sequence[TokenSet], W: np.ndarray) -> list[TokenSet]:
        out = []
        for ts in sets:
            ts = l2_normalize(ts)
            _, _, mu, mg = _features(ts.valid_tokens[None], W)
            out.append(TokenSet(mu[0], mg[0]))
        return out

    def transform(self, X, modality: str = "visual") -> list[TokenSet]:
        """Project and normalize token sets of one modality."""
        check_is_fitted(self, "projection_visual_")
        sets = check_token_sets(X, "X", self.n_features_in_)
        if modality == "visual":
            return self._project(sets, self.projection_visual_)
        if modality == "text":
            return self._project(sets, self.projection_text_)
        raise ValueError("modality must be 'visual' or 'text'")

    def similarity(self, X, y, threads: int = 1):
        """Score matrices between visual ``X`` (rows) and text ``y`` (columns)."""
        vis = self.transform(X, "visual")
        txt = self.transform(y, "text")
        return score_matrices(vis, txt, self._strategy_config(self.learnable_params_), threads)

    def predict(self, X, y) -> np.ndarray:
        """Index into ``X`` of the best-matching visual item for every text in ``y``."""
        return np.argmax(self.similarity(X, y).s_t, axis=0)

    def retrieval_report(self, X, y, ks=DEFAULT_KS, direction: str = "t2v") -> RetrievalReport:
        sm = self.similarity(X, y)
        if direction == "t2v":
            return retrieval_report(sm.s_t.T, None, ks)
        if direction == "v2t":
            return retrieval_report(sm.s_v, None, ks)
        raise ValueError("direction must be 't2v' or 'v2t'")

    def score(self, X, y) -> float:
        """Text-to-visual R@1 (percent) with positional ground truth."""
        return self.retrieval_report(X, y, ks=(1,)).r_at[1]
