"""Synthetic corpora and a small gradient-descent trainer.

The collision corpus is built so that mean-pooled globals of different items
coincide: every item shares the same base concepts and differs only in the
signed "difference" concepts added to and subtracted from them, e.g.
``{u+v, u-v}`` against ``{u+w, u-w}``.  Global pooling cannot tell such
items apart, token-level alignment can.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .core import TokenSet
from .errors import DivergedLoss, SpecInfeasible
from .grad import BatchSimilarity, normalize_backward
from .loss import (
    DEFAULT_EMA_MOMENTUM,
    DEFAULT_LOGIT_SCALE,
    DEFAULT_QUEUE_LEN,
    DEFAULT_TARGET_ALPHA,
    BatchScores,
    TeacherState,
    contrastive_loss,
    contrastive_loss_grad,
    enqueue_features,
    md_pseudo_targets,
    md_soft_targets,
    md_update_teacher,
    one_hot_targets,
)
from .metrics import RetrievalReport, retrieval_report
from .strategies import StrategyConfig, score_matrices


@dataclass(frozen=True)
class CorpusSpec:
    n_pairs: int = 64
    tokens_per_item: int = 4
    dim: int = 32
    concept_count: int = 32
    noise_sigma: float = 0.05
    collision_mode: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.n_pairs < 1 or self.tokens_per_item < 1 or self.dim < 1 or self.concept_count < 1:
            raise SpecInfeasible("counts must be positive")
        if self.noise_sigma < 0:
            raise SpecInfeasible("noise_sigma must be >= 0")
        if self.concept_count > self.dim:
            raise SpecInfeasible(f"concept_count ({self.concept_count}) exceeds dim ({self.dim})")
        if self.collision_mode:
            if self.tokens_per_item % 2:
                raise SpecInfeasible("collision mode needs an even tokens_per_item")
            if self.concept_count < self.tokens_per_item:
                raise SpecInfeasible("collision mode needs concept_count >= tokens_per_item")


@dataclass(frozen=True, eq=False)
class Corpus:
    """Paired token sets; ``truth[j]`` is the visual index matching text ``j``."""

    visual: list
    text: list
    truth: np.ndarray
    spec: CorpusSpec | None = None
    basis: np.ndarray | None = field(default=None, repr=False)
    concepts: list = field(repr=False, default_factory=list)

    def __len__(self) -> int:
        return len(self.visual)

    @property
    def visual_tokens(self) -> np.ndarray:
        return np.stack([v.tokens for v in self.visual])

    @property
    def text_tokens(self) -> np.ndarray:
        return np.stack([t.tokens for t in self.text])

    def subset(self, idx) -> "Corpus":
        idx = list(idx)
        return Corpus(
            [self.visual[i] for i in idx],
            [self.text[i] for i in idx],
            np.arange(len(idx)),
            self.spec,
            self.basis,
            [self.concepts[i] for i in idx] if self.concepts else [],
        )


def _noisy_item(rng, clean: np.ndarray, sigma: float) -> TokenSet:
    tokens = clean + sigma * rng.standard_normal(clean.shape)
    tokens /= np.linalg.norm(tokens, axis=1, keepdims=True)
    return TokenSet.from_tokens(tokens)


def generate_corpus(spec: CorpusSpec) -> Corpus:
    """Draw an orthonormal concept basis and build paired visual/text token sets.

    Both modalities of a pair share a concept multiset; text tokens are
    shuffled and every token gets independent Gaussian noise before
    normalization.  Globals are the normalized means of the tokens.
    """
    rng = np.random.default_rng(spec.seed)
    q, _ = np.linalg.qr(rng.standard_normal((spec.dim, spec.dim)))
    basis = q.T[: spec.concept_count]
    k = spec.tokens_per_item
    visual, text, concepts = [], [], []
    for _ in range(spec.n_pairs):
        if spec.collision_mode:
            half = k // 2
            base = basis[:half]
            diff_ids = rng.choice(np.arange(half, spec.concept_count), size=half, replace=False)
            diff = basis[diff_ids]
            clean = np.concatenate([base + diff, base - diff]) / math.sqrt(2.0)
            concepts.append(tuple(int(i) for i in diff_ids))
        else:
            ids = rng.integers(0, spec.concept_count, size=k)
            clean = basis[ids]
            concepts.append(tuple(int(i) for i in ids))
        visual.append(_noisy_item(rng, clean, spec.noise_sigma))
        text.append(_noisy_item(rng, clean[rng.permutation(k)], spec.noise_sigma))
    return Corpus(visual, text, np.arange(spec.n_pairs), spec, basis, concepts)


@dataclass(frozen=True)
class DistillConfig:
    ema_momentum: float = DEFAULT_EMA_MOMENTUM
    target_alpha: float = DEFAULT_TARGET_ALPHA
    queue_len: int = DEFAULT_QUEUE_LEN


@dataclass(frozen=True)
class TrainConfig:
    """Toy-trainer knobs.

    ``batch`` larger than the training split means full-batch descent in a
    fixed order.  ``blend_mode="loss"`` adds the global similarity as its own
    contrastive term instead of blending it into the pair similarity.
    """

    strategy: StrategyConfig = field(default_factory=StrategyConfig)
    steps: int = 200
    lr: float = 0.05
    batch: int = 32
    md: DistillConfig | None = None
    param_mode: str = "embedding-direct"
    logit_scale: float = DEFAULT_LOGIT_SCALE
    blend_mode: str = "similarity"
    train_fraction: float = 0.5
    seed: int = 0
    eval_ks: tuple = (1, 5, 10)
    record_params: bool = False

    def __post_init__(self):
        if not self.lr >= 0:
            raise ValueError("lr must be >= 0")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.batch < 2:
            raise ValueError("batch must be >= 2")
        if self.param_mode not in ("embedding-direct", "linear-projection"):
            raise ValueError(f"unknown param_mode {self.param_mode!r}")
        if self.blend_mode not in ("similarity", "loss"):
            raise ValueError(f"unknown blend_mode {self.blend_mode!r}")
        if not 0.0 < self.train_fraction <= 1.0:
            raise ValueError("train_fraction must lie in (0, 1]")
        if self.strategy.kind == "emd":
            raise ValueError("emd has no analytic gradient and cannot be trained")


@dataclass(eq=False)
class TrainTrace:
    records: list = field(default_factory=list)
    t2v: RetrievalReport | None = None
    v2t: RetrievalReport | None = None
    confuser_accuracy: float | None = None
    params: dict = field(default_factory=dict, repr=False)
    teacher_params: dict | None = field(default=None, repr=False)
    param_history: list = field(default_factory=list, repr=False)

    @property
    def losses(self) -> list:
        return [r["loss"] for r in self.records]

    def final_record(self) -> dict:
        out = {}
        if self.t2v is not None:
            out["t2v"] = self.t2v.as_dict()
        if self.v2t is not None:
            out["v2t"] = self.v2t.as_dict()
        if self.confuser_accuracy is not None:
            out["confuser_accuracy"] = self.confuser_accuracy
        return out

    def to_jsonl(self) -> str:
        lines = [json.dumps(r) for r in self.records]
        lines.append(json.dumps({"final": self.final_record()}))
        return "\n".join(lines) + "\n"


def _features(raw, param):
    """Normalized tokens and globals from raw tokens ``(n, L, d0)``.

    ``param`` is a projection matrix or ``None`` (raw rows are the features).
    The global is the normalized mean of the projected, un-normalized rows.
    """
    z = raw if param is None else raw @ param.T
    g = z.mean(axis=1)
    mu = z / np.linalg.norm(z, axis=-1, keepdims=True)
    mg = g / np.linalg.norm(g, axis=-1, keepdims=True)
    return z, g, mu, mg


def _features_backward(z, g, d_mu, d_mg):
    return normalize_backward(z, d_mu) + normalize_backward(g, d_mg)[:, None, :] / z.shape[1]


class _Model:
    """Parameter bookkeeping for the two parameterizations."""

    def __init__(self, cfg: TrainConfig, train: Corpus):
        self.mode = cfg.param_mode
        self.xv = train.visual_tokens
        self.xt = train.text_tokens
        d = self.xv.shape[-1]
        if self.mode == "linear-projection":
            self.params = {"W_v": np.eye(d), "W_t": np.eye(d)}
        else:
            self.params = {"visual": self.xv.copy(), "text": self.xt.copy()}
        if cfg.strategy.kind == "learnable":
            logits = cfg.strategy.learnable_params
            if logits is None:
                logits = np.zeros((self.xv.shape[1], self.xt.shape[1]))
            self.params["logits"] = np.array(logits, dtype=np.float64)

    def features(self, params, idx):
        if self.mode == "linear-projection":
            v = _features(self.xv[idx], params["W_v"])
            t = _features(self.xt[idx], params["W_t"])
        else:
            v = _features(params["visual"][idx], None)
            t = _features(params["text"][idx], None)
        return v, t

    def grads(self, idx, v, t, dv, dt):
        zv, gv = v[0], v[1]
        zt, gt = t[0], t[1]
        dzv = _features_backward(zv, gv, *dv)
        dzt = _features_backward(zt, gt, *dt)
        out = {k: np.zeros_like(p) for k, p in self.params.items()}
        if self.mode == "linear-projection":
            out["W_v"] = np.einsum("nsd,nse->de", dzv, self.xv[idx])
            out["W_t"] = np.einsum("nsd,nse->de", dzt, self.xt[idx])
        else:
            np.add.at(out["visual"], idx, dzv)
            np.add.at(out["text"], idx, dzt)
        return out

    def eval_sets(self, params, held: Corpus):
        xv, xt = held.visual_tokens, held.text_tokens
        if self.mode == "linear-projection":
            _, _, mv, mgv = _features(xv, params["W_v"])
            _, _, mt, mgt = _features(xt, params["W_t"])
        else:
            _, _, mv, mgv = _features(xv, None)
            _, _, mt, mgt = _features(xt, None)
        return [TokenSet(a, b) for a, b in zip(mv, mgv)], [TokenSet(a, b) for a, b in zip(mt, mgt)]


def _strategy_with(cfg: StrategyConfig, params: dict, blend: float | None = None) -> StrategyConfig:
    kw = {}
    if "logits" in params:
        kw["learnable_params"] = params["logits"]
    if blend is not None:
        kw["global_blend_w"] = blend
    return replace(cfg, **kw) if kw else cfg


def _evaluate(model: _Model, params, held: Corpus, cfg: TrainConfig, trace: TrainTrace) -> None:
    strategy = _strategy_with(cfg.strategy, params)
    vis, txt = model.eval_sets(params, held)
    sm = score_matrices(vis, txt, strategy)
    n = len(held)
    ks = tuple(k for k in cfg.eval_ks if k <= n) or (1,)
    trace.t2v = retrieval_report(sm.s_t.T, held.truth, ks)
    trace.v2t = retrieval_report(sm.s_v, held.truth, ks)
    # confusers: item 2k against 2k + 1
    wins = []
    for a in range(0, n - 1, 2):
        b = a + 1
        wins.append(sm.s_t[a, a] > sm.s_t[b, a])
        wins.append(sm.s_t[b, b] > sm.s_t[a, b])
    trace.confuser_accuracy = 100.0 * float(np.mean(wins)) if wins else None


def train_toy(cfg: TrainConfig, corpus: Corpus) -> TrainTrace:
    """Plain gradient descent on the symmetric contrastive loss.

    The first ``train_fraction`` of the corpus is trained on, the rest is
    held out for the final retrieval report (skipped when nothing is held
    out).  With ``cfg.md`` set, an EMA
    teacher is updated from the student at the start of every step, supplies
    soft targets and pushes its batch features into the queues after it.
    """
    n = len(corpus)
    n_train = min(n, max(2, int(round(cfg.train_fraction * n))))
    if n_train < 2:
        raise ValueError("need at least two training pairs")
    if len({v.L for v in corpus.visual} | {t.L for t in corpus.text}) != 1 or not all(
        v.mask.all() and t.mask.all() for v, t in zip(corpus.visual, corpus.text)
    ):
        raise ValueError("the trainer needs unpadded token sets of one common length")
    train = corpus.subset(range(n_train))
    held = corpus.subset(range(n_train, n))
    model = _Model(cfg, train)
    params = model.params
    rng = np.random.default_rng(cfg.seed)
    batch = min(cfg.batch, n_train)
    order = np.arange(n_train)
    cursor = n_train

    md = cfg.md
    teacher = TeacherState.from_student(params, md.ema_momentum, md.queue_len) if md else None
    fine_cfg = _strategy_with(cfg.strategy, params, 0.0 if cfg.blend_mode == "loss" else None)
    w_g = cfg.strategy.blend
    trace = TrainTrace()

    for step in range(cfg.steps):
        if batch < n_train:
            if cursor + batch > n_train:
                order = rng.permutation(n_train)
                cursor = 0
            idx = order[cursor : cursor + batch]
            cursor += batch
        else:
            idx = order
        strategy = _strategy_with(fine_cfg, params)
        v, t = model.features(params, idx)
        mu, mg, om, og = v[2], v[3], t[2], t[3]

        if md:
            teacher = md_update_teacher(teacher, params)
            if cfg.record_params:
                trace.param_history.append({k: p.copy() for k, p in params.items()})
            tv, tt = model.features(teacher.params, idx)
            q_om = np.array(teacher.queue("fine_text")).reshape((-1,) + om.shape[1:])
            q_og = np.array(teacher.queue("global_text")).reshape(-1, og.shape[1])
            q_mu = np.array(teacher.queue("fine_visual")).reshape((-1,) + mu.shape[1:])
            q_mg = np.array(teacher.queue("global_visual")).reshape(-1, mg.shape[1])
            t_strategy = _strategy_with(fine_cfg, teacher.params)
            t_bv = BatchSimilarity(tv[2], np.concatenate([tt[2], q_om]), tv[3], np.concatenate([tt[3], q_og]), t_strategy)
            t_bt = BatchSimilarity(np.concatenate([tv[2], q_mu]), tt[2], np.concatenate([tv[3], q_mg]), tt[3], t_strategy)
            y_m_v, y_m_t = md_pseudo_targets(BatchScores(t_bv.s_v, t_bt.s_t, cfg.logit_scale))
            targets = md_soft_targets(y_m_v, y_m_t, one_hot_targets(len(idx), len(q_om), len(q_mu)), md.target_alpha)
            bv = BatchSimilarity(mu, np.concatenate([om, q_om]), mg, np.concatenate([og, q_og]), strategy)
            bt = BatchSimilarity(np.concatenate([mu, q_mu]), om, np.concatenate([mg, q_mg]), og, strategy)
        else:
            targets = None
            bv = bt = BatchSimilarity(mu, om, mg, og, strategy)

        scores = BatchScores(bv.s_v, bt.s_t, cfg.logit_scale)
        loss = contrastive_loss(scores, targets)
        g_v, g_t = contrastive_loss_grad(scores, targets)
        if cfg.blend_mode == "loss":
            coarse = BatchScores(bv.s_global, bt.s_global, cfg.logit_scale)
            loss = (1.0 - w_g) * loss + w_g * contrastive_loss(coarse, targets)
            c_v, c_t = contrastive_loss_grad(coarse, targets)
            c_v, c_t = w_g * c_v, w_g * c_t
            g_v, g_t = (1.0 - w_g) * g_v, (1.0 - w_g) * g_t
        else:
            c_v = c_t = None
        if not math.isfinite(loss):
            raise DivergedLoss(f"loss became {loss} at step {step}")
        trace.records.append({"step": step, "loss": loss})

        nb = len(idx)
        if bv is bt:
            w_global = None if c_v is None else c_v + c_t
            parts = [bv.backward(w_v=g_v, w_t=g_t, w_global=w_global)]
        else:
            parts = [bv.backward(w_v=g_v, w_global=c_v), bt.backward(w_t=g_t, w_global=c_t)]
        d_mu = sum(p[0][:nb] for p in parts)
        d_om = sum(p[1][:nb] for p in parts)
        d_mg = sum(p[2][:nb] for p in parts)
        d_og = sum(p[3][:nb] for p in parts)
        grads = model.grads(idx, v, t, (d_mu, d_mg), (d_om, d_og))
        if "logits" in params:
            grads["logits"] = sum(p[4] for p in parts)
        params = {k: p - cfg.lr * grads[k] for k, p in params.items()}

        if md:
            teacher = enqueue_features(teacher, tv[3], tv[2], tt[3], tt[2])

    trace.params = params
    if md:
        trace.teacher_params = teacher.params
    if len(held):
        _evaluate(model, params, held, cfg, trace)
    return trace
