"""Token-pair weighting strategies and the pair-similarity façade.

Each strategy builds a matching flow ``T`` for the visual-to-text and
text-to-visual directions; the fine similarity is ``sum(c * T)``.  The
stable string identifiers used by the CLI and config files are listed in
:data:`STRATEGY_NAMES`.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np
from scipy.special import softmax

from .core import (
    TEXT_TO_VISUAL,
    VISUAL_TO_TEXT,
    MatchingFlow,
    PairScore,
    SimilarityMatrix,
    TokenSet,
    TokenWeights,
    aggregate_similarity,
    global_similarity,
    token_similarity_matrix,
    token_weights,
)
from .errors import CropTooSmall, DimMismatch
from .transport import TransportConfig, emd_flow

STRATEGY_NAMES = ("uniform", "learnable", "scan", "max-avg", "max-sum", "emd", "tokenflow")
KINDS = ("uniform", "learnable", "scan", "max_avg", "max_sum", "emd", "tokenflow")

DEFAULT_LAMBDA = 4.0
# strategies that consult the global vectors by default
_BLENDED_BY_DEFAULT = {"tokenflow": 0.5, "emd": 0.5}


def canonical_kind(name: str) -> str:
    kind = name.strip().lower().replace("-", "_")
    if kind not in KINDS:
        raise ValueError(f"unknown strategy {name!r}; expected one of {', '.join(STRATEGY_NAMES)}")
    return kind


@dataclass(frozen=True)
class StrategyConfig:
    """How to weight token pairs.

    ``global_blend_w=None`` resolves to 0.5 for tokenflow and emd and to 0
    for the others.  ``learnable_params`` is an ``(Lmax, Lmax)`` logit matrix;
    when absent the learnable strategy starts from all-zero logits.
    """

    kind: str = "tokenflow"
    lam: float = DEFAULT_LAMBDA
    global_blend_w: float | None = None
    transport: TransportConfig = field(default_factory=TransportConfig)
    learnable_params: np.ndarray | None = field(default=None, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "kind", canonical_kind(self.kind))
        if not self.lam > 0:
            raise ValueError(f"lambda must be > 0, got {self.lam}")
        if self.global_blend_w is not None and not 0.0 <= self.global_blend_w <= 1.0:
            raise ValueError(f"global_blend_w must lie in [0, 1], got {self.global_blend_w}")

    @property
    def blend(self) -> float:
        if self.global_blend_w is not None:
            return float(self.global_blend_w)
        return _BLENDED_BY_DEFAULT.get(self.kind, 0.0)

    @property
    def name(self) -> str:
        return self.kind.replace("_", "-")


def _direction_ok(direction: str) -> None:
    if direction not in (VISUAL_TO_TEXT, TEXT_TO_VISUAL):
        raise ValueError(f"unknown direction {direction!r}")


def uniform_flow(l1: int, l2: int, direction: str = VISUAL_TO_TEXT) -> MatchingFlow:
    if l1 < 1 or l2 < 1:
        raise ValueError("token counts must be >= 1")
    return MatchingFlow(np.full((l1, l2), 1.0 / (l1 * l2)), direction, "uniform")


def max_flow(c, variant: str = "avg", direction: str = VISUAL_TO_TEXT) -> MatchingFlow:
    """Keep only the best-matching partner of each token (lowest index on ties).

    Visual-to-text picks one column per row with weight 1 (sum) or 1/l1 (avg);
    text-to-visual picks one row per column with weight 1 or 1/l2.
    """
    _direction_ok(direction)
    if variant not in ("avg", "sum"):
        raise ValueError(f"variant must be 'avg' or 'sum', got {variant!r}")
    c = np.asarray(c, dtype=np.float64)
    l1, l2 = c.shape
    t = np.zeros_like(c)
    if direction == VISUAL_TO_TEXT:
        t[np.arange(l1), np.argmax(c, axis=1)] = 1.0 if variant == "sum" else 1.0 / l1
    else:
        t[np.argmax(c, axis=0), np.arange(l2)] = 1.0 if variant == "sum" else 1.0 / l2
    return MatchingFlow(t, direction, f"max_{variant}")


def scan_flow(c, lam: float = DEFAULT_LAMBDA, direction: str = VISUAL_TO_TEXT) -> MatchingFlow:
    """Softmax attention weights over the other modality, scaled by ``1/l1`` (or ``1/l2``)."""
    _direction_ok(direction)
    c = np.asarray(c, dtype=np.float64)
    l1, l2 = c.shape
    if direction == VISUAL_TO_TEXT:
        t = softmax(lam * c, axis=1) / l1
    else:
        t = softmax(lam * c, axis=0) / l2
    return MatchingFlow(t, direction, "scan")


def scan_attended_similarity(mu: TokenSet, omega: TokenSet, lam: float = DEFAULT_LAMBDA) -> float:
    """SCAN similarity computed through attended text vectors.

    For every visual token, attends over the text tokens, forms the attended
    vector ``a_s = sum_t beta_st * omega_t`` and averages ``<mu_s, a_s>``.
    """
    if mu.dim != omega.dim:
        raise DimMismatch(f"embedding dims differ: {mu.dim} vs {omega.dim}")
    m, w = mu.valid_tokens, omega.valid_tokens
    total = 0.0
    for mu_s in m:
        logits = lam * (w @ mu_s)
        beta = np.exp(logits - logits.max())
        beta /= beta.sum()
        attended = beta @ w
        total += float(mu_s @ attended)
    return total / len(m)


def learnable_flow(params, l1: int, l2: int, direction: str = VISUAL_TO_TEXT) -> MatchingFlow:
    """Crop a logit matrix to ``l1 x l2`` and softmax over all of its entries."""
    params = np.asarray(params, dtype=np.float64)
    if params.ndim != 2 or params.shape[0] < l1 or params.shape[1] < l2:
        raise CropTooSmall(f"params of shape {params.shape} cannot be cropped to ({l1}, {l2})")
    crop = params[:l1, :l2]
    return MatchingFlow(softmax(crop, axis=None), direction, "learnable")


def tokenflow_flow(c, w: TokenWeights, lam: float = DEFAULT_LAMBDA, direction: str = VISUAL_TO_TEXT) -> MatchingFlow:
    """Token-weight-modulated softmax flow.

    Visual-to-text row ``s`` is ``d_s / l1`` times a softmax over ``t`` of
    ``lam * e_t * c[s, t]``; text-to-visual is the column-wise analogue with
    ``e_t / l2`` and ``lam * d_s * c[s, t]``.  Negative weights are kept.
    """
    _direction_ok(direction)
    if lam < 0:
        raise ValueError("lambda must be >= 0")
    c = np.asarray(c, dtype=np.float64)
    d, e = np.asarray(w.d), np.asarray(w.e)
    l1, l2 = c.shape
    if d.shape != (l1,) or e.shape != (l2,):
        raise DimMismatch(f"token weights {d.shape}, {e.shape} do not match similarity {c.shape}")
    if direction == VISUAL_TO_TEXT:
        t = d[:, None] * softmax(lam * e[None, :] * c, axis=1) / l1
    else:
        t = e[None, :] * softmax(lam * d[:, None] * c, axis=0) / l2
    return MatchingFlow(t, direction, "tokenflow")


class PairFlows(NamedTuple):
    c: SimilarityMatrix
    weights: TokenWeights
    flow_v: MatchingFlow
    flow_t: MatchingFlow


def pair_flows(mu: TokenSet, omega: TokenSet, cfg: StrategyConfig) -> PairFlows:
    """Similarity matrix, token weights and both directional flows for one pair."""
    c = token_similarity_matrix(mu, omega)
    w = token_weights(mu, omega)
    kind = cfg.kind
    if kind == "uniform":
        fv = uniform_flow(c.l1, c.l2, VISUAL_TO_TEXT)
        ft = uniform_flow(c.l1, c.l2, TEXT_TO_VISUAL)
    elif kind == "learnable":
        params = cfg.learnable_params
        if params is None:
            params = np.zeros((c.l1, c.l2))
        fv = learnable_flow(params, c.l1, c.l2, VISUAL_TO_TEXT)
        ft = learnable_flow(params, c.l1, c.l2, TEXT_TO_VISUAL)
    elif kind == "scan":
        fv = scan_flow(c.c, cfg.lam, VISUAL_TO_TEXT)
        ft = scan_flow(c.c, cfg.lam, TEXT_TO_VISUAL)
    elif kind in ("max_avg", "max_sum"):
        variant = kind[4:]
        fv = max_flow(c.c, variant, VISUAL_TO_TEXT)
        ft = max_flow(c.c, variant, TEXT_TO_VISUAL)
    elif kind == "emd":
        fv, ft = emd_flow(mu, omega, cfg.transport)
    else:
        fv = tokenflow_flow(c.c, w, cfg.lam, VISUAL_TO_TEXT)
        ft = tokenflow_flow(c.c, w, cfg.lam, TEXT_TO_VISUAL)
    return PairFlows(c, w, fv, ft)


def pair_similarity(mu: TokenSet, omega: TokenSet, cfg: StrategyConfig | None = None) -> PairScore:
    """Directional similarities of a normalized (visual, text) pair under ``cfg``."""
    cfg = cfg or StrategyConfig()
    wg = cfg.blend
    s_global = global_similarity(mu, omega)
    if wg == 1.0:
        # fine part carries zero weight; skip the (possibly costly) flow
        return PairScore(s_global, s_global, s_global, None, None)
    flows = pair_flows(mu, omega, cfg)
    fine_v = aggregate_similarity(flows.c.c, flows.flow_v.t)
    fine_t = aggregate_similarity(flows.c.c, flows.flow_t.t)
    return PairScore(
        s_v=wg * s_global + (1.0 - wg) * fine_v,
        s_t=wg * s_global + (1.0 - wg) * fine_t,
        s_global=s_global,
        s_fine_v=fine_v,
        s_fine_t=fine_t,
    )


class ScoreMatrices(NamedTuple):
    """``(N_v, N_t)`` matrices; entry ``[i, j]`` pairs visual ``i`` with text ``j``."""

    s_v: np.ndarray
    s_t: np.ndarray
    s_global: np.ndarray
    s_fine_v: np.ndarray
    s_fine_t: np.ndarray


def score_matrices(
    visual: Sequence[TokenSet],
    text: Sequence[TokenSet],
    cfg: StrategyConfig | None = None,
    threads: int = 1,
) -> ScoreMatrices:
    """All pairwise scores between two collections.

    Rows are farmed out to ``threads`` workers; each writes into its own
    pre-allocated slot so the result does not depend on scheduling.
    """
    cfg = cfg or StrategyConfig()
    nv, nt = len(visual), len(text)
    out = np.full((5, nv, nt), np.nan)

    def fill_row(i: int) -> None:
        for j in range(nt):
            p = pair_similarity(visual[i], text[j], cfg)
            out[0, i, j] = p.s_v
            out[1, i, j] = p.s_t
            out[2, i, j] = p.s_global
            if p.s_fine_v is not None:
                out[3, i, j] = p.s_fine_v
                out[4, i, j] = p.s_fine_t

    if threads <= 1:
        for i in range(nv):
            fill_row(i)
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            list(pool.map(fill_row, range(nv)))
    return ScoreMatrices(*out)
