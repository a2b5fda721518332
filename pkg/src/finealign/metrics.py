"""Retrieval metrics: recall at K, median rank and mean rank."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import IndexOutOfRange

DEFAULT_KS = (1, 5, 10)


@dataclass(frozen=True)
class RetrievalReport:
    r_at: dict
    mdr: float
    mnr: float
    n_queries: int

    def __str__(self) -> str:
        return self.serialize()

    def serialize(self) -> str:
        """Flat ``key=value`` form, e.g. ``R@1=45.1 R@5=72.3 R@10=81.5 MdR=2.0 MnR=14.8``."""
        parts = [f"R@{k}={v:.1f}" for k, v in sorted(self.r_at.items())]
        parts += [f"MdR={self.mdr:.1f}", f"MnR={self.mnr:.1f}"]
        return " ".join(parts)

    def as_dict(self) -> dict:
        out = {f"R@{k}": v for k, v in sorted(self.r_at.items())}
        out.update(MdR=self.mdr, MnR=self.mnr, n_queries=self.n_queries)
        return out


def rank_of_truth(scores, truth) -> np.ndarray:
    """1-based rank of each query's true gallery item.

    The rank counts gallery items scoring strictly higher, so the true item
    wins every tie.
    """
    scores = np.asarray(scores, dtype=np.float64)
    truth = np.asarray(truth)
    if scores.ndim != 2:
        raise ValueError(f"scores must be a (Nq, Ng) matrix, got shape {scores.shape}")
    nq, ng = scores.shape
    if truth.shape != (nq,):
        raise ValueError(f"truth must have one entry per query ({nq}), got shape {truth.shape}")
    if not np.issubdtype(truth.dtype, np.integer) or np.any(truth < 0) or np.any(truth >= ng):
        raise IndexOutOfRange(f"truth indices must be integers in [0, {ng})")
    true_scores = scores[np.arange(nq), truth]
    return 1 + np.sum(scores > true_scores[:, None], axis=1)


def retrieval_report(scores, truth=None, ks=DEFAULT_KS) -> RetrievalReport:
    """R@K (percent), median rank and mean rank.  ``truth`` defaults to the diagonal."""
    ks = sorted(set(int(k) for k in ks))
    if not ks:
        raise ValueError("ks must be nonempty")
    if any(k < 1 for k in ks):
        raise ValueError("every K must be >= 1")
    scores = np.asarray(scores, dtype=np.float64)
    if truth is None:
        truth = np.arange(scores.shape[0])
    ranks = rank_of_truth(scores, truth)
    nq = len(ranks)
    r_at = {k: 100.0 * np.count_nonzero(ranks <= k) / nq for k in ks}
    return RetrievalReport(r_at=r_at, mdr=float(np.median(ranks)), mnr=float(ranks.mean()), n_queries=nq)
