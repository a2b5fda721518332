"""Entropic optimal transport between weighted token sets.

The EMD strategy solves ``min_T sum (1 - c) * T`` subject to the token-weight
marginals.  :func:`sinkhorn` solves the entropic relaxation in the log
domain; :func:`exact_ot_small` enumerates the vertices of the transportation
polytope and is only meant as a test oracle on tiny instances.
"""

from __future__ import annotations

import itertools
import warnings
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from scipy.special import logsumexp

from .core import (
    TEXT_TO_VISUAL,
    VISUAL_TO_TEXT,
    MatchingFlow,
    TokenSet,
    TokenWeights,
    token_similarity_matrix,
    token_weights,
)
from .errors import NonBalancedMarginals, NotConvergedWarning, TooLarge

BALANCE_TOL = 1e-9
ORACLE_MAX_CELLS = 16


@dataclass(frozen=True)
class TransportConfig:
    epsilon: float = 0.05
    max_iters: int = 500
    tol: float = 1e-6
    floor: float = 1e-3
    # project the final Sinkhorn iterate onto the exact marginals
    round_feasible: bool = True

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ValueError("epsilon must be > 0")
        if not self.tol > 0:
            raise ValueError("tol must be > 0")
        if not self.floor > 0:
            raise ValueError("floor must be > 0")
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")


@dataclass(frozen=True, eq=False)
class TransportPlan:
    t: np.ndarray
    cost: float
    marginal_residual: float
    converged: bool = True
    n_iters: int = 0
    # marginal residual after every iteration, pre-rounding
    residual_history: list = field(default_factory=list, repr=False)


def prepare_marginals(w: TokenWeights, floor: float = 1e-3) -> tuple[np.ndarray, np.ndarray]:
    """Clamp token weights from below at ``floor`` and rescale each to sum to one."""
    d = np.maximum(np.asarray(w.d, dtype=np.float64), floor)
    e = np.maximum(np.asarray(w.e, dtype=np.float64), floor)
    return d / d.sum(), e / e.sum()


def _check_marginals(d: np.ndarray, e: np.ndarray, shape) -> None:
    if d.shape != (shape[0],) or e.shape != (shape[1],):
        raise NonBalancedMarginals(f"marginals {d.shape}, {e.shape} do not match cost {shape}")
    if np.any(d < 0) or np.any(e < 0):
        raise NonBalancedMarginals("marginals must be nonnegative")
    if abs(d.sum() - 1.0) > BALANCE_TOL or abs(e.sum() - 1.0) > BALANCE_TOL:
        raise NonBalancedMarginals(f"marginals must each sum to 1, got {d.sum()!r} and {e.sum()!r}")


def _residual(t: np.ndarray, d: np.ndarray, e: np.ndarray) -> float:
    return float(max(np.abs(t.sum(axis=1) - d).max(), np.abs(t.sum(axis=0) - e).max()))


def round_to_feasible(t: np.ndarray, d: np.ndarray, e: np.ndarray) -> np.ndarray:
    """Nonnegative plan with exactly the marginals ``d``, ``e``, close to ``t``.

    Shrinks overfull rows then columns, and spreads the remaining deficit as a
    rank-one correction (Altschuler, Weed & Rigollet, 2017).
    """
    rows = t.sum(axis=1)
    x = t * np.minimum(np.divide(d, rows, out=np.ones_like(d), where=rows > 0), 1.0)[:, None]
    cols = x.sum(axis=0)
    x = x * np.minimum(np.divide(e, cols, out=np.ones_like(e), where=cols > 0), 1.0)[None, :]
    err_r = d - x.sum(axis=1)
    err_c = e - x.sum(axis=0)
    total = err_r.sum()
    if total > 0:
        x = x + np.outer(err_r, err_c) / total
    return x


def sinkhorn(c, d, e, cfg: TransportConfig | None = None) -> TransportPlan:
    """Entropic OT plan for cost ``1 - c`` and marginals ``d`` (rows), ``e`` (columns).

    Log-domain updates keep small ``epsilon`` from underflowing.  If ``tol``
    is not reached within ``max_iters`` a :class:`NotConvergedWarning` is
    emitted and the last iterate is returned with ``converged=False``.
    """
    cfg = cfg or TransportConfig()
    c = np.asarray(c, dtype=np.float64)
    d = np.asarray(d, dtype=np.float64)
    e = np.asarray(e, dtype=np.float64)
    _check_marginals(d, e, c.shape)
    cost = 1.0 - c
    eps = cfg.epsilon
    with np.errstate(divide="ignore"):
        log_d, log_e = np.log(d), np.log(e)
    f = np.zeros_like(d)
    g = np.zeros_like(e)
    history = []
    converged = False
    n = 0
    for n in range(1, cfg.max_iters + 1):
        f = eps * (log_d - logsumexp((g[None, :] - cost) / eps, axis=1))
        g = eps * (log_e - logsumexp((f[:, None] - cost) / eps, axis=0))
        t = np.exp((f[:, None] + g[None, :] - cost) / eps)
        history.append(_residual(t, d, e))
        if history[-1] <= cfg.tol:
            converged = True
            break
    if not converged:
        warnings.warn(
            f"sinkhorn did not reach tol={cfg.tol} in {cfg.max_iters} iterations "
            f"(residual {history[-1]:.3g})",
            NotConvergedWarning,
            stacklevel=2,
        )
    if cfg.round_feasible:
        t = round_to_feasible(t, d, e)
    return TransportPlan(
        t=t,
        cost=float(np.sum(cost * t)),
        marginal_residual=_residual(t, d, e),
        converged=converged,
        n_iters=n,
        residual_history=history,
    )


def _is_spanning_tree(cells, l1: int, l2: int) -> bool:
    # union-find over l1 row nodes and l2 column nodes
    parent = list(range(l1 + l2))

    def find(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    for s, t in cells:
        ra, rb = find(s), find(l1 + t)
        if ra == rb:
            return False
        parent[ra] = rb
    return True


@lru_cache(maxsize=None)
def _vertex_maps(l1: int, l2: int) -> np.ndarray:
    """Linear maps for all spanning-tree bases of the ``l1 x l2`` transportation polytope.

    ``maps[k] @ concat(d, e)`` is the basic solution on tree ``k``, flattened
    and zero off the tree.
    """
    all_cells = [(s, t) for s in range(l1) for t in range(l2)]
    n_basis = l1 + l2 - 1
    incidence = np.zeros((l1 + l2, l1 * l2))
    for k, (s, t) in enumerate(all_cells):
        incidence[s, k] = 1.0
        incidence[l1 + t, k] = 1.0
    maps = []
    for combo in itertools.combinations(range(l1 * l2), n_basis):
        if not _is_spanning_tree([all_cells[k] for k in combo], l1, l2):
            continue
        sub = incidence[:, combo]
        full = np.zeros((l1 * l2, l1 + l2))
        full[list(combo), :] = np.linalg.pinv(sub)
        maps.append(full)
    return np.array(maps)


def exact_ot_small(cost, d, e) -> TransportPlan:
    """Exact minimum-cost plan by enumerating every basic feasible solution.

    An optimum of a linear program over the transportation polytope is
    attained at a vertex, and every vertex is the basic solution of some
    spanning tree of the bipartite row/column graph.
    """
    cost = np.asarray(cost, dtype=np.float64)
    d = np.asarray(d, dtype=np.float64)
    e = np.asarray(e, dtype=np.float64)
    l1, l2 = cost.shape
    if l1 * l2 > ORACLE_MAX_CELLS:
        raise TooLarge(f"exact oracle is limited to {ORACLE_MAX_CELLS} cells, got {l1}x{l2}")
    if d.shape != (l1,) or e.shape != (l2,) or abs(d.sum() - e.sum()) > BALANCE_TOL:
        raise NonBalancedMarginals("marginals must match the cost shape and carry equal mass")
    maps = _vertex_maps(l1, l2)
    plans = maps @ np.concatenate([d, e])
    feasible = np.all(plans >= -1e-12, axis=1)
    plans = np.clip(plans[feasible], 0.0, None)
    costs = plans @ cost.ravel()
    best = int(np.argmin(costs))
    t = plans[best].reshape(l1, l2)
    return TransportPlan(t=t, cost=float(costs[best]), marginal_residual=_residual(t, d, e))


def emd_flow(mu: TokenSet, omega: TokenSet, cfg: TransportConfig | None = None) -> tuple[MatchingFlow, MatchingFlow]:
    """Sinkhorn plan between two token sets, shared by both directions."""
    cfg = cfg or TransportConfig()
    c = token_similarity_matrix(mu, omega)
    d, e = prepare_marginals(token_weights(mu, omega), cfg.floor)
    plan = sinkhorn(c.c, d, e, cfg)
    return (
        MatchingFlow(plan.t, VISUAL_TO_TEXT, "emd"),
        MatchingFlow(plan.t, TEXT_TO_VISUAL, "emd"),
    )
