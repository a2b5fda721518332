"""Token sets and the basic similarity / aggregation kernels.

Every kernel here expects unit-norm inputs and never normalizes implicitly;
call :func:`l2_normalize` first.  Padded (masked-out) rows are dropped by
compaction before any arithmetic, so ``l1`` and ``l2`` are always the
non-padded token counts.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import DimMismatch, EmptySequence, ZeroVector

NORM_FLOOR = 1e-12

VISUAL_TO_TEXT = "visual-to-text"
TEXT_TO_VISUAL = "text-to-visual"
DIRECTIONS = (VISUAL_TO_TEXT, TEXT_TO_VISUAL)


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=np.float64, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class TokenSet:
    """One modality instance: ``L`` token rows, a global vector and a validity mask.

    ``global_derived`` is set when the global vector was not supplied and was
    computed as the normalized mean of the unmasked tokens.
    """

    tokens: np.ndarray
    global_vector: np.ndarray
    mask: np.ndarray | None = None
    global_derived: bool = False

    def __post_init__(self):
        tokens = _frozen(self.tokens)
        if tokens.ndim != 2 or tokens.shape[0] < 1:
            raise ValueError(f"tokens must be a nonempty (L, d) matrix, got shape {tokens.shape}")
        g = _frozen(self.global_vector)
        if g.shape != (tokens.shape[1],):
            raise DimMismatch(f"global vector has shape {g.shape}, expected ({tokens.shape[1]},)")
        if self.mask is None:
            mask = np.ones(tokens.shape[0], dtype=bool)
        else:
            mask = np.array(self.mask, dtype=bool, copy=True)
        if mask.shape != (tokens.shape[0],):
            raise ValueError(f"mask has shape {mask.shape}, expected ({tokens.shape[0]},)")
        if not mask.any():
            raise ValueError("mask must mark at least one token as valid")
        mask.setflags(write=False)
        object.__setattr__(self, "tokens", tokens)
        object.__setattr__(self, "global_vector", g)
        object.__setattr__(self, "mask", mask)

    @classmethod
    def from_tokens(cls, tokens, mask=None, global_vector=None) -> "TokenSet":
        """Build a TokenSet, deriving the global as the normalized mean of valid rows if absent."""
        tokens = np.asarray(tokens, dtype=np.float64)
        if global_vector is not None:
            return cls(tokens, global_vector, mask)
        m = np.ones(len(tokens), dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
        pooled = mean_pool(tokens[m])
        norm = np.linalg.norm(pooled)
        if norm <= NORM_FLOOR:
            raise ZeroVector("mean of the valid tokens is the zero vector")
        return cls(tokens, pooled / norm, m, global_derived=True)

    @property
    def L(self) -> int:
        return self.tokens.shape[0]

    @property
    def l(self) -> int:
        return int(self.mask.sum())

    @property
    def dim(self) -> int:
        return self.tokens.shape[1]

    @property
    def valid_tokens(self) -> np.ndarray:
        """Compacted ``(l, d)`` matrix of unmasked rows."""
        return self.tokens[self.mask]


@dataclass(frozen=True, eq=False)
class SimilarityMatrix:
    c: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "c", _frozen(self.c))

    @property
    def l1(self) -> int:
        return self.c.shape[0]

    @property
    def l2(self) -> int:
        return self.c.shape[1]

    @property
    def shape(self):
        return self.c.shape

    def __array__(self, dtype=None, copy=None):
        return self.c if dtype is None else self.c.astype(dtype)


@dataclass(frozen=True, eq=False)
class MatchingFlow:
    """Per-token-pair contribution weights ``t`` (shape ``l1 x l2``).

    Entries are nonnegative for every strategy except tokenflow, whose rows
    (columns) carry the sign of the generating token weight.
    """

    t: np.ndarray
    direction: str = VISUAL_TO_TEXT
    strategy: str = ""

    def __post_init__(self):
        if self.direction not in DIRECTIONS:
            raise ValueError(f"unknown direction {self.direction!r}")
        object.__setattr__(self, "t", _frozen(self.t))

    @property
    def shape(self):
        return self.t.shape

    @property
    def total_mass(self) -> float:
        return float(self.t.sum())

    def row_mass(self) -> np.ndarray:
        return self.t.sum(axis=1)

    def col_mass(self) -> np.ndarray:
        return self.t.sum(axis=0)

    def __array__(self, dtype=None, copy=None):
        return self.t if dtype is None else self.t.astype(dtype)


@dataclass(frozen=True)
class PairScore:
    """Directional similarities of one (visual, text) pair.

    When a global blend weight ``w_g`` is active,
    ``s_v = w_g * s_global + (1 - w_g) * s_fine_v`` and likewise for ``s_t``.
    """

    s_v: float
    s_t: float
    s_global: float | None = None
    s_fine_v: float | None = None
    s_fine_t: float | None = None


@dataclass(frozen=True, eq=False)
class TokenWeights:
    """Importance of each token against the other modality's global vector."""

    d: np.ndarray
    e: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "d", _frozen(self.d))
        object.__setattr__(self, "e", _frozen(self.e))


def l2_normalize(ts: TokenSet) -> TokenSet:
    """Scale every unmasked token row and the global vector to unit norm.

    Masked rows are copied through untouched.

    >>> l2_normalize(TokenSet.from_tokens([[3.0, 4.0]])).tokens
    array([[0.6, 0.8]])
    """
    tokens = np.array(ts.tokens)
    rows = tokens[ts.mask]
    norms = np.linalg.norm(rows, axis=1)
    if np.any(norms <= NORM_FLOOR):
        bad = np.flatnonzero(ts.mask)[norms <= NORM_FLOOR]
        raise ZeroVector(f"token rows {bad.tolist()} have (near) zero norm")
    tokens[ts.mask] = rows / norms[:, None]
    gnorm = np.linalg.norm(ts.global_vector)
    if gnorm <= NORM_FLOOR:
        raise ZeroVector("global vector has (near) zero norm")
    return TokenSet(tokens, ts.global_vector / gnorm, ts.mask, ts.global_derived)


def _check_dims(mu: TokenSet, omega: TokenSet) -> None:
    if mu.dim != omega.dim:
        raise DimMismatch(f"embedding dims differ: {mu.dim} vs {omega.dim}")


def token_similarity_matrix(mu: TokenSet, omega: TokenSet) -> SimilarityMatrix:
    """``c[s, t] = <mu_s, omega_t>`` over the unmasked rows of both sets."""
    _check_dims(mu, omega)
    return SimilarityMatrix(mu.valid_tokens @ omega.valid_tokens.T)


def global_similarity(mu: TokenSet, omega: TokenSet) -> float:
    _check_dims(mu, omega)
    return float(mu.global_vector @ omega.global_vector)


def aggregate_similarity(c, t) -> float:
    """Weighted sum of token-pair similarities, ``sum_{s,t} c[s,t] * t[s,t]``."""
    c = np.asarray(c, dtype=np.float64)
    t = np.asarray(t, dtype=np.float64)
    if c.shape != t.shape:
        raise DimMismatch(f"similarity {c.shape} and flow {t.shape} differ in shape")
    return float(np.sum(c * t))


def token_weights(mu: TokenSet, omega: TokenSet) -> TokenWeights:
    """``d_s = <mu_s, global(omega)>`` and ``e_t = <global(mu), omega_t>``."""
    _check_dims(mu, omega)
    return TokenWeights(
        mu.valid_tokens @ omega.global_vector,
        omega.valid_tokens @ mu.global_vector,
    )


def mean_pool(frames: Sequence) -> np.ndarray:
    """Elementwise mean of a sequence of equal-length vectors (not re-normalized)."""
    arr = np.asarray(frames, dtype=np.float64)
    if arr.size == 0 or arr.shape[0] == 0:
        raise EmptySequence("cannot mean-pool an empty sequence")
    if arr.ndim != 2:
        raise DimMismatch(f"expected a sequence of vectors, got array of shape {arr.shape}")
    return arr.mean(axis=0)
