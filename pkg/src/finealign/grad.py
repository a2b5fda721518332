"""Analytic gradients of pair similarities, plus a central-difference oracle.

Gradients are taken with respect to the *normalized* token rows and global
vectors, which are treated as independent inputs.  The normalization
Jacobian is a separate stage (:func:`normalize_backward`).

The kernels are batched: visual tokens ``(N, l1, d)`` against text tokens
``(M, l2, d)`` give ``(N, M)`` similarity matrices, and
:meth:`BatchSimilarity.backward` contracts upstream weights on those
matrices into embedding gradients.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy.special import softmax

from .core import TokenSet
from .errors import NonFinite
from .strategies import StrategyConfig

SMOOTH_KINDS = ("uniform", "learnable", "scan", "tokenflow")
DIFFERENTIABLE_KINDS = SMOOTH_KINDS + ("max_avg", "max_sum")


@dataclass(frozen=True, eq=False)
class PairGradient:
    """Gradient of one directional similarity of a pair."""

    value: float
    d_mu: np.ndarray
    d_omega: np.ndarray
    d_mu_global: np.ndarray
    d_omega_global: np.ndarray
    wrt: str = "s_v"
    blended: bool = False
    d_params: np.ndarray | None = None


def _fine_adjoints(kind, c, d, e, lam, logits):
    """Visual-to-text fine similarity and its partials w.r.t. ``c``, ``d`` and ``e``.

    ``c`` is ``(..., l1, l2)``; returns ``(s, dS/dc, dS/dd, dS/de, dS/dlogits)``
    where the last is ``None`` unless the strategy is learnable.
    """
    l1, l2 = c.shape[-2:]
    zeros_d = np.zeros(c.shape[:-1])
    zeros_e = np.zeros(c.shape[:-2] + (l2,))
    if kind == "uniform":
        g = np.full(c.shape, 1.0 / (l1 * l2))
        return c.mean(axis=(-2, -1)), g, zeros_d, zeros_e, None
    if kind == "learnable":
        t = softmax(logits[:l1, :l2], axis=None)
        s = np.sum(c * t, axis=(-2, -1))
        g = np.broadcast_to(t, c.shape)
        g_logits = t * (c - s[..., None, None])
        return s, g, zeros_d, zeros_e, g_logits
    if kind in ("max_avg", "max_sum"):
        # argmax is held fixed: locally constant away from ties
        t = np.zeros(c.shape)
        np.put_along_axis(t, np.argmax(c, axis=-1)[..., None], 1.0 if kind == "max_sum" else 1.0 / l1, axis=-1)
        return np.sum(c * t, axis=(-2, -1)), t, zeros_d, zeros_e, None
    if kind == "scan":
        p = softmax(lam * c, axis=-1)
        m = np.sum(p * c, axis=-1)
        g = p * (1.0 + lam * (c - m[..., None])) / l1
        return m.mean(axis=-1), g, zeros_d, zeros_e, None
    if kind == "tokenflow":
        p = softmax(lam * e[..., None, :] * c, axis=-1)
        m = np.sum(p * c, axis=-1)
        dev = p * (c - m[..., None])
        g = (d / l1)[..., None] * (p + lam * e[..., None, :] * dev)
        g_e = lam * np.sum((d / l1)[..., None] * dev * c, axis=-2)
        g_d = m / l1
        return np.sum(d * m, axis=-1) / l1, g, g_d, g_e, None
    raise ValueError(f"no analytic gradient for strategy {kind!r}")


class BatchSimilarity:
    """Both directional similarity matrices for every (visual, text) pair of two stacks."""

    def __init__(self, mu, omega, mu_global, omega_global, cfg: StrategyConfig):
        if cfg.kind not in DIFFERENTIABLE_KINDS:
            raise ValueError(f"no analytic gradient for strategy {cfg.kind!r}")
        self.mu = np.asarray(mu, dtype=np.float64)
        self.omega = np.asarray(omega, dtype=np.float64)
        self.mu_global = np.asarray(mu_global, dtype=np.float64)
        self.omega_global = np.asarray(omega_global, dtype=np.float64)
        self.cfg = cfg
        self.w = cfg.blend
        kind, lam = cfg.kind, cfg.lam
        logits = cfg.learnable_params
        if kind == "learnable" and logits is None:
            logits = np.zeros(self.mu.shape[1:2] + self.omega.shape[1:2])
        self.logits = logits

        c = np.einsum("nsd,mtd->nmst", self.mu, self.omega)
        d = np.einsum("nsd,md->nms", self.mu, self.omega_global)
        e = np.einsum("mtd,nd->nmt", self.omega, self.mu_global)
        self.c = c
        self.s_global = self.mu_global @ self.omega_global.T

        fv, gv, gdv, gev, glv = _fine_adjoints(kind, c, d, e, lam, logits)
        if kind in ("uniform", "learnable"):
            ft, gt, gdt, get, glt = fv, gv, gdv, gev, glv
        else:
            # text-to-visual is visual-to-text with the modalities swapped
            ft, gt_sw, get, gdt, glt = _fine_adjoints(kind, c.swapaxes(-1, -2), e, d, lam, logits)
            gt = gt_sw.swapaxes(-1, -2)
        self.s_fine_v, self.s_fine_t = fv, ft
        self._adj = ((gv, gdv, gev, glv), (gt, gdt, get, glt))
        w = self.w
        self.s_v = w * self.s_global + (1.0 - w) * fv
        self.s_t = w * self.s_global + (1.0 - w) * ft

    def backward(self, w_v=None, w_t=None, w_global=None):
        """Gradient of ``sum(w_v * s_v) + sum(w_t * s_t) + sum(w_global * s_global)``.

        Returns ``(d_mu, d_omega, d_mu_global, d_omega_global, d_logits)``.
        """
        shape = self.s_global.shape
        w_v = np.zeros(shape) if w_v is None else np.broadcast_to(np.asarray(w_v, dtype=np.float64), shape)
        w_t = np.zeros(shape) if w_t is None else np.broadcast_to(np.asarray(w_t, dtype=np.float64), shape)
        fine_v = (1.0 - self.w) * w_v
        fine_t = (1.0 - self.w) * w_t
        (gv, gdv, gev, glv), (gt, gdt, get, glt) = self._adj
        g_c = fine_v[..., None, None] * gv + fine_t[..., None, None] * gt
        g_d = fine_v[..., None] * gdv + fine_t[..., None] * gdt
        g_e = fine_v[..., None] * gev + fine_t[..., None] * get
        coarse = self.w * (w_v + w_t)
        if w_global is not None:
            coarse = coarse + np.broadcast_to(np.asarray(w_global, dtype=np.float64), shape)

        d_mu = np.einsum("nmst,mtd->nsd", g_c, self.omega) + np.einsum("nms,md->nsd", g_d, self.omega_global)
        d_omega = np.einsum("nmst,nsd->mtd", g_c, self.mu) + np.einsum("nmt,nd->mtd", g_e, self.mu_global)
        d_mu_global = np.einsum("nmt,mtd->nd", g_e, self.omega) + coarse @ self.omega_global
        d_omega_global = np.einsum("nms,nsd->md", g_d, self.mu) + coarse.T @ self.mu_global
        d_logits = None
        if glv is not None:
            g = np.einsum("nm,nmst->st", fine_v + fine_t, glv)
            d_logits = np.zeros_like(self.logits)
            d_logits[: g.shape[0], : g.shape[1]] = g
        return d_mu, d_omega, d_mu_global, d_omega_global, d_logits


def pair_gradient(mu: TokenSet, omega: TokenSet, cfg: StrategyConfig, wrt: str = "s_v") -> PairGradient:
    """Gradient of the (blended) ``s_v`` or ``s_t`` of one pair w.r.t. its valid tokens and globals."""
    if wrt not in ("s_v", "s_t"):
        raise ValueError("wrt must be 's_v' or 's_t'")
    bs = BatchSimilarity(
        mu.valid_tokens[None], omega.valid_tokens[None], mu.global_vector[None], omega.global_vector[None], cfg
    )
    one = np.ones((1, 1))
    dm, do, dmg, dog, dl = bs.backward(w_v=one if wrt == "s_v" else None, w_t=one if wrt == "s_t" else None)
    value = bs.s_v if wrt == "s_v" else bs.s_t
    return PairGradient(float(value[0, 0]), dm[0], do[0], dmg[0], dog[0], wrt, cfg.blend > 0, dl)


def tokenflow_gradient(mu, omega, cfg, wrt="s_v") -> PairGradient:
    if cfg.kind != "tokenflow":
        raise ValueError("tokenflow_gradient requires a tokenflow config")
    return pair_gradient(mu, omega, cfg, wrt)


def uniform_gradient(mu, omega, cfg, wrt="s_v") -> PairGradient:
    if cfg.kind != "uniform":
        raise ValueError("uniform_gradient requires a uniform config")
    return pair_gradient(mu, omega, cfg, wrt)


def scan_gradient(mu, omega, cfg, wrt="s_v") -> PairGradient:
    if cfg.kind != "scan":
        raise ValueError("scan_gradient requires a scan config")
    return pair_gradient(mu, omega, cfg, wrt)


def max_gradient(mu, omega, cfg, wrt="s_v") -> PairGradient:
    """Subgradient of max-avg / max-sum with the argmax held fixed."""
    if cfg.kind not in ("max_avg", "max_sum"):
        raise ValueError("max_gradient requires a max-avg or max-sum config")
    return pair_gradient(mu, omega, cfg, wrt)


def normalize_backward(x: np.ndarray, grad_unit: np.ndarray) -> np.ndarray:
    """Pull a gradient on ``x / |x|`` back to ``x``: ``(I - u u^T) g / |x|`` row-wise."""
    x = np.asarray(x, dtype=np.float64)
    norm = np.linalg.norm(x, axis=-1, keepdims=True)
    u = x / norm
    g = np.asarray(grad_unit, dtype=np.float64)
    return (g - u * np.sum(u * g, axis=-1, keepdims=True)) / norm


def finite_diff_gradient(f: Callable[..., float], point: Sequence[np.ndarray], h: float = 1e-5) -> list[np.ndarray]:
    """Central differences ``(f(x + h e_i) - f(x - h e_i)) / 2h`` for every coordinate.

    ``point`` is a sequence of arrays passed to ``f`` positionally; the result
    mirrors its structure.
    """
    if not h > 0:
        raise ValueError("h must be > 0")
    args = [np.array(p, dtype=np.float64) for p in point]
    grads = []
    for a in args:
        g = np.zeros_like(a)
        flat = a.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = f(*args)
            flat[i] = orig - h
            fm = f(*args)
            flat[i] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise NonFinite(f"f is not finite within h={h} of the point")
            gflat[i] = (fp - fm) / (2.0 * h)
        grads.append(g)
    return grads


def finite_diff_pair_gradient(mu: TokenSet, omega: TokenSet, cfg: StrategyConfig, wrt="s_v", h=1e-5) -> PairGradient:
    """Central-difference counterpart of :func:`pair_gradient`, built on the strategies module."""
    from .strategies import pair_similarity

    def f(m, o, mg, og):
        p = pair_similarity(TokenSet(m, mg), TokenSet(o, og), cfg)
        return p.s_v if wrt == "s_v" else p.s_t

    point = [mu.valid_tokens, omega.valid_tokens, mu.global_vector, omega.global_vector]
    dm, do, dmg, dog = finite_diff_gradient(f, point, h)
    return PairGradient(f(*point), dm, do, dmg, dog, wrt, cfg.blend > 0)
