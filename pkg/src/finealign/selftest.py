"""Fast invariant battery behind ``finealign selftest``.

Each check draws small seeded instances and compares a kernel with an
independent computation.  The whole battery runs in a few seconds.
"""

from __future__ import annotations

import math
import sys
import warnings
from typing import Callable

import numpy as np

from .core import TokenSet, l2_normalize, mean_pool, token_similarity_matrix, token_weights
from .errors import NotConvergedWarning
from .grad import finite_diff_pair_gradient, pair_gradient
from .io import FLOW_RESCALE, dump_alignment
from .loss import BatchScores, contrastive_loss
from .metrics import retrieval_report
from .strategies import KINDS, StrategyConfig, pair_flows, pair_similarity, scan_attended_similarity
from .transport import TransportConfig, exact_ot_small, prepare_marginals, sinkhorn


def random_pair(rng, l1=None, l2=None, d=None) -> tuple[TokenSet, TokenSet]:
    l1 = l1 or int(rng.integers(1, 9))
    l2 = l2 or int(rng.integers(1, 9))
    d = d or int(rng.integers(2, 17))
    mu = l2_normalize(TokenSet.from_tokens(rng.standard_normal((l1, d))))
    omega = l2_normalize(TokenSet.from_tokens(rng.standard_normal((l2, d))))
    return mu, omega


def _check_subsumption(rng) -> None:
    for _ in range(20):
        mu, omega = random_pair(rng)
        c = token_similarity_matrix(mu, omega).c
        u = pair_similarity(mu, omega, StrategyConfig("uniform")).s_v
        assert abs(u - mean_pool(mu.valid_tokens) @ mean_pool(omega.valid_tokens)) < 1e-10
        m = pair_similarity(mu, omega, StrategyConfig("max-avg")).s_v
        assert abs(m - c.max(axis=1).mean()) < 1e-10
        s = pair_similarity(mu, omega, StrategyConfig("scan", lam=4.0)).s_v
        assert abs(s - scan_attended_similarity(mu, omega, 4.0)) < 1e-10


def _check_flow_mass(rng) -> None:
    for _ in range(20):
        mu, omega = random_pair(rng)
        for kind in KINDS:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", NotConvergedWarning)
                f = pair_flows(mu, omega, StrategyConfig(kind))
            tv, tt = f.flow_v.t, f.flow_t.t
            if kind in ("uniform", "learnable", "emd"):
                assert abs(tv.sum() - 1.0) < 1e-10
            if kind in ("scan", "max_avg"):
                assert np.allclose(tv.sum(axis=1), 1.0 / tv.shape[0], atol=1e-10)
            if kind == "tokenflow":
                assert np.allclose(tv.sum(axis=1), f.weights.d / tv.shape[0], atol=1e-10)
                assert np.allclose(tt.sum(axis=0), f.weights.e / tt.shape[1], atol=1e-10)


def _check_transport(rng) -> None:
    cfg = TransportConfig(epsilon=0.05, max_iters=5000, tol=1e-9)
    for _ in range(10):
        mu, omega = random_pair(rng, int(rng.integers(1, 5)), int(rng.integers(1, 5)))
        c = token_similarity_matrix(mu, omega).c
        d, e = prepare_marginals(token_weights(mu, omega))
        plan = sinkhorn(c, d, e, cfg)
        exact = exact_ot_small(1.0 - c, d, e)
        assert plan.marginal_residual <= 1e-6
        assert plan.cost >= exact.cost - 1e-12
        assert plan.cost - exact.cost <= cfg.epsilon * math.log(c.size) + 1e-6


def _check_gradients(rng) -> None:
    for kind in ("uniform", "scan", "tokenflow"):
        mu, omega = random_pair(rng, 3, 4, 5)
        cfg = StrategyConfig(kind, global_blend_w=0.3)
        for wrt in ("s_v", "s_t"):
            a = pair_gradient(mu, omega, cfg, wrt)
            n = finite_diff_pair_gradient(mu, omega, cfg, wrt)
            for ga, gn in zip((a.d_mu, a.d_omega, a.d_mu_global, a.d_omega_global),
                              (n.d_mu, n.d_omega, n.d_mu_global, n.d_omega_global)):
                assert np.max(np.abs(ga - gn)) < 1e-6


def _check_metrics(rng) -> None:
    for _ in range(50):
        s = rng.integers(0, 5, size=(8, 8)).astype(float)
        rep = retrieval_report(s, ks=(1, 5))
        ranks = [1 + int(np.sum(row > row[i])) for i, row in enumerate(s)]
        assert rep.r_at[1] == 100.0 * sum(r <= 1 for r in ranks) / 8
        assert rep.mnr == np.mean(ranks)


def _check_dump(rng) -> None:
    for _ in range(10):
        mu, omega = random_pair(rng)
        cfg = StrategyConfig("tokenflow")
        dump = dump_alignment(mu, omega, cfg)
        p = pair_similarity(mu, omega, cfg)
        assert abs(dump.contributions_t2v.sum() / FLOW_RESCALE - p.s_fine_t) < 1e-9
        assert abs(dump.contributions_v2t.sum() / FLOW_RESCALE - p.s_fine_v) < 1e-9


def _check_loss(rng) -> None:
    assert abs(contrastive_loss(BatchScores(np.zeros((2, 2)), np.zeros((2, 2)))) - math.log(2.0)) < 1e-12
    eye = np.eye(2)
    assert abs(contrastive_loss(BatchScores(eye, eye, 1.0)) - math.log1p(math.exp(-1.0))) < 1e-9


CHECKS: dict[str, Callable] = {
    "subsumption": _check_subsumption,
    "flow-mass": _check_flow_mass,
    "transport": _check_transport,
    "gradients": _check_gradients,
    "metrics": _check_metrics,
    "dump": _check_dump,
    "loss": _check_loss,
}


def run(out=None, seed: int = 0) -> bool:
    """Run every check, print one ``ok``/``FAIL`` line each, return overall success."""
    out = out or sys.stdout
    ok = True
    for name, check in CHECKS.items():
        try:
            check(np.random.default_rng(seed))
            out.write(f"ok   {name}\n")
        except AssertionError:
            ok = False
            out.write(f"FAIL {name}\n")
    return ok
