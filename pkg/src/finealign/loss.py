"""Symmetric contrastive objective and momentum distillation.

Score convention: ``s_v[i, j]`` is the visual-to-text similarity of visual
``i`` to text ``j`` and ``s_t[i, j]`` the text-to-visual similarity of text
``j`` to visual ``i``.  With feature queues the visual-to-text matrix gains
extra text columns, ``(N, N + Q_t)``, and the text-to-visual matrix gains
extra visual rows, ``(N + Q_v, N)``.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numpy as np
from scipy.special import log_softmax, softmax

from .errors import AlphaOutOfRange, DimMismatch, NonStochasticTargets, ShapeMismatch

DEFAULT_LOGIT_SCALE = 100.0
DEFAULT_EMA_MOMENTUM = 0.95
DEFAULT_TARGET_ALPHA = 0.4
DEFAULT_QUEUE_LEN = 16
STOCHASTIC_TOL = 1e-9

QUEUE_NAMES = ("global_visual", "fine_visual", "global_text", "fine_text")


@dataclass(frozen=True, eq=False)
class BatchScores:
    s_v: np.ndarray
    s_t: np.ndarray
    scale: float = DEFAULT_LOGIT_SCALE

    def __post_init__(self):
        s_v = np.asarray(self.s_v, dtype=np.float64)
        s_t = np.asarray(self.s_t, dtype=np.float64)
        if s_v.ndim != 2 or s_t.ndim != 2:
            raise ShapeMismatch("score matrices must be 2-D")
        if s_v.shape[0] != s_t.shape[1]:
            raise ShapeMismatch(f"batch sizes differ: s_v {s_v.shape}, s_t {s_t.shape}")
        n = s_v.shape[0]
        if s_v.shape[1] < n or s_t.shape[0] < n:
            raise ShapeMismatch("score matrices must contain the in-batch square block")
        if not (np.all(np.isfinite(s_v)) and np.all(np.isfinite(s_t))):
            raise ValueError("scores must be finite")
        if not self.scale > 0:
            raise ValueError("logit scale must be > 0")
        object.__setattr__(self, "s_v", s_v)
        object.__setattr__(self, "s_t", s_t)

    @property
    def n(self) -> int:
        return self.s_v.shape[0]


@dataclass(frozen=True, eq=False)
class SoftTargets:
    """Row-stochastic targets: ``y_v`` is ``(N, N + Q_t)``, ``y_t`` is ``(N, N + Q_v)``."""

    y_v: np.ndarray
    y_t: np.ndarray
    alpha: float = 0.0

    def __post_init__(self):
        for name in ("y_v", "y_t"):
            y = np.asarray(getattr(self, name), dtype=np.float64)
            if y.ndim != 2:
                raise ShapeMismatch(f"{name} must be 2-D")
            if np.any(y < -STOCHASTIC_TOL) or np.any(np.abs(y.sum(axis=1) - 1.0) > STOCHASTIC_TOL):
                raise NonStochasticTargets(f"{name} rows must be nonnegative and sum to 1")
            object.__setattr__(self, name, y)


def one_hot_targets(n: int, n_queue_t: int = 0, n_queue_v: int = 0) -> SoftTargets:
    """Ground-truth labels; queued columns are negatives (label 0)."""
    y_v = np.hstack([np.eye(n), np.zeros((n, n_queue_t))])
    y_t = np.hstack([np.eye(n), np.zeros((n, n_queue_v))])
    return SoftTargets(y_v, y_t, 0.0)


def _check_target_shapes(scores: BatchScores, targets: SoftTargets) -> None:
    if targets.y_v.shape != scores.s_v.shape:
        raise ShapeMismatch(f"y_v {targets.y_v.shape} vs s_v {scores.s_v.shape}")
    if targets.y_t.shape != scores.s_t.T.shape:
        raise ShapeMismatch(f"y_t {targets.y_t.shape} vs transposed s_t {scores.s_t.T.shape}")


def contrastive_loss(scores: BatchScores, targets: SoftTargets | None = None) -> float:
    """``0.5 * (L_V + L_T)`` with soft-target cross-entropy in each direction.

    ``L_V`` softmaxes each row of ``scale * s_v``; ``L_T`` softmaxes each
    column of ``scale * s_t`` (one column per text query).
    """
    if targets is None:
        targets = one_hot_targets(scores.n, scores.s_v.shape[1] - scores.n, scores.s_t.shape[0] - scores.n)
    _check_target_shapes(scores, targets)
    log_pv = log_softmax(scores.scale * scores.s_v, axis=1)
    log_pt = log_softmax(scores.scale * scores.s_t, axis=0).T
    loss_v = -np.sum(targets.y_v * log_pv) / scores.n
    loss_t = -np.sum(targets.y_t * log_pt) / scores.n
    return float(0.5 * (loss_v + loss_t))


def contrastive_loss_grad(scores: BatchScores, targets: SoftTargets | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Gradients of :func:`contrastive_loss` with respect to ``s_v`` and ``s_t``."""
    if targets is None:
        targets = one_hot_targets(scores.n, scores.s_v.shape[1] - scores.n, scores.s_t.shape[0] - scores.n)
    _check_target_shapes(scores, targets)
    k = 0.5 * scores.scale / scores.n
    pv = softmax(scores.scale * scores.s_v, axis=1)
    pt = softmax(scores.scale * scores.s_t, axis=0)
    g_v = k * (pv * targets.y_v.sum(axis=1, keepdims=True) - targets.y_v)
    g_t = k * (pt * targets.y_t.sum(axis=1)[None, :] - targets.y_t.T)
    return g_v, g_t


def blended_loss(fine: BatchScores, coarse: BatchScores, targets: SoftTargets | None, global_weight: float) -> float:
    """Separate-loss-term reading of the global blend: ``(1-w) L(fine) + w L(global)``."""
    if not 0.0 <= global_weight <= 1.0:
        raise ValueError("global_weight must lie in [0, 1]")
    return (1.0 - global_weight) * contrastive_loss(fine, targets) + global_weight * contrastive_loss(coarse, targets)


@dataclass(frozen=True, eq=False)
class TeacherState:
    """EMA copy of the student parameters plus four bounded FIFO feature queues."""

    params: dict
    ema_momentum: float = DEFAULT_EMA_MOMENTUM
    capacity: int = DEFAULT_QUEUE_LEN
    queues: dict = field(default_factory=dict)

    def __post_init__(self):
        if not 0.0 <= self.ema_momentum <= 1.0:
            raise ValueError("ema_momentum must lie in [0, 1]")
        if self.capacity < 0:
            raise ValueError("queue capacity must be >= 0")
        params = {k: np.array(v, dtype=np.float64) for k, v in self.params.items()}
        queues = {name: deque(self.queues.get(name, ()), maxlen=self.capacity) for name in QUEUE_NAMES}
        object.__setattr__(self, "params", params)
        object.__setattr__(self, "queues", queues)

    @classmethod
    def from_student(cls, student_params: dict, ema_momentum=DEFAULT_EMA_MOMENTUM, capacity=DEFAULT_QUEUE_LEN):
        return cls(dict(student_params), ema_momentum, capacity)

    def queue(self, name: str) -> list:
        return list(self.queues[name])

    @property
    def queue_len(self) -> int:
        return len(self.queues["global_text"])


def md_update_teacher(teacher: TeacherState, student_params: dict) -> TeacherState:
    """``teacher <- m * teacher + (1 - m) * student`` for every parameter."""
    if set(student_params) != set(teacher.params):
        raise ShapeMismatch(f"parameter names differ: {sorted(student_params)} vs {sorted(teacher.params)}")
    m = teacher.ema_momentum
    new = {}
    for key, value in teacher.params.items():
        s = np.asarray(student_params[key], dtype=np.float64)
        if s.shape != value.shape:
            raise ShapeMismatch(f"parameter {key!r}: {s.shape} vs {value.shape}")
        new[key] = m * value + (1.0 - m) * s
    return TeacherState(new, m, teacher.capacity, teacher.queues)


def md_pseudo_targets(teacher_scores: BatchScores) -> tuple[np.ndarray, np.ndarray]:
    """Softmax of the teacher's (batch + queue) similarities, one row per query.

    Returns ``(y_m_v, y_m_t)`` shaped like :class:`SoftTargets`.
    """
    s = teacher_scores
    y_m_v = softmax(s.scale * s.s_v, axis=1)
    y_m_t = softmax(s.scale * s.s_t, axis=0).T
    return y_m_v, y_m_t


def md_soft_targets(y_m_v, y_m_t, onehot: SoftTargets, alpha: float) -> SoftTargets:
    """Mix pseudo-targets with ground truth: ``alpha * y_m + (1 - alpha) * y``."""
    if not 0.0 <= alpha <= 1.0:
        raise AlphaOutOfRange(f"alpha must lie in [0, 1], got {alpha}")
    y_m_v = np.asarray(y_m_v, dtype=np.float64)
    y_m_t = np.asarray(y_m_t, dtype=np.float64)
    if y_m_v.shape != onehot.y_v.shape or y_m_t.shape != onehot.y_t.shape:
        raise ShapeMismatch("pseudo-targets and labels must share a shape")
    return SoftTargets(
        alpha * y_m_v + (1.0 - alpha) * onehot.y_v,
        alpha * y_m_t + (1.0 - alpha) * onehot.y_t,
        alpha,
    )


def enqueue_features(
    teacher: TeacherState,
    global_visual=(),
    fine_visual=(),
    global_text=(),
    fine_text=(),
) -> TeacherState:
    """Append a batch of teacher features; the oldest entries drop out past capacity."""
    batch = dict(global_visual=global_visual, fine_visual=fine_visual, global_text=global_text, fine_text=fine_text)
    queues = {name: deque(q, maxlen=teacher.capacity) for name, q in teacher.queues.items()}
    for name, items in batch.items():
        q = queues[name]
        for item in items:
            item = np.array(item, dtype=np.float64)
            if q and item.shape[-1] != q[-1].shape[-1]:
                raise DimMismatch(f"queue {name!r} holds dim {q[-1].shape[-1]}, got {item.shape[-1]}")
            q.append(item)
    return TeacherState(teacher.params, teacher.ema_momentum, teacher.capacity, queues)
