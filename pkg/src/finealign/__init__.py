"""Token-level cross-modal similarity, retrieval metrics and a toy contrastive trainer."""

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
    l2_normalize,
    mean_pool,
    token_similarity_matrix,
    token_weights,
)
from .estimator import FineGrainedRetriever
from .grad import BatchSimilarity, PairGradient, finite_diff_gradient, pair_gradient
from .harness import Corpus, CorpusSpec, DistillConfig, TrainConfig, TrainTrace, generate_corpus, train_toy
from .io import AlignmentDump, dump_alignment, load_embeddings, write_embeddings
from .loss import BatchScores, SoftTargets, TeacherState, contrastive_loss, contrastive_loss_grad
from .metrics import RetrievalReport, retrieval_report
from .strategies import STRATEGY_NAMES, StrategyConfig, pair_flows, pair_similarity, score_matrices
from .transport import TransportConfig, TransportPlan, exact_ot_small, sinkhorn

__version__ = "0.1.0"

__all__ = [
    "TEXT_TO_VISUAL",
    "VISUAL_TO_TEXT",
    "STRATEGY_NAMES",
    "AlignmentDump",
    "BatchScores",
    "BatchSimilarity",
    "Corpus",
    "CorpusSpec",
    "DistillConfig",
    "FineGrainedRetriever",
    "MatchingFlow",
    "PairGradient",
    "PairScore",
    "RetrievalReport",
    "SimilarityMatrix",
    "SoftTargets",
    "StrategyConfig",
    "TeacherState",
    "TokenSet",
    "TokenWeights",
    "TrainConfig",
    "TrainTrace",
    "TransportConfig",
    "TransportPlan",
    "aggregate_similarity",
    "contrastive_loss",
    "contrastive_loss_grad",
    "dump_alignment",
    "exact_ot_small",
    "finite_diff_gradient",
    "generate_corpus",
    "global_similarity",
    "l2_normalize",
    "load_embeddings",
    "mean_pool",
    "pair_flows",
    "pair_gradient",
    "pair_similarity",
    "retrieval_report",
    "score_matrices",
    "sinkhorn",
    "token_similarity_matrix",
    "token_weights",
    "train_toy",
    "write_embeddings",
]
