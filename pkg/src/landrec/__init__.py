"""Landmark-recognition re-ranking engine.

Ensembled cosine retrieval over precomputed embeddings, distractor-score
penalization, classification-logit adjustment, top-1 classification
aggregation, and Global Average Precision scoring.
"""

__version__ = "0.1.0"

from .arcface import (  # noqa: F401
    ArcFaceParams,
    ClassMargins,
    adaptive_margins,
    arcface_loss_and_grad,
    class_logits,
    fit_centers,
)
from .metrics import (  # noqa: F401
    GroundTruth,
    Prediction,
    gap,
    top1_accuracy,
)
from .rerank import (  # noqa: F401
    AggregatedPrediction,
    CandidateEntry,
    CandidateList,
    DistractorMap,
    PipelineConfig,
    RecognitionPipeline,
    adjust_candidates,
    aggregate,
    build_distractor_map,
    logit_term,
    predict_all,
)
from .store import (  # noqa: F401
    ClassCenterSet,
    EmbeddingSet,
    LabelTable,
    Manifest,
    align,
    read_embeddings,
    read_labels,
    read_manifest,
    write_embeddings,
    write_labels,
)
from .synth import SyntheticSpec, generate_synthetic  # noqa: F401
from .vectors import (  # noqa: F401
    GemParams,
    ScoredCandidate,
    cosine,
    ensemble_concat,
    gem_pool,
    l2_normalize,
    top_k,
)
