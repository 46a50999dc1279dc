"""Dimension-checked dense vector primitives.

L2 normalization, cosine similarity, GeM pooling, exact top-k retrieval
and ensemble concatenation. Vectors are stored as float32 arrays; every
dot product and norm is accumulated in float64 so ties are stable across
platforms at the 1e-6 level.
"""

from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

from . import kernels
from .errors import DimMismatch, EmptyIndex, NegativeFeature, ZeroNorm

NORM_EPS = 1e-12


class ScoredCandidate(NamedTuple):
    image_id: int
    score: float


@dataclass(frozen=True)
class GemParams:
    """GeM pooling exponent. p=1 is average pooling, p -> inf approaches max."""

    p: float = 3.0

    def __post_init__(self):
        if not np.isfinite(self.p) or self.p < 1.0:
            raise ValueError(f"GeM exponent must be finite and >= 1, got {self.p}")


def as_vector(v) -> np.ndarray:
    """Coerce to a 1-D float32 vector, rejecting non-finite entries."""
    arr = np.asarray(v, dtype=np.float32)
    if arr.ndim != 1:
        raise ValueError(f"expected a 1-D vector, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("vector contains NaN or Inf")
    return arr


def l2_normalize(v) -> np.ndarray:
    """Scale ``v`` to unit Euclidean norm.

    Raises ZeroNorm when the norm is at or below 1e-12: a degenerate
    embedding must not enter retrieval.
    """
    arr = as_vector(v)
    norm = float(np.linalg.norm(arr.astype(np.float64)))
    if norm <= NORM_EPS:
        raise ZeroNorm(f"cannot normalize a vector with norm {norm:.3e}")
    return (arr.astype(np.float64) / norm).astype(np.float32)


def cosine(a, b) -> float:
    """Cosine similarity dot(a,b) / (||a|| * ||b||), accumulated in float64."""
    av = as_vector(a).astype(np.float64)
    bv = as_vector(b).astype(np.float64)
    if av.shape[0] != bv.shape[0]:
        raise DimMismatch(f"cosine: dims {av.shape[0]} vs {bv.shape[0]}")
    na = float(np.linalg.norm(av))
    nb = float(np.linalg.norm(bv))
    if na <= NORM_EPS or nb <= NORM_EPS:
        raise ZeroNorm("cosine is undefined for (near-)zero vectors")
    return float(av @ bv) / (na * nb)


def gem_pool(features, params: GemParams = GemParams()) -> np.ndarray:
    """Generalized-mean pool an (n, C) feature map into a C-dim vector.

    Per channel c the output is ((1/n) * sum_i f[i,c]^p)^(1/p). Negative
    inputs are rejected rather than clamped: fractional powers of negatives
    are undefined and silent clamping would hide upstream bugs.
    """
    f = np.asarray(features, dtype=np.float64)
    if f.ndim != 2 or f.shape[0] < 1 or f.shape[1] < 1:
        raise ValueError(f"expected an (n, C) feature map, got shape {f.shape}")
    if not np.all(np.isfinite(f)):
        raise ValueError("feature map contains NaN or Inf")
    if np.any(f < 0.0):
        raise NegativeFeature("GeM pooling requires non-negative features")
    if params.p == 1.0:
        pooled = np.mean(f, axis=0)
    else:
        # rescale by the per-channel max so f^p cannot overflow at large p
        peak = np.max(f, axis=0)
        safe = np.where(peak > 0.0, peak, 1.0)
        pooled = safe * np.mean((f / safe) ** params.p, axis=0) ** (1.0 / params.p)
        pooled = np.where(peak > 0.0, pooled, 0.0)
    return pooled.astype(np.float32)


def top_k(query, index, k: int) -> list:
    """Exact top-k retrieval of ``query`` against an EmbeddingSet ``index``.

    Index and query are expected pre-normalized, so scores are plain dot
    products. Returns min(k, |index|) ScoredCandidates sorted by score
    descending, ties broken by image id ascending; results are identical
    for any chunk size or thread count.
    """
    q = as_vector(query)
    if len(index) == 0:
        raise EmptyIndex("top_k over an empty index")
    if q.shape[0] != index.dim:
        raise DimMismatch(f"top_k: query dim {q.shape[0]} vs index dim {index.dim}")
    if k < 1:
        raise ValueError("k must be >= 1")
    scores, positions = kernels.topk_search(q[np.newaxis, :], index.matrix, k)
    ids = index.ids[positions[0]]
    return [ScoredCandidate(int(i), float(s)) for i, s in zip(ids, scores[0])]


def ensemble_concat(per_model: Sequence) -> np.ndarray:
    """Late-fusion ensemble of per-model embeddings of one image.

    Each vector is L2-normalized, they are concatenated in list order, and
    the concatenation is L2-normalized again. For unit blocks this makes
    the ensemble cosine of a pair equal the mean of its per-model cosines.
    """
    if len(per_model) == 0:
        raise ValueError("ensemble_concat requires at least one model vector")
    blocks = [l2_normalize(v) for v in per_model]
    return l2_normalize(np.concatenate(blocks))
