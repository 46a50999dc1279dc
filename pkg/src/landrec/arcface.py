"""ArcFace classification head at desk scale.

Margin-based softmax logits against learned class centers: adaptive
per-class margins, the loss with analytic gradients (through the
normalization of both embeddings and centers), and a full-batch
center-fitting loop. Inference-time logits are plain cosines, so they
live on the same [-1, 1] scale as retrieval scores.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    DimMismatch,
    EmptyClass,
    EmptyCounts,
    InvariantViolation,
    MissingCenter,
    MissingMargin,
    ZeroNorm,
)
from .store import ClassCenterSet, EmbeddingSet, LabelTable


@dataclass(frozen=True)
class ArcFaceParams:
    scale: float = 30.0
    m_min: float = 0.05
    m_max: float = 0.45
    lam: float = 0.25

    def __post_init__(self):
        if not (math.isfinite(self.scale) and self.scale > 0):
            raise ValueError(f"scale must be finite and positive, got {self.scale}")
        if not 0.0 <= self.m_min <= self.m_max < math.pi / 2:
            raise ValueError(
                f"margins must satisfy 0 <= m_min <= m_max < pi/2, "
                f"got [{self.m_min}, {self.m_max}]"
            )
        if not (math.isfinite(self.lam) and self.lam > 0):
            raise ValueError(f"lambda must be finite and positive, got {self.lam}")


@dataclass(frozen=True)
class ClassMargins:
    """Per-landmark margin in radians; rarer classes get larger margins."""

    margins: dict = field(default_factory=dict)

    def __getitem__(self, landmark_id):
        try:
            return self.margins[int(landmark_id)]
        except KeyError:
            raise MissingMargin(f"no margin for landmark {landmark_id}") from None


def adaptive_margins(class_counts: dict, params: ArcFaceParams = ArcFaceParams()) -> ClassMargins:
    """Interpolate margins from class counts.

    margin_c = m_min + (m_max - m_min) * (n_c^-lam - n_max^-lam)
                                        / (n_min^-lam - n_max^-lam)

    The rarest class lands on m_max, the most frequent on m_min; when all
    counts are equal the 0/0 ratio is defined as 1 and every class gets
    m_max.
    """
    if not class_counts:
        raise EmptyCounts("adaptive margins require at least one class")
    for landmark, count in class_counts.items():
        if count < 1:
            raise ValueError(f"class {landmark} has non-positive count {count}")
    powers = {lm: float(count) ** -params.lam for lm, count in class_counts.items()}
    hi = max(powers.values())  # rarest class
    lo = min(powers.values())  # most frequent class
    span = hi - lo
    width = params.m_max - params.m_min
    margins = {}
    for landmark, power in powers.items():
        ratio = 1.0 if span == 0.0 else (power - lo) / span
        margins[int(landmark)] = params.m_min + width * ratio
    return ClassMargins(margins=margins)


def class_logits(embedding, centers: ClassCenterSet) -> dict:
    """Cosine of the embedding against every class center.

    No margin or scale is applied at inference, so the logit ordering is
    invariant under any positive rescaling of the embedding.
    """
    emb = np.asarray(embedding, dtype=np.float64).ravel()
    if emb.shape[0] != centers.centers.dim:
        raise DimMismatch(
            f"class_logits: embedding dim {emb.shape[0]} vs "
            f"centers dim {centers.centers.dim}"
        )
    norm = float(np.linalg.norm(emb))
    if norm <= 1e-12:
        raise ZeroNorm("class_logits is undefined for a zero embedding")
    values = centers.matrix.astype(np.float64) @ (emb / norm)
    return {int(lm): float(v) for lm, v in zip(centers.landmark_ids, values)}


def _center_arrays(centers):
    """Accept a ClassCenterSet or a raw (landmark_ids, matrix) pair.

    The raw form keeps full float64 precision, which finite-difference
    gradient checks and the fitting loop need; the storage-backed form is
    what inference uses.
    """
    if isinstance(centers, ClassCenterSet):
        return centers.landmark_ids, centers.matrix.astype(np.float64)
    ids, matrix = centers
    return np.asarray(ids), np.asarray(matrix, dtype=np.float64)


def arcface_loss_and_grad(embeddings, labels, centers,
                          margins: ClassMargins, params: ArcFaceParams = ArcFaceParams()):
    """ArcFace loss and its analytic gradients for one batch.

    The target logit uses cos(theta_y + m_y) while theta_y <= pi - m_y and
    the monotone fallback cos(theta_y) - m_y*sin(m_y) beyond; all logits
    are scaled by s and fed through a log-sum-exp-stabilized softmax
    cross-entropy, averaged over the batch. Gradients are taken with
    respect to the raw (pre-normalization) embeddings and centers.
    ``centers`` is a ClassCenterSet or a (landmark_ids, matrix) pair.

    Returns (loss, grad_embeddings, grad_centers) with float64 gradient
    arrays; grad_centers rows follow the centers' landmark-id order. All
    contractions run through einsum, so results do not depend on BLAS
    threading.
    """
    E = np.atleast_2d(np.asarray(embeddings, dtype=np.float64))
    center_ids, C = _center_arrays(centers)
    if E.shape[1] != C.shape[1]:
        raise DimMismatch(
            f"loss: embedding dim {E.shape[1]} vs centers dim {C.shape[1]}"
        )
    batch = E.shape[0]
    if len(labels) != batch:
        raise ValueError(f"{batch} embeddings but {len(labels)} labels")

    row_of = {int(lm): pos for pos, lm in enumerate(center_ids)}
    cols = np.empty(batch, dtype=np.int64)
    m = np.empty(batch, dtype=np.float64)
    for i, landmark in enumerate(labels):
        landmark = int(landmark)
        if landmark not in row_of:
            raise MissingCenter(f"no class center for landmark {landmark}")
        cols[i] = row_of[landmark]
        m[i] = margins[landmark]
    e_norm = np.linalg.norm(E, axis=1)
    c_norm = np.linalg.norm(C, axis=1)
    if np.any(e_norm <= 1e-12) or np.any(c_norm <= 1e-12):
        raise ZeroNorm("loss is undefined for zero embeddings or centers")
    En = E / e_norm[:, np.newaxis]
    Cn = C / c_norm[:, np.newaxis]

    cos = np.einsum("bd,ld->bl", En, Cn, optimize=False)
    rows = np.arange(batch)
    cos_y = cos[rows, cols]
    cos_m = np.cos(m)
    sin_m = np.sin(m)
    sin_y = np.sqrt(np.clip(1.0 - cos_y * cos_y, 0.0, None))
    in_range = cos_y >= -cos_m  # theta_y <= pi - m_y
    target = np.where(in_range, cos_y * cos_m - sin_y * sin_m, cos_y - m * sin_m)

    s = params.scale
    logits = s * cos
    logits[rows, cols] = s * target
    peak = np.max(logits, axis=1)
    lse = peak + np.log(np.sum(np.exp(logits - peak[:, np.newaxis]), axis=1))
    loss = float(np.mean(lse - logits[rows, cols]))

    prob = np.exp(logits - lse[:, np.newaxis])
    grad_logits = prob.copy()
    grad_logits[rows, cols] -= 1.0
    grad_logits *= s / batch
    # d target / d cos_y; the fallback branch is linear with slope 1. At the
    # sin_y = 0 pole the tangent direction vanishes too, so any finite slope
    # yields the correct zero contribution.
    safe_sin = np.where(sin_y < 1e-12, 1.0, sin_y)
    slope = np.where(in_range, cos_m + cos_y * sin_m / safe_sin, 1.0)
    grad_logits[rows, cols] *= slope

    grad_En = np.einsum("bl,ld->bd", grad_logits, Cn, optimize=False)
    grad_Cn = np.einsum("bl,bd->ld", grad_logits, En, optimize=False)
    # back through v / ||v||: project out the radial component
    grad_E = (grad_En - np.sum(grad_En * En, axis=1, keepdims=True) * En)
    grad_E /= e_norm[:, np.newaxis]
    grad_C = (grad_Cn - np.sum(grad_Cn * Cn, axis=1, keepdims=True) * Cn)
    grad_C /= c_norm[:, np.newaxis]
    return loss, grad_E, grad_C


def fit_centers(train: EmbeddingSet, labels: LabelTable,
                params: ArcFaceParams = ArcFaceParams(), *,
                epochs=50, step_size=0.5, seed=0, return_history=False):
    """Fit unit-norm class centers to frozen embeddings.

    Full-batch gradient descent with re-normalization after each step;
    deterministic given the seed. With ``return_history`` the per-epoch
    loss trajectory (evaluated before each step) is returned as well.
    """
    if len(labels) == 0:
        raise EmptyClass("cannot fit centers without labeled samples")
    row_of = train.row_index()
    image_ids = sorted(labels.entries)
    for image_id in image_ids:
        if image_id not in row_of:
            raise InvariantViolation(f"labeled image {image_id} has no embedding")
    X = train.matrix[[row_of[i] for i in image_ids]]
    y = [labels.entries[i] for i in image_ids]
    class_ids = sorted(set(y))
    margins = adaptive_margins(labels.class_counts(), params)

    rng = np.random.default_rng(seed)
    ids = np.array(class_ids, dtype=np.uint64)
    C = rng.standard_normal((len(class_ids), train.dim))
    C /= np.linalg.norm(C, axis=1)[:, np.newaxis]

    history = []
    for _ in range(epochs):
        loss, _, grad_C = arcface_loss_and_grad(X, y, (ids, C), margins, params)
        history.append(loss)
        C = C - step_size * grad_C
        norms = np.linalg.norm(C, axis=1)
        if np.any(norms <= 1e-12):
            raise ZeroNorm("a center collapsed to zero during fitting")
        C /= norms[:, np.newaxis]

    centers = ClassCenterSet(
        model_name=f"fitted(seed={seed})",
        centers=EmbeddingSet(dim=train.dim, ids=ids, matrix=C.astype(np.float32)),
    )
    if return_history:
        return centers, history
    return centers
