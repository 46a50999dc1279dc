"""Score-fusion re-ranking: the final score of each retrieved candidate is

    raw retrieval score + classification logit - distractor score

followed by per-landmark accumulation and optional injection of the
query's top-1 classification pair. Queries are independent; batch
prediction parallelizes across them over shared immutable structures and
emits results in query-id order regardless of completion order.
"""

from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import kernels
from .errors import (
    DimMismatch,
    DuplicateId,
    IdMismatch,
    InvariantViolation,
    LandrecError,
    MissingDistractor,
    MissingLabel,
    MissingLogit,
    ParseError,
    ZeroNorm,
)
from .metrics import Prediction
from .store import ClassCenterSet, EmbeddingSet, LabelTable, Manifest, atomic_write_text
from .store import _parse_uint, _U64_MAX

QUERY_LOGIT = "query_logit"
INDEX_LOGIT = "index_logit"


@dataclass(frozen=True)
class PipelineConfig:
    """Re-ranking knobs; defaults follow the reference pipeline (K=7, top-3
    distractor mean, query-side logits, top-1 injection on)."""

    k: int = 7
    distractor_top_n: int = 3
    logit_mode: str = QUERY_LOGIT
    inject_top1: bool = True
    use_logit: bool = True
    use_distractor: bool = True

    def __post_init__(self):
        if self.k < 1:
            raise ValueError(f"k must be >= 1, got {self.k}")
        if self.distractor_top_n < 1:
            raise ValueError(f"distractor_top_n must be >= 1, got {self.distractor_top_n}")
        if self.logit_mode not in (QUERY_LOGIT, INDEX_LOGIT):
            raise ValueError(f"unknown logit_mode {self.logit_mode!r}")


@dataclass(frozen=True)
class DistractorMap:
    """image id -> mean of its top-n cosines against the distractor pool."""

    scores: dict = field(default_factory=dict)

    def __post_init__(self):
        for image_id, score in self.scores.items():
            if not np.isfinite(score) or abs(score) > 1.0 + 1e-6:
                raise InvariantViolation(
                    f"distractor score {score!r} for image {image_id} is outside [-1, 1]"
                )

    def __len__(self):
        return len(self.scores)

    def __getitem__(self, image_id):
        try:
            return self.scores[int(image_id)]
        except KeyError:
            raise MissingDistractor(
                f"no distractor score for index image {image_id}"
            ) from None


@dataclass(frozen=True)
class CandidateEntry:
    image_id: int
    landmark_id: int
    raw_score: float
    adjusted_score: float


@dataclass(frozen=True)
class CandidateList:
    query_id: int
    entries: tuple


@dataclass(frozen=True)
class AggregatedPrediction:
    """Per-landmark accumulated scores; best is None when there is nothing
    to predict (no candidates and no injected pair)."""

    query_id: int
    landmark_scores: dict
    best: Optional[tuple]


def build_distractor_map(index: EmbeddingSet, distractors: EmbeddingSet, n: int = 3,
                         *, chunk_size=kernels.DEFAULT_CHUNK_SIZE, threads=1,
                         backend=None) -> DistractorMap:
    """Score every index image by its top-n mean cosine against the pool.

    Both sets must be unit-normalized and share a dimension. With fewer
    than n pool vectors the mean runs over all of them; an empty pool makes
    the distractor stage a no-op (all scores zero).
    """
    if index.dim != distractors.dim:
        raise DimMismatch(
            f"distractor map: index dim {index.dim} vs pool dim {distractors.dim}"
        )
    means = kernels.topn_mean(index.matrix, distractors.matrix, n,
                              chunk_size=chunk_size, threads=threads, backend=backend)
    return DistractorMap(scores={int(i): float(s) for i, s in zip(index.ids, means)})


def write_distractor_map(dmap: DistractorMap, path):
    """Distractor TSV: image_id TAB score with 6 decimal digits, LF endings."""
    lines = [f"{image_id}\t{score:.6f}\n"
             for image_id, score in sorted(dmap.scores.items())]
    atomic_write_text(path, "".join(lines))


def read_distractor_map(path) -> DistractorMap:
    scores = {}
    with open(path, "r", encoding="utf-8", newline="") as fh:
        for row, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            cols = line.split("\t")
            if len(cols) != 2:
                raise ParseError(f"{path}: row {row}: expected 2 columns, got {len(cols)}")
            image_id = _parse_uint(cols[0], _U64_MAX, row, 1, path)
            if image_id in scores:
                raise DuplicateId(f"{path}: row {row}: duplicate image id {image_id}")
            try:
                scores[image_id] = float(cols[1])
            except ValueError:
                raise ParseError(
                    f"{path}: row {row}, column 2: {cols[1]!r} is not a number"
                ) from None
    return DistractorMap(scores=scores)


def logit_term(candidate, query_logits=None, index_logits=None,
               mode: str = QUERY_LOGIT) -> float:
    """Classification-logit adjustment for one candidate.

    query_logit mode averages, over classification models, the query's
    logit at the candidate's landmark (query_logits: {model: {landmark:
    logit}}). index_logit mode looks up the candidate image's precomputed
    mean logit at its own label (index_logits: {image_id: logit}).
    """
    image_id, landmark_id = candidate
    if mode == QUERY_LOGIT:
        if not query_logits:
            raise MissingLogit("query_logit mode needs per-model query logits")
        total = 0.0
        for model, table in query_logits.items():
            if landmark_id not in table:
                raise MissingLogit(
                    f"model {model!r} has no logit for landmark {landmark_id}"
                )
            total += table[landmark_id]
        return total / len(query_logits)
    if mode == INDEX_LOGIT:
        if index_logits is None or image_id not in index_logits:
            raise MissingLogit(f"no precomputed logit for index image {image_id}")
        return index_logits[image_id]
    raise ValueError(f"unknown logit mode {mode!r}")


def label_candidates(query_id, scored, labels: LabelTable) -> CandidateList:
    """Attach landmark labels to raw top-k results; scores start unadjusted."""
    entries = []
    for cand in scored:
        landmark = labels.get(cand.image_id)
        if landmark is None:
            raise MissingLabel(f"index image {cand.image_id} has no landmark label")
        entries.append(CandidateEntry(
            image_id=int(cand.image_id),
            landmark_id=int(landmark),
            raw_score=float(cand.score),
            adjusted_score=float(cand.score),
        ))
    return CandidateList(query_id=int(query_id), entries=tuple(entries))


def adjust_candidates(raw: CandidateList, dmap: Optional[DistractorMap] = None,
                      query_logits=None, index_logits=None,
                      config: PipelineConfig = PipelineConfig()) -> CandidateList:
    """Apply the score formula to every entry, preserving raw-score order."""
    entries = []
    for entry in raw.entries:
        term = 0.0
        if config.use_logit:
            term = logit_term((entry.image_id, entry.landmark_id),
                              query_logits, index_logits, config.logit_mode)
        penalty = 0.0
        if config.use_distractor:
            if dmap is None:
                raise MissingDistractor("distractor stage enabled but no map given")
            penalty = dmap[entry.image_id]
        entries.append(CandidateEntry(
            image_id=entry.image_id,
            landmark_id=entry.landmark_id,
            raw_score=entry.raw_score,
            adjusted_score=entry.raw_score + term - penalty,
        ))
    return CandidateList(query_id=raw.query_id, entries=tuple(entries))


def aggregate(candidates: CandidateList, top1: Optional[tuple] = None,
              config: PipelineConfig = PipelineConfig()) -> AggregatedPrediction:
    """Accumulate adjusted scores per landmark and pick the argmax.

    Each landmark's addends are summed in descending order, so the result
    does not depend on candidate order. The injected top-1 classification
    pair is added as-is (it is not an image, so it carries no distractor
    score). Ties go to the smaller landmark id.
    """
    buckets = {}
    for entry in candidates.entries:
        buckets.setdefault(entry.landmark_id, []).append(entry.adjusted_score)
    landmark_scores = {}
    for landmark, values in buckets.items():
        values.sort(reverse=True)
        total = 0.0
        for value in values:
            total += value
        landmark_scores[landmark] = total
    if config.inject_top1 and top1 is not None:
        landmark, logit = top1
        landmark = int(landmark)
        landmark_scores[landmark] = landmark_scores.get(landmark, 0.0) + float(logit)
    if not landmark_scores:
        return AggregatedPrediction(candidates.query_id, {}, None)
    best = min(landmark_scores, key=lambda lm: (-landmark_scores[lm], lm))
    return AggregatedPrediction(
        candidates.query_id, landmark_scores, (best, landmark_scores[best])
    )


def _normalize_rows_f32(matrix: np.ndarray, ids, what: str) -> np.ndarray:
    """Row-wise unit normalization, float64 math with float32 storage.

    Matches l2_normalize bit-for-bit so the vectorized pipeline agrees
    with the per-vector operations.
    """
    m64 = matrix.astype(np.float64)
    norms = np.linalg.norm(m64, axis=1)
    if np.any(norms <= 1e-12):
        bad = int(ids[int(np.argmin(norms))])
        raise ZeroNorm(f"{what} {bad} has a zero-norm embedding")
    return (m64 / norms[:, np.newaxis]).astype(np.float32)


def ensemble_matrix(per_model_sets) -> np.ndarray:
    """Row-wise late fusion of aligned per-model sets: normalize each
    model's rows, concatenate, normalize again."""
    first = per_model_sets[0]
    blocks = [_normalize_rows_f32(s.matrix, s.ids, "image") for s in per_model_sets]
    concat = np.hstack(blocks)
    return _normalize_rows_f32(concat, first.ids, "image")


def ensembled_set(per_model_sets) -> EmbeddingSet:
    """Fuse aligned per-model sets into one EmbeddingSet in the concatenated space."""
    _check_alignment(per_model_sets, "ensemble")
    total_dim = sum(s.dim for s in per_model_sets)
    return EmbeddingSet(
        dim=total_dim,
        ids=per_model_sets[0].ids,
        matrix=ensemble_matrix(per_model_sets),
    )


def _check_alignment(per_model_sets, what: str):
    first = per_model_sets[0]
    for other in per_model_sets[1:]:
        if len(other) != len(first) or np.any(other.ids != first.ids):
            limit = min(len(first), len(other))
            for pos in range(limit):
                if first.ids[pos] != other.ids[pos]:
                    raise IdMismatch(
                        f"{what}: per-model ids diverge at position {pos}: "
                        f"{int(first.ids[pos])} vs {int(other.ids[pos])}"
                    )
            raise IdMismatch(f"{what}: per-model id counts differ: "
                             f"{len(first)} vs {len(other)}")


class RecognitionPipeline:
    """Loads all inputs once and predicts landmarks for every query.

    Retrieval runs in the ensembled embedding space; classification logits
    are averaged over the (possibly different) classification models in
    their own per-model spaces.
    """

    def __init__(self, *, index_sets, query_sets, labels: LabelTable,
                 config: PipelineConfig = PipelineConfig(),
                 distractor_map: Optional[DistractorMap] = None,
                 center_sets=(), cls_query_sets=(), cls_index_sets=()):
        if not index_sets or len(index_sets) != len(query_sets):
            raise InvariantViolation(
                "need one index and one query embedding set per retrieval model"
            )
        if len(index_sets[0]) == 0:
            raise InvariantViolation("index set is empty")
        _check_alignment(index_sets, "index")
        _check_alignment(query_sets, "query")
        self.config = config
        self.labels = labels
        self.distractor_map = distractor_map
        self.index_ids = index_sets[0].ids
        self.query_ids = query_sets[0].ids
        self.index_matrix = ensemble_matrix(index_sets)
        self.query_matrix = ensemble_matrix(query_sets)

        needs_logits = config.use_logit or config.inject_top1
        self._center_ids = None
        self._query_logit_matrix = None
        self._index_logit_table = None
        if needs_logits:
            if not center_sets or not cls_query_sets:
                raise InvariantViolation(
                    "logit stages enabled but no classification centers/queries given"
                )
            if len(center_sets) != len(cls_query_sets):
                raise InvariantViolation(
                    "need one query embedding set per classification model"
                )
            for other in center_sets[1:]:
                if (len(other.landmark_ids) != len(center_sets[0].landmark_ids)
                        or np.any(other.landmark_ids != center_sets[0].landmark_ids)):
                    raise IdMismatch(
                        "classification models disagree on the landmark id space"
                    )
            _check_alignment([*cls_query_sets, query_sets[0]], "classification query")
            self._center_ids = center_sets[0].landmark_ids
            self._center_col = {int(lm): pos for pos, lm in enumerate(self._center_ids)}
            self._query_logit_matrix = self._mean_query_logits(center_sets, cls_query_sets)
            if config.use_logit and config.logit_mode == INDEX_LOGIT:
                if not cls_index_sets:
                    raise InvariantViolation(
                        "index_logit mode needs per-classification-model index sets"
                    )
                _check_alignment([*cls_index_sets, index_sets[0]], "classification index")
                self._index_logit_table = self._mean_index_logits(center_sets, cls_index_sets)

    @staticmethod
    def _mean_query_logits(center_sets, cls_query_sets) -> np.ndarray:
        """(Q, L) mean-over-models cosine of each query against each center."""
        acc = None
        for centers, queries in zip(center_sets, cls_query_sets):
            if centers.centers.dim != queries.dim:
                raise DimMismatch(
                    f"model {centers.model_name!r}: query dim {queries.dim} vs "
                    f"center dim {centers.centers.dim}"
                )
            qn = _normalize_rows_f32(queries.matrix, queries.ids, "query").astype(np.float64)
            logits = qn @ centers.matrix.astype(np.float64).T
            acc = logits if acc is None else acc + logits
        return acc / len(center_sets)

    def _mean_index_logits(self, center_sets, cls_index_sets) -> dict:
        """Precomputed mean logit of each labeled index image at its own label."""
        index_ids = cls_index_sets[0].ids
        positions, cols = [], []
        for pos, image_id in enumerate(index_ids):
            landmark = self.labels.get(image_id)
            if landmark is None or int(landmark) not in self._center_col:
                continue
            positions.append(pos)
            cols.append(self._center_col[int(landmark)])
        if not positions:
            return {}
        acc = np.zeros(len(positions), dtype=np.float64)
        for centers, index_set in zip(center_sets, cls_index_sets):
            if centers.centers.dim != index_set.dim:
                raise DimMismatch(
                    f"model {centers.model_name!r}: index dim {index_set.dim} vs "
                    f"center dim {centers.centers.dim}"
                )
            rows = _normalize_rows_f32(index_set.matrix, index_set.ids,
                                       "index image").astype(np.float64)[positions]
            picked = centers.matrix.astype(np.float64)[cols]
            acc += np.sum(rows * picked, axis=1)
        acc /= len(center_sets)
        return {int(index_ids[pos]): float(v) for pos, v in zip(positions, acc)}

    def _top1_pair(self, qpos) -> Optional[tuple]:
        if self._query_logit_matrix is None or self._query_logit_matrix.shape[1] == 0:
            return None
        row = self._query_logit_matrix[qpos]
        best = int(np.argmax(row))  # first max -> smallest landmark id on ties
        return int(self._center_ids[best]), float(row[best])

    def candidate_list(self, query_id, *, chunk_size=kernels.DEFAULT_CHUNK_SIZE,
                       backend=None) -> CandidateList:
        """Adjusted candidate list of a single query, for inspection."""
        matches = np.nonzero(self.query_ids == np.uint64(query_id))[0]
        if len(matches) == 0:
            raise InvariantViolation(f"unknown query id {query_id}")
        qpos = int(matches[0])
        scores, positions = kernels.topk_search(
            self.query_matrix[qpos:qpos + 1], self.index_matrix, self.config.k,
            chunk_size=chunk_size, backend=backend,
        )
        return self._rerank_one(int(query_id), qpos, scores[0], positions[0])

    def predict(self, *, threads=1, chunk_size=kernels.DEFAULT_CHUNK_SIZE,
                backend=None, collect_candidates=False):
        """Predict every query; returns Predictions sorted by query id.

        With collect_candidates, also returns the per-query adjusted
        CandidateLists for score-decomposition checks.
        """
        scores, positions = kernels.topk_search(
            self.query_matrix, self.index_matrix, self.config.k,
            chunk_size=chunk_size, threads=threads, backend=backend,
        )
        predictions = []
        candidate_lists = []
        for qpos, query_id in enumerate(self.query_ids):
            query_id = int(query_id)
            try:
                cands = self._rerank_one(query_id, qpos, scores[qpos], positions[qpos])
                top1 = self._top1_pair(qpos) if self.config.inject_top1 else None
                agg = aggregate(cands, top1, self.config)
            except LandrecError as exc:
                raise type(exc)(f"query {query_id}: {exc}") from exc
            if agg.best is None:
                predictions.append(Prediction(query_id, None, 0.0))
            else:
                predictions.append(Prediction(query_id, agg.best[0], agg.best[1]))
            if collect_candidates:
                candidate_lists.append(cands)
        if collect_candidates:
            return predictions, candidate_lists
        return predictions

    def _rerank_one(self, query_id, qpos, scores, positions) -> CandidateList:
        entries = []
        for score, pos in zip(scores, positions):
            image_id = int(self.index_ids[pos])
            landmark = self.labels.get(image_id)
            if landmark is None:
                raise MissingLabel(f"index image {image_id} has no landmark label")
            landmark = int(landmark)
            term = 0.0
            if self.config.use_logit:
                if self.config.logit_mode == QUERY_LOGIT:
                    col = self._center_col.get(landmark)
                    if col is None:
                        raise MissingLogit(f"no class center for landmark {landmark}")
                    term = float(self._query_logit_matrix[qpos, col])
                else:
                    if image_id not in self._index_logit_table:
                        raise MissingLogit(
                            f"no precomputed logit for index image {image_id}"
                        )
                    term = self._index_logit_table[image_id]
            penalty = 0.0
            if self.config.use_distractor:
                if self.distractor_map is None:
                    raise MissingDistractor("distractor stage enabled but no map given")
                penalty = self.distractor_map[image_id]
            entries.append(CandidateEntry(
                image_id=image_id,
                landmark_id=landmark,
                raw_score=float(score),
                adjusted_score=float(score) + term - penalty,
            ))
        return CandidateList(query_id=query_id, entries=tuple(entries))

    @classmethod
    def from_manifest(cls, manifest: Manifest, config: PipelineConfig = PipelineConfig(),
                      distractor_map: Optional[DistractorMap] = None):
        cache = {}

        def load(role, model):
            key = f"{role}:{model}"
            if key not in cache:
                cache[key] = manifest.load_embeddings(key)
            return cache[key]

        index_sets = [load("index", m) for m in manifest.model_names]
        query_sets = [load("query", m) for m in manifest.model_names]
        labels = manifest.load_labels()
        center_sets, cls_query_sets, cls_index_sets = (), (), ()
        if config.use_logit or config.inject_top1:
            center_sets = tuple(manifest.load_centers(m)
                                for m in manifest.classification_models)
            cls_query_sets = tuple(load("query", m)
                                   for m in manifest.classification_models)
            if config.use_logit and config.logit_mode == INDEX_LOGIT:
                cls_index_sets = tuple(load("index", m)
                                       for m in manifest.classification_models)
        return cls(
            index_sets=index_sets,
            query_sets=query_sets,
            labels=labels,
            config=config,
            distractor_map=distractor_map,
            center_sets=center_sets,
            cls_query_sets=cls_query_sets,
            cls_index_sets=cls_index_sets,
        )


def predict_all(manifest: Manifest, config: PipelineConfig = PipelineConfig(),
                distractor_map: Optional[DistractorMap] = None, *,
                threads=1, chunk_size=kernels.DEFAULT_CHUNK_SIZE, backend=None):
    """Load a manifest and predict one (landmark, confidence) per query."""
    pipeline = RecognitionPipeline.from_manifest(manifest, config, distractor_map)
    return pipeline.predict(threads=threads, chunk_size=chunk_size, backend=backend)
