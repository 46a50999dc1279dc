"""Synthetic index/query/distractor fixtures.

Desk-scale stand-in for the real index/query/non-landmark splits. The
geometry plants every failure mode the re-ranking stages exist to fix:

* landmark samples are unit-normalized perturbations of per-landmark
  center directions;
* the distractor pool clusters around a few "junk concept" directions
  (burst-shot non-landmark imagery is never i.i.d.);
* junk index images sit in groups that share one junk concept and one
  real landmark label -- planted false matches. Their anchor leans
  toward the labeled landmark's center, so they are hard negatives that
  classification logits alone cannot separate, while their pool
  correlation gives them distinctly high distractor scores;
* junk queries are drawn near the same anchors, so without the
  distractor penalty they retrieve whole groups of planted images with
  landmark-query-level confidence.

A noise parameter s perturbs a unit direction u as
``normalize(u + s * g / sqrt(dim))`` with g standard normal, so s is the
expected noise norm and cos(sample, u) is about 1/sqrt(1 + s^2).
"""

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import InvalidSpec
from .metrics import GroundTruth, write_ground_truth
from .store import (
    EmbeddingSet,
    LabelTable,
    Manifest,
    write_embeddings,
    write_labels,
    write_manifest,
)

# pool images per junk concept; junk index images per planted group; and
# the (concept, landmark) mixing weights of the planted anchors. Planted
# index images sit mostly on their junk concept (so the distractor penalty
# catches them); junk queries carry a real landmark component as well (so
# classification logits alone cannot reject them).
POOL_PER_CONCEPT = 8
JUNK_GROUP_SIZE = 8
JUNK_INDEX_MIX = (0.85, 0.40)
JUNK_QUERY_MIX = (0.55, 0.70)


@dataclass(frozen=True)
class SyntheticSpec:
    seed: int = 42
    dim: int = 64
    n_landmarks: int = 20
    index_per_landmark: int = 10
    n_queries_landmark: int = 50
    n_queries_junk: int = 50
    n_distractors: int = 200
    n_junk_index: int = 20
    intra_class_noise: float = 0.35
    n_models: int = 2
    model_disagreement: float = 0.9

    def __post_init__(self):
        if self.dim < 2:
            raise InvalidSpec(f"dim must be >= 2, got {self.dim}")
        if self.n_models < 1:
            raise InvalidSpec(f"n_models must be >= 1, got {self.n_models}")
        for name in ("n_landmarks", "index_per_landmark", "n_queries_landmark",
                     "n_queries_junk", "n_distractors", "n_junk_index"):
            if getattr(self, name) < 0:
                raise InvalidSpec(f"{name} must be >= 0")
        if self.intra_class_noise < 0 or self.model_disagreement < 0:
            raise InvalidSpec("noise parameters must be >= 0")
        if not np.isfinite(self.intra_class_noise) or not np.isfinite(self.model_disagreement):
            raise InvalidSpec("noise parameters must be finite")
        needs_landmarks = (self.index_per_landmark > 0 or self.n_queries_landmark > 0
                           or self.n_junk_index > 0)
        if needs_landmarks and self.n_landmarks < 1:
            raise InvalidSpec("landmark-bearing images need n_landmarks >= 1")
        if self.n_junk_index > 0 and self.n_distractors < 1:
            raise InvalidSpec("junk index images need a distractor pool to correlate with")


def _unit_rows(rng, count, dim) -> np.ndarray:
    rows = rng.standard_normal((count, dim))
    if count:
        rows /= np.linalg.norm(rows, axis=1)[:, np.newaxis]
    return rows


def _perturb(rng, base: np.ndarray, noise: float) -> np.ndarray:
    """Unit-normalized base + isotropic noise of expected norm ``noise``.

    noise = 0 returns the base rows unchanged (bit-exact), so the
    zero-noise fixture reproduces its centers exactly.
    """
    if noise == 0.0:
        return base.copy()
    dim = base.shape[1]
    jitter = rng.standard_normal(base.shape) * (noise / np.sqrt(dim))
    out = base + jitter
    if len(out):
        out /= np.linalg.norm(out, axis=1)[:, np.newaxis]
    return out


def generate_synthetic(spec: SyntheticSpec, out_dir) -> Manifest:
    """Write per-model EMB1 files, labels, centers, truth and a manifest.

    Fully deterministic given spec.seed: the RNG consumption order is
    fixed, so repeated runs are byte-identical.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(spec.seed)

    landmark_ids = np.arange(1, spec.n_landmarks + 1, dtype=np.uint64)
    centers_true = _unit_rows(rng, spec.n_landmarks, spec.dim)

    n_concepts = max(1, spec.n_distractors // POOL_PER_CONCEPT) if spec.n_distractors else 0
    concepts = _unit_rows(rng, n_concepts, spec.dim)
    pool_base = (concepts[np.arange(spec.n_distractors) % n_concepts]
                 if spec.n_distractors else np.empty((0, spec.dim)))
    pool_base = _perturb(rng, pool_base, spec.intra_class_noise)

    # planted groups: each shares one junk concept and one landmark label,
    # with separate anchors for the planted index images and the junk queries
    n_groups = 0
    index_anchors = np.empty((0, spec.dim))
    query_anchors = np.empty((0, spec.dim))
    group_labels = np.empty((0,), dtype=np.int64)
    if spec.n_junk_index > 0:
        n_groups = -(-spec.n_junk_index // JUNK_GROUP_SIZE)
        replace = n_groups > n_concepts
        group_concepts = rng.choice(n_concepts, size=n_groups, replace=replace)
        group_labels = rng.integers(0, spec.n_landmarks, size=n_groups)

        def mix_anchor(concept_w, landmark_w):
            mixed = (concept_w * concepts[group_concepts]
                     + landmark_w * centers_true[group_labels])
            return mixed / np.linalg.norm(mixed, axis=1)[:, np.newaxis]

        index_anchors = mix_anchor(*JUNK_INDEX_MIX)
        query_anchors = mix_anchor(*JUNK_QUERY_MIX)

    index_bases = []
    index_labels = []
    for li in range(spec.n_landmarks):
        for _ in range(spec.index_per_landmark):
            index_bases.append(centers_true[li])
            index_labels.append(int(landmark_ids[li]))
    for j in range(spec.n_junk_index):
        group = j % n_groups
        index_bases.append(index_anchors[group])
        index_labels.append(int(landmark_ids[group_labels[group]]))
    index_base = (np.vstack(index_bases) if index_bases
                  else np.empty((0, spec.dim)))
    index_base = _perturb(rng, index_base, spec.intra_class_noise)
    index_ids = np.arange(10_000, 10_000 + len(index_base), dtype=np.uint64)

    # queries: landmark-bearing ones round-robin over landmarks, junk ones
    # near the planted anchors (or raw concepts without planted groups)
    query_bases = []
    truth_entries = {}
    query_ids = np.arange(500_000, 500_000 + spec.n_queries_landmark + spec.n_queries_junk,
                          dtype=np.uint64)
    for i in range(spec.n_queries_landmark):
        li = i % spec.n_landmarks
        query_bases.append(centers_true[li])
        truth_entries[int(query_ids[i])] = int(landmark_ids[li])
    junk_choices = rng.integers(0, max(1, n_groups if n_groups else n_concepts),
                                size=spec.n_queries_junk)
    free_junk = _unit_rows(rng, spec.n_queries_junk, spec.dim)
    for i in range(spec.n_queries_junk):
        if n_groups:
            query_bases.append(query_anchors[junk_choices[i]])
        elif n_concepts:
            query_bases.append(concepts[junk_choices[i]])
        else:
            query_bases.append(free_junk[i])
        truth_entries[int(query_ids[spec.n_queries_landmark + i])] = None
    query_base = (np.vstack(query_bases) if query_bases
                  else np.empty((0, spec.dim)))
    query_base = _perturb(rng, query_base, spec.intra_class_noise)

    distractor_ids = np.arange(900_000, 900_000 + spec.n_distractors, dtype=np.uint64)

    roles = {}
    model_names = [f"m{i}" for i in range(spec.n_models)]
    for model in model_names:
        views = {
            "index": (index_ids, _perturb(rng, index_base, spec.model_disagreement)),
            "query": (query_ids, _perturb(rng, query_base, spec.model_disagreement)),
            "distractor": (distractor_ids,
                           _perturb(rng, pool_base, spec.model_disagreement)),
            "centers": (landmark_ids,
                        _perturb(rng, centers_true, spec.model_disagreement)),
        }
        for role, (ids, matrix) in views.items():
            name = f"{role}_{model}.emb"
            write_embeddings(
                EmbeddingSet(dim=spec.dim, ids=ids, matrix=matrix.astype(np.float32)),
                out_dir / name,
            )
            roles[f"{role}:{model}"] = name

    write_labels(LabelTable(entries=dict(zip((int(i) for i in index_ids), index_labels))),
                 out_dir / "labels.tsv")
    roles["labels"] = "labels.tsv"
    write_ground_truth(GroundTruth(entries=truth_entries), out_dir / "truth.tsv")
    roles["truth"] = "truth.tsv"

    manifest = Manifest(
        dim=spec.dim,
        model_names=tuple(model_names),
        classification_models=tuple(model_names),
        roles=roles,
        base_dir=out_dir,
    )
    write_manifest(manifest, out_dir / "manifest.json")
    return manifest
