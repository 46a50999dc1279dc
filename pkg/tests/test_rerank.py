import numpy as np
import pytest

from landrec.errors import (
    DimMismatch,
    IdMismatch,
    InvariantViolation,
    MissingDistractor,
    MissingLabel,
    MissingLogit,
)
from landrec.rerank import (
    AggregatedPrediction,
    CandidateEntry,
    CandidateList,
    DistractorMap,
    PipelineConfig,
    RecognitionPipeline,
    adjust_candidates,
    aggregate,
    build_distractor_map,
    label_candidates,
    logit_term,
    read_distractor_map,
    write_distractor_map,
)
from landrec.store import ClassCenterSet, EmbeddingSet, LabelTable
from landrec.vectors import ScoredCandidate, cosine, ensemble_concat

from conftest import random_unit_rows, unit


def embset(vectors, ids):
    vectors = np.asarray(vectors, dtype=np.float32)
    return EmbeddingSet(dim=vectors.shape[1], ids=np.asarray(ids, dtype=np.uint64),
                        matrix=vectors)


def with_dots(reference, dots):
    """Unit vectors whose dot against ``reference`` (a basis row) is prescribed."""
    dim = len(reference)
    rows = []
    for axis, value in enumerate(dots, start=1):
        row = np.zeros(dim)
        row[0] = value
        row[axis % (dim - 1) + 1] = np.sqrt(max(0.0, 1.0 - value * value))
        rows.append(row)
    return np.array(rows)


class TestBuildDistractorMap:
    def test_top3_mean_hand_case(self):
        index = embset([[1.0, 0, 0, 0, 0, 0]], ids=[7])
        pool = with_dots(np.zeros(6), [0.9, 0.5, 0.1, 0.0])
        dmap = build_distractor_map(index, embset(pool, ids=[1, 2, 3, 4]), n=3)
        assert dmap[7] == pytest.approx(0.5, abs=1e-6)

    def test_empty_pool_is_noop(self):
        index = embset(np.eye(2, 4), ids=[1, 2])
        pool = EmbeddingSet(dim=4, ids=np.array([], dtype=np.uint64),
                            matrix=np.empty((0, 4), dtype=np.float32))
        dmap = build_distractor_map(index, pool, n=3)
        assert dmap[1] == 0.0 and dmap[2] == 0.0

    def test_identical_plus_orthogonal(self):
        index = embset([[1.0, 0, 0, 0]], ids=[5])
        pool = embset([[1.0, 0, 0, 0], [0, 1.0, 0, 0], [0, 0, 1.0, 0]], ids=[1, 2, 3])
        dmap = build_distractor_map(index, pool, n=3)
        assert dmap[5] == pytest.approx(1.0 / 3.0, abs=1e-6)

    def test_small_pool_averages_all(self):
        index = embset([[1.0, 0, 0, 0]], ids=[5])
        pool = embset(with_dots(np.zeros(4), [0.8, 0.4]), ids=[1, 2])
        dmap = build_distractor_map(index, pool, n=3)
        assert dmap[5] == pytest.approx(0.6, abs=1e-6)

    def test_dim_mismatch(self):
        index = embset(np.eye(1, 4), ids=[1])
        pool = embset(np.eye(1, 5), ids=[1])
        with pytest.raises(DimMismatch):
            build_distractor_map(index, pool, n=3)

    def test_covers_every_index_image(self):
        rng = np.random.default_rng(0)
        index = embset(random_unit_rows(rng, 17, 8), ids=range(17))
        pool = embset(random_unit_rows(rng, 9, 8), ids=range(9))
        dmap = build_distractor_map(index, pool, n=3)
        assert set(dmap.scores) == set(range(17))

    def test_tsv_round_trip(self, tmp_path):
        dmap = DistractorMap(scores={3: 0.125, 1: -0.5, 20: 0.999999})
        path = tmp_path / "d.tsv"
        write_distractor_map(dmap, path)
        text = path.read_text()
        assert text == "1\t-0.500000\n3\t0.125000\n20\t0.999999\n"
        assert read_distractor_map(path).scores == pytest.approx(dmap.scores)

    def test_out_of_range_rejected(self):
        with pytest.raises(InvariantViolation):
            DistractorMap(scores={1: 1.5})

    def test_missing_lookup(self):
        with pytest.raises(MissingDistractor):
            DistractorMap(scores={1: 0.0})[2]


class TestLogitTerm:
    def test_single_model(self):
        term = logit_term((10, 12), query_logits={"m0": {12: 0.7}})
        assert term == pytest.approx(0.7)

    def test_four_model_mean(self):
        tables = {f"m{i}": {12: v} for i, v in enumerate([0.8, 0.6, 0.4, 0.2])}
        assert logit_term((10, 12), query_logits=tables) == pytest.approx(0.5)

    def test_index_mode_ignores_query(self):
        term = logit_term((10, 12), index_logits={10: 0.35}, mode="index_logit")
        assert term == pytest.approx(0.35)

    def test_missing_model_logit(self):
        with pytest.raises(MissingLogit, match="m1.*landmark 12"):
            logit_term((10, 12), query_logits={"m0": {12: 0.7}, "m1": {13: 0.1}})

    def test_missing_index_logit(self):
        with pytest.raises(MissingLogit, match="image 10"):
            logit_term((10, 12), index_logits={11: 0.2}, mode="index_logit")

    def test_unknown_mode(self):
        with pytest.raises(ValueError):
            logit_term((10, 12), query_logits={"m0": {12: 0.7}}, mode="both")


def candidates(query_id, entries):
    return CandidateList(query_id=query_id, entries=tuple(
        CandidateEntry(image_id=i, landmark_id=lm, raw_score=s, adjusted_score=s)
        for i, lm, s in entries))


class TestAdjustCandidates:
    def test_formula_hand_case(self):
        raw = candidates(1, [(100, 12, 0.82)])
        out = adjust_candidates(
            raw,
            dmap=DistractorMap(scores={100: 0.30}),
            query_logits={"m0": {12: 0.5}},
        )
        assert out.entries[0].adjusted_score == pytest.approx(1.02, abs=1e-9)
        assert out.entries[0].raw_score == pytest.approx(0.82)

    def test_disabled_stages_are_noop(self):
        raw = candidates(1, [(100, 12, 0.82), (101, 5, 0.3)])
        config = PipelineConfig(use_logit=False, use_distractor=False)
        out = adjust_candidates(raw, config=config)
        for before, after in zip(raw.entries, out.entries):
            assert after.adjusted_score == before.raw_score

    def test_negative_scores_are_legal(self):
        raw = candidates(1, [(100, 12, 0.5)])
        out = adjust_candidates(
            raw,
            dmap=DistractorMap(scores={100: 0.9}),
            query_logits={"m0": {12: 0.0}},
        )
        assert out.entries[0].adjusted_score == pytest.approx(-0.4, abs=1e-9)

    def test_missing_distractor_entry(self):
        raw = candidates(1, [(100, 12, 0.5)])
        with pytest.raises(MissingDistractor):
            adjust_candidates(raw, dmap=DistractorMap(scores={}),
                              query_logits={"m0": {12: 0.0}})

    def test_enabled_stage_requires_map(self):
        raw = candidates(1, [(100, 12, 0.5)])
        with pytest.raises(MissingDistractor):
            adjust_candidates(raw, dmap=None, query_logits={"m0": {12: 0.0}})

    def test_order_preserved(self):
        raw = candidates(1, [(100, 12, 0.9), (101, 5, 0.8), (102, 12, 0.7)])
        config = PipelineConfig(use_logit=False, use_distractor=True)
        out = adjust_candidates(raw, dmap=DistractorMap(
            scores={100: 0.9, 101: 0.0, 102: 0.0}), config=config)
        assert [e.image_id for e in out.entries] == [100, 101, 102]

    def test_raising_distractor_by_delta(self):
        raw = candidates(1, [(100, 12, 0.9)])
        config = PipelineConfig(use_logit=False)
        low = adjust_candidates(raw, dmap=DistractorMap(scores={100: 0.1}), config=config)
        high = adjust_candidates(raw, dmap=DistractorMap(scores={100: 0.35}), config=config)
        drop = low.entries[0].adjusted_score - high.entries[0].adjusted_score
        assert drop == pytest.approx(0.25, abs=1e-12)
        agg_low = aggregate(low, config=config)
        agg_high = aggregate(high, config=config)
        assert agg_high.landmark_scores[12] <= agg_low.landmark_scores[12]


class TestAggregate:
    def test_accumulation_hand_case(self):
        lst = candidates(1, [(1, 3, 0.9), (2, 3, 0.7), (3, 5, 1.0)])
        agg = aggregate(lst, config=PipelineConfig(inject_top1=False))
        assert agg.landmark_scores == pytest.approx({3: 1.6, 5: 1.0})
        assert agg.best == (3, pytest.approx(1.6))

    def test_injection_flips_argmax(self):
        lst = candidates(1, [(1, 3, 0.9), (2, 3, 0.7), (3, 5, 1.0)])
        agg = aggregate(lst, top1=(5, 0.8))
        assert agg.landmark_scores == pytest.approx({3: 1.6, 5: 1.8})
        assert agg.best == (5, pytest.approx(1.8))

    def test_injection_only(self):
        agg = aggregate(candidates(1, []), top1=(9, 0.4))
        assert agg.best == (9, pytest.approx(0.4))

    def test_no_candidates_no_injection(self):
        agg = aggregate(candidates(1, []), top1=None)
        assert agg.best is None
        agg = aggregate(candidates(1, [(1, 3, 0.5)]), top1=(9, 0.4),
                        config=PipelineConfig(inject_top1=False))
        assert agg.best == (3, pytest.approx(0.5))

    def test_tie_break_smaller_landmark(self):
        lst = candidates(1, [(1, 7, 0.5), (2, 4, 0.5)])
        agg = aggregate(lst, config=PipelineConfig(inject_top1=False))
        assert agg.best[0] == 4

    def test_permutation_invariance_exact(self):
        rng = np.random.default_rng(0)
        entries = [(i, int(rng.integers(1, 4)), float(rng.standard_normal()))
                   for i in range(12)]
        base = aggregate(candidates(1, entries), config=PipelineConfig(inject_top1=False))
        for seed in range(20):
            rng2 = np.random.default_rng(seed)
            shuffled = list(entries)
            rng2.shuffle(shuffled)
            agg = aggregate(candidates(1, shuffled),
                            config=PipelineConfig(inject_top1=False))
            assert agg.landmark_scores == base.landmark_scores  # bit-exact
            assert agg.best == base.best

    def test_linearity(self):
        rng = np.random.default_rng(1)
        first = [(i, int(rng.integers(1, 5)), float(rng.standard_normal()))
                 for i in range(8)]
        second = [(i + 100, int(rng.integers(1, 5)), float(rng.standard_normal()))
                  for i in range(8)]
        cfg = PipelineConfig(inject_top1=False)
        combined = aggregate(candidates(1, first + second), config=cfg)
        agg_a = aggregate(candidates(1, first), config=cfg)
        agg_b = aggregate(candidates(1, second), config=cfg)
        for lm, total in combined.landmark_scores.items():
            parts = agg_a.landmark_scores.get(lm, 0.0) + agg_b.landmark_scores.get(lm, 0.0)
            assert total == pytest.approx(parts, abs=1e-9)


class TestLabelCandidates:
    def test_labels_attached(self):
        scored = [ScoredCandidate(10, 0.9), ScoredCandidate(11, 0.8)]
        labels = LabelTable(entries={10: 3, 11: 5})
        lst = label_candidates(77, scored, labels)
        assert lst.query_id == 77
        assert [(e.image_id, e.landmark_id) for e in lst.entries] == [(10, 3), (11, 5)]

    def test_missing_label(self):
        with pytest.raises(MissingLabel, match="12"):
            label_candidates(1, [ScoredCandidate(12, 0.5)], LabelTable(entries={}))


def single_model_pipeline(index_rows, index_ids, labels, query_rows, query_ids,
                          centers_rows=None, center_ids=None, config=None,
                          dmap=None):
    index_sets = [embset(index_rows, index_ids)]
    query_sets = [embset(query_rows, query_ids)]
    center_sets = ()
    cls_query_sets = ()
    if centers_rows is not None:
        center_sets = (ClassCenterSet("m0", embset(centers_rows, center_ids)),)
        cls_query_sets = (query_sets[0],)
    return RecognitionPipeline(
        index_sets=index_sets,
        query_sets=query_sets,
        labels=LabelTable(entries=labels),
        config=config or PipelineConfig(),
        distractor_map=dmap,
        center_sets=center_sets,
        cls_query_sets=cls_query_sets,
        cls_index_sets=(index_sets[0],) if centers_rows is not None else (),
    )


class TestPipeline:
    def test_degenerate_config_is_nearest_neighbor(self):
        rng = np.random.default_rng(2)
        index_rows = random_unit_rows(rng, 30, 8)
        query_rows = random_unit_rows(rng, 5, 8)
        index_ids = list(range(100, 130))
        labels = {i: (i % 4) + 1 for i in index_ids}
        config = PipelineConfig(k=1, use_logit=False, use_distractor=False,
                                inject_top1=False)
        pipe = single_model_pipeline(index_rows, index_ids, labels,
                                     query_rows, range(5), config=config)
        predictions = pipe.predict()
        ref = index_rows.astype(np.float64)
        for qpos, pred in enumerate(predictions):
            dots = ref @ query_rows[qpos]
            nearest = int(np.argmax(dots))
            assert pred.landmark_id == labels[index_ids[nearest]]
            assert pred.confidence == pytest.approx(float(dots[nearest]), abs=1e-6)

    def test_noop_config_equals_vote_oracle(self):
        # plain top-k label-vote-by-score-sum reimplementation
        config = PipelineConfig(k=5, use_logit=False, use_distractor=False,
                                inject_top1=False)
        for seed in range(15):
            rng = np.random.default_rng(seed)
            n = int(rng.integers(2, 51))
            index_rows = random_unit_rows(rng, n, 6)
            query_rows = random_unit_rows(rng, 4, 6)
            index_ids = sorted(int(i) for i in rng.choice(1000, size=n, replace=False))
            labels = {i: int(rng.integers(1, 6)) for i in index_ids}
            pipe = single_model_pipeline(index_rows, index_ids, labels,
                                         query_rows, range(4), config=config)
            predictions = pipe.predict()
            normalized = index_rows / np.linalg.norm(index_rows, axis=1)[:, np.newaxis]
            for qpos, pred in enumerate(predictions):
                q = query_rows[qpos] / np.linalg.norm(query_rows[qpos])
                dots = normalized @ q
                order = sorted(range(n), key=lambda i: (-dots[i], index_ids[i]))[:5]
                votes = {}
                for i in order:
                    votes.setdefault(labels[index_ids[i]], []).append(float(dots[i]))
                sums = {lm: sum(v) for lm, v in votes.items()}
                best = min(sums, key=lambda lm: (-sums[lm], lm))
                assert pred.landmark_id == best
                assert pred.confidence == pytest.approx(sums[best], abs=1e-6)

    def test_junk_candidate_demoted_by_distractor_penalty(self):
        # hand fixture: 2 landmarks, 1 junk index image correlated with the
        # distractor pool but labeled as landmark 2; all expected values
        # recomputed below from raw cosines and the score formula
        u1 = np.array([1.0, 0, 0, 0])
        u2 = np.array([0, 1.0, 0, 0])
        concept = np.array([0, 0, 1.0, 0])
        junk = unit(0.55 * u1 + 0.9 * concept)  # attracted to landmark-1 queries
        index_rows = np.array([
            u1,
            unit(u1 + 0.15 * np.array([0, 0, 0, 1.0])),
            u2,
            unit(u2 + 0.15 * np.array([0, 0, 0, 1.0])),
            junk,
        ])
        index_ids = [1, 2, 3, 4, 5]
        labels = {1: 1, 2: 1, 3: 2, 4: 2, 5: 2}
        pool_rows = np.array([concept, unit(concept + 0.1 * np.array([0, 0, 0, 1.0]))])
        query = unit(u1 + 0.05 * np.array([0, 0, 0, 1.0]))
        centers = np.array([u1, u2])

        index_set = embset(index_rows, index_ids)
        dmap = build_distractor_map(index_set, embset(pool_rows, ids=[1, 2]), n=3)
        pipe = single_model_pipeline(index_rows, index_ids, labels,
                                     [query], [50], centers_rows=centers,
                                     center_ids=[1, 2], dmap=dmap)
        predictions, lists = pipe.predict(collect_candidates=True)
        entries = {e.image_id: e for e in lists[0].entries}
        assert 5 in entries  # junk image retrieved at k=7

        # oracle: recompute every term from the raw vectors
        for entry in lists[0].entries:
            pos = index_ids.index(entry.image_id)
            raw = cosine(query, index_rows[pos])
            logit = cosine(query, centers[labels[entry.image_id] - 1])
            penalty = np.sort(pool_rows @ index_rows[pos] /
                              np.linalg.norm(index_rows[pos]))[::-1][:3].mean()
            assert entry.raw_score == pytest.approx(raw, abs=1e-6)
            assert entry.adjusted_score == pytest.approx(raw + logit - penalty, abs=1e-5)

        true_entries = [entries[1], entries[2]]
        assert all(entries[5].adjusted_score < t.adjusted_score for t in true_entries)
        assert predictions[0].landmark_id == 1

    def test_decomposition_invariant(self):
        rng = np.random.default_rng(4)
        index_rows = random_unit_rows(rng, 25, 8)
        query_rows = random_unit_rows(rng, 6, 8)
        index_ids = list(range(25))
        labels = {i: (i % 3) + 1 for i in index_ids}
        centers = random_unit_rows(rng, 3, 8)
        pool = random_unit_rows(rng, 10, 8)
        dmap = build_distractor_map(embset(index_rows, index_ids),
                                    embset(pool, ids=range(10)), n=3)
        pipe = single_model_pipeline(index_rows, index_ids, labels, query_rows,
                                     range(6), centers_rows=centers,
                                     center_ids=[1, 2, 3], dmap=dmap)
        _, lists = pipe.predict(collect_candidates=True)
        for clist, qrow in zip(lists, query_rows):
            for entry in clist.entries:
                logit = cosine(qrow, centers[labels[entry.image_id] - 1])
                residual = (entry.adjusted_score - entry.raw_score
                            + dmap[entry.image_id] - logit)
                assert abs(residual) <= 1e-6

    def test_index_logit_mode(self):
        rng = np.random.default_rng(7)
        index_rows = random_unit_rows(rng, 12, 6)
        query_rows = random_unit_rows(rng, 3, 6)
        index_ids = list(range(12))
        labels = {i: (i % 2) + 1 for i in index_ids}
        centers = random_unit_rows(rng, 2, 6)
        config = PipelineConfig(logit_mode="index_logit", use_distractor=False)
        pipe = single_model_pipeline(index_rows, index_ids, labels, query_rows,
                                     range(3), centers_rows=centers,
                                     center_ids=[1, 2], config=config)
        _, lists = pipe.predict(collect_candidates=True)
        for clist in lists:
            for entry in clist.entries:
                own_logit = cosine(index_rows[entry.image_id],
                                   centers[labels[entry.image_id] - 1])
                assert (entry.adjusted_score - entry.raw_score
                        == pytest.approx(own_logit, abs=1e-6))

    def test_query_error_is_tagged(self):
        rng = np.random.default_rng(8)
        index_rows = random_unit_rows(rng, 4, 6)
        query_rows = random_unit_rows(rng, 2, 6)
        labels = {0: 1, 1: 1, 2: 1}  # image 3 unlabeled
        config = PipelineConfig(use_logit=False, use_distractor=False,
                                inject_top1=False)
        pipe = single_model_pipeline(index_rows, range(4), labels, query_rows,
                                     [30, 31], config=config)
        with pytest.raises(MissingLabel, match="query 3[01]"):
            pipe.predict()

    def test_misaligned_models_rejected(self):
        rng = np.random.default_rng(9)
        a = embset(random_unit_rows(rng, 3, 4), ids=[1, 2, 3])
        b = embset(random_unit_rows(rng, 3, 4), ids=[1, 2, 4])
        q = embset(random_unit_rows(rng, 1, 4), ids=[9])
        with pytest.raises(IdMismatch, match="3 vs 4"):
            RecognitionPipeline(
                index_sets=[a, b], query_sets=[q, q],
                labels=LabelTable(entries={1: 1, 2: 1, 3: 1, 4: 1}),
                config=PipelineConfig(use_logit=False, use_distractor=False,
                                      inject_top1=False),
            )

    def test_missing_center_for_candidate_landmark(self):
        rng = np.random.default_rng(10)
        index_rows = random_unit_rows(rng, 4, 6)
        query_rows = random_unit_rows(rng, 1, 6)
        labels = {i: i + 1 for i in range(4)}  # landmarks 1..4
        centers = random_unit_rows(rng, 2, 6)  # only landmarks 1, 2
        config = PipelineConfig(use_distractor=False)
        pipe = single_model_pipeline(index_rows, range(4), labels, query_rows,
                                     [1], centers_rows=centers,
                                     center_ids=[1, 2], config=config)
        with pytest.raises(MissingLogit):
            pipe.predict()

    def test_ensemble_matches_op_level_concat(self):
        rng = np.random.default_rng(11)
        model_a = random_unit_rows(rng, 5, 4)
        model_b = random_unit_rows(rng, 5, 6)
        sets = [embset(model_a, range(5)), embset(model_b, range(5))]
        from landrec.rerank import ensemble_matrix
        fused = ensemble_matrix(sets)
        for row in range(5):
            expect = ensemble_concat([model_a[row], model_b[row]])
            assert np.array_equal(fused[row], expect)  # bit-identical paths
