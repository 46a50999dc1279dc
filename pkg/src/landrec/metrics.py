"""Global Average Precision and top-1 accuracy over ranked predictions.

GAP follows the micro-AP convention: one prediction per query, all
predictions ranked globally by confidence, precision-at-rank averaged over
correct rows and normalized by the number of landmark-bearing queries.
"""

from dataclasses import dataclass, field
from typing import Optional

from .errors import DuplicateId, ParseError, UnknownQuery
from .store import _parse_uint, _U32_MAX, _U64_MAX, atomic_write_text


@dataclass(frozen=True)
class Prediction:
    """One query's predicted landmark and confidence.

    landmark_id None is an abstention: the row is written with empty
    landmark/confidence fields and never occupies a rank in GAP.
    """

    query_id: int
    landmark_id: Optional[int]
    confidence: float = 0.0


@dataclass(frozen=True)
class GroundTruth:
    """query id -> landmark id; None marks a non-landmark query."""

    entries: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.entries)

    def landmark_query_count(self) -> int:
        return sum(1 for lm in self.entries.values() if lm is not None)


def gap(predictions, truth: GroundTruth) -> float:
    """Global Average Precision of a prediction list against ground truth.

    Predictions are sorted by confidence descending (ties by query id
    ascending); empty-landmark rows are skipped and occupy no rank. The
    result is (1/M) * sum_i P(i) * rel(i) with M the number of
    landmark-bearing queries in the truth, rel(i) = 1 iff row i names the
    correct landmark, and P(i) the precision among the first i ranked rows.
    """
    for pred in predictions:
        if pred.query_id not in truth.entries:
            raise UnknownQuery(f"prediction for unknown query {pred.query_id}")
    total = truth.landmark_query_count()
    if total == 0:
        return 0.0
    ranked = sorted(
        (p for p in predictions if p.landmark_id is not None),
        key=lambda p: (-p.confidence, p.query_id),
    )
    correct = 0
    ap_sum = 0.0
    for rank, pred in enumerate(ranked, start=1):
        if truth.entries[pred.query_id] == pred.landmark_id:
            correct += 1
            ap_sum += correct / rank
    return ap_sum / total


def top1_accuracy(predictions, truth: GroundTruth) -> float:
    """Fraction of landmark-bearing queries predicted correctly.

    Non-landmark queries are excluded from the denominator; a landmark
    query with no prediction row (or an abstention) counts as wrong.
    """
    for pred in predictions:
        if pred.query_id not in truth.entries:
            raise UnknownQuery(f"prediction for unknown query {pred.query_id}")
    total = truth.landmark_query_count()
    if total == 0:
        return 0.0
    by_query = {p.query_id: p for p in predictions}
    hits = 0
    for query_id, landmark in truth.entries.items():
        if landmark is None:
            continue
        pred = by_query.get(query_id)
        if pred is not None and pred.landmark_id == landmark:
            hits += 1
    return hits / total


def write_predictions(predictions, path):
    """Predictions TSV: query_id TAB landmark_id TAB confidence (6 decimals).

    Abstentions are written with empty landmark and confidence fields.
    """
    lines = []
    for p in sorted(predictions, key=lambda p: p.query_id):
        if p.landmark_id is None:
            lines.append(f"{p.query_id}\t\t\n")
        else:
            lines.append(f"{p.query_id}\t{p.landmark_id}\t{p.confidence:.6f}\n")
    atomic_write_text(path, "".join(lines))


def read_predictions(path) -> list:
    rows = []
    seen = set()
    with open(path, "r", encoding="utf-8", newline="") as fh:
        for row, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            cols = line.split("\t")
            if len(cols) != 3:
                raise ParseError(f"{path}: row {row}: expected 3 columns, got {len(cols)}")
            query_id = _parse_uint(cols[0], _U64_MAX, row, 1, path)
            if query_id in seen:
                raise DuplicateId(f"{path}: row {row}: duplicate query id {query_id}")
            seen.add(query_id)
            if cols[1] == "":
                rows.append(Prediction(query_id, None, 0.0))
                continue
            landmark = _parse_uint(cols[1], _U32_MAX, row, 2, path)
            try:
                confidence = float(cols[2])
            except ValueError:
                raise ParseError(
                    f"{path}: row {row}, column 3: {cols[2]!r} is not a number"
                ) from None
            rows.append(Prediction(query_id, landmark, confidence))
    return rows


def write_ground_truth(truth: GroundTruth, path):
    """Truth TSV: query_id TAB landmark_id; non-landmark queries get an empty field."""
    lines = []
    for query_id, landmark in sorted(truth.entries.items()):
        lines.append(f"{query_id}\t{'' if landmark is None else landmark}\n")
    atomic_write_text(path, "".join(lines))


def read_ground_truth(path) -> GroundTruth:
    entries = {}
    with open(path, "r", encoding="utf-8", newline="") as fh:
        for row, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            cols = line.split("\t")
            if len(cols) != 2:
                raise ParseError(f"{path}: row {row}: expected 2 columns, got {len(cols)}")
            query_id = _parse_uint(cols[0], _U64_MAX, row, 1, path)
            if query_id in entries:
                raise DuplicateId(f"{path}: row {row}: duplicate query id {query_id}")
            landmark = None if cols[1] == "" else _parse_uint(cols[1], _U32_MAX, row, 2, path)
            entries[query_id] = landmark
    return GroundTruth(entries=entries)
