"""Classification metrics, stratified folds, and evaluation reports.

All metric functions operate on a 4x4 confusion matrix (rows = true
stage, columns = predicted stage) plus a count of unparseable outputs,
which score as incorrect and are always reported explicitly, never
silently dropped.
"""

from __future__ import annotations

import io
import json
import math
import random
from dataclasses import dataclass, field
from typing import Iterable, Mapping, NamedTuple, Optional, Sequence

from .domain import STAGE_ORDER, CaseRecord, DatasetManifest, StageLabel


class MetricsError(Exception):
    pass


class ClassTooSmallError(MetricsError):
    def __init__(self, stage: StageLabel, count: int, k: int):
        super().__init__(
            f"{stage.canonical} has only {count} cases; cannot build {k} folds"
        )
        self.stage = stage


def _index(label: StageLabel) -> int:
    return label.value - 1


@dataclass(frozen=True)
class ConfusionMatrix:
    """4x4 grid of counts, rows true stage, columns predicted stage."""

    counts: tuple[tuple[int, ...], ...]
    unparseable_count: int = 0

    def __post_init__(self) -> None:
        if len(self.counts) != 4 or any(len(row) != 4 for row in self.counts):
            raise ValueError("confusion matrix must be 4x4")
        if any(v < 0 for row in self.counts for v in row) or self.unparseable_count < 0:
            raise ValueError("confusion matrix entries must be non-negative")

    @classmethod
    def from_pairs(
        cls, pairs: Iterable[tuple[StageLabel, Optional[StageLabel]]]
    ) -> "ConfusionMatrix":
        """Build from (true, predicted) pairs; None predictions count
        as unparseable."""
        grid = [[0] * 4 for _ in range(4)]
        unparseable = 0
        for true, predicted in pairs:
            if predicted is None:
                unparseable += 1
            else:
                grid[_index(true)][_index(predicted)] += 1
        return cls(counts=tuple(tuple(row) for row in grid), unparseable_count=unparseable)

    @property
    def grand_total(self) -> int:
        return sum(v for row in self.counts for v in row)

    @property
    def scored_total(self) -> int:
        return self.grand_total + self.unparseable_count

    @property
    def trace(self) -> int:
        return sum(self.counts[i][i] for i in range(4))

    def row_sum(self, label: StageLabel) -> int:
        return sum(self.counts[_index(label)])

    def col_sum(self, label: StageLabel) -> int:
        i = _index(label)
        return sum(row[i] for row in self.counts)

    def to_csv(self) -> str:
        buf = io.StringIO()
        header = "true\\pred," + ",".join(l.name for l in STAGE_ORDER)
        buf.write(header + ",unparseable\n")
        for label in STAGE_ORDER:
            row = self.counts[_index(label)]
            tail = str(self.unparseable_count) if label is STAGE_ORDER[0] else ""
            buf.write(f"{label.name}," + ",".join(str(v) for v in row) + f",{tail}\n")
        return buf.getvalue()


class ClassMetrics(NamedTuple):
    precision: float
    recall: float
    f1: float
    degenerate: bool


class SeverityDirection(NamedTuple):
    over_staged: int
    under_staged: int


def accuracy(cm: ConfusionMatrix) -> float:
    """Correct predictions over all scored cases (unparseable counted
    as incorrect)."""
    total = cm.scored_total
    if total == 0:
        return 0.0
    return cm.trace / total


def precision_recall_f1(cm: ConfusionMatrix, label: StageLabel) -> ClassMetrics:
    """One-vs-rest precision, recall, and F1 for one stage.

    Any 0/0 ratio resolves to 0 and flags the result degenerate.
    """
    tp = cm.counts[_index(label)][_index(label)]
    fp = cm.col_sum(label) - tp
    fn = cm.row_sum(label) - tp
    degenerate = False
    if tp + fp == 0:
        precision, degenerate = 0.0, True
    else:
        precision = tp / (tp + fp)
    if tp + fn == 0:
        recall, degenerate = 0.0, True
    else:
        recall = tp / (tp + fn)
    if precision + recall == 0:
        f1 = 0.0
        degenerate = True
    else:
        f1 = 2 * precision * recall / (precision + recall)
    return ClassMetrics(precision=precision, recall=recall, f1=f1, degenerate=degenerate)


def macro_f1(cm: ConfusionMatrix) -> float:
    """Unweighted mean of the four per-class F1 values."""
    return sum(precision_recall_f1(cm, label).f1 for label in STAGE_ORDER) / 4


def weighted_f1(cm: ConfusionMatrix) -> float:
    """Support-weighted mean of per-class F1, for comparison reporting."""
    total = cm.grand_total
    if total == 0:
        return 0.0
    return (
        sum(
            cm.row_sum(label) * precision_recall_f1(cm, label).f1
            for label in STAGE_ORDER
        )
        / total
    )


def severity_direction(cm: ConfusionMatrix) -> SeverityDirection:
    """Counts of over-staged (predicted > true) and under-staged cases."""
    over = 0
    under = 0
    for i in range(4):
        for j in range(4):
            if j > i:
                over += cm.counts[i][j]
            elif j < i:
                under += cm.counts[i][j]
    return SeverityDirection(over_staged=over, under_staged=under)


@dataclass(frozen=True)
class FoldSplit:
    fold_id: int
    train_ids: tuple[str, ...]
    test_ids: tuple[str, ...]


def stratified_kfold(
    manifest: DatasetManifest, k: int, seed: int
) -> list[FoldSplit]:
    """Per-class stratified split into k disjoint test chunks.

    Each class is shuffled by a seeded PRNG and cut into k chunks of
    floor(n/k) cases; the remainder goes entirely to the last fold's
    test chunk. Every case appears as test exactly once. k=1 means a
    single evaluate-all fold with an empty training split.
    """
    if k < 1:
        raise ValueError("k must be positive")
    for stage in STAGE_ORDER:
        count = manifest.class_counts.get(stage, 0)
        if count < k:
            raise ClassTooSmallError(stage, count, k)
    rng = random.Random(seed)
    test_chunks: list[list[str]] = [[] for _ in range(k)]
    for stage in STAGE_ORDER:
        ids = [c.case_id for c in manifest.cases_for(stage)]
        rng.shuffle(ids)
        quota = len(ids) // k
        for fold in range(k):
            if fold < k - 1:
                chunk = ids[fold * quota : (fold + 1) * quota]
            else:
                chunk = ids[(k - 1) * quota :]
            test_chunks[fold].extend(chunk)
    folds: list[FoldSplit] = []
    for fold in range(k):
        test_set = set(test_chunks[fold])
        train = tuple(c.case_id for c in manifest.cases if c.case_id not in test_set)
        folds.append(
            FoldSplit(
                fold_id=fold + 1,
                train_ids=train,
                test_ids=tuple(test_chunks[fold]),
            )
        )
    return folds


def fold_test_counts(
    manifest: DatasetManifest, folds: Sequence[FoldSplit]
) -> dict[StageLabel, tuple[int, ...]]:
    """Per-stage test-chunk sizes across folds (fold arithmetic view)."""
    by_id = {c.case_id: c.true_stage for c in manifest.cases}
    out: dict[StageLabel, tuple[int, ...]] = {}
    for stage in STAGE_ORDER:
        out[stage] = tuple(
            sum(1 for cid in fold.test_ids if by_id[cid] == stage) for fold in folds
        )
    return out


@dataclass(frozen=True)
class FoldMetrics:
    """Scores for one fold's test cases."""

    fold_id: int
    confusion: ConfusionMatrix
    accuracy: float
    per_class: Mapping[StageLabel, ClassMetrics]
    macro_f1: float
    weighted_f1: float

    @classmethod
    def from_pairs(
        cls, fold_id: int, pairs: Iterable[tuple[StageLabel, Optional[StageLabel]]]
    ) -> "FoldMetrics":
        cm = ConfusionMatrix.from_pairs(pairs)
        return cls(
            fold_id=fold_id,
            confusion=cm,
            accuracy=accuracy(cm),
            per_class={label: precision_recall_f1(cm, label) for label in STAGE_ORDER},
            macro_f1=macro_f1(cm),
            weighted_f1=weighted_f1(cm),
        )


class AggregateStat(NamedTuple):
    mean: float
    stdev: float


def _mean_stdev(values: Sequence[float]) -> AggregateStat:
    n = len(values)
    if n == 0:
        return AggregateStat(0.0, 0.0)
    mean = sum(values) / n
    if n < 2:
        return AggregateStat(mean, 0.0)
    variance = sum((v - mean) ** 2 for v in values) / (n - 1)
    return AggregateStat(mean, math.sqrt(variance))


@dataclass(frozen=True)
class EvalReport:
    """Per-fold metrics plus fold-level aggregate (mean ± sample stdev,
    computed over per-fold values rather than pooled counts)."""

    per_fold: tuple[FoldMetrics, ...]
    accuracy_agg: AggregateStat
    macro_f1_agg: AggregateStat
    weighted_f1_agg: AggregateStat
    stdev_degenerate: bool
    over_staged: int
    under_staged: int
    run_metadata: Mapping[str, object] = field(default_factory=dict)

    @classmethod
    def build(
        cls,
        per_fold: Sequence[FoldMetrics],
        run_metadata: Optional[Mapping[str, object]] = None,
    ) -> "EvalReport":
        over = sum(severity_direction(f.confusion).over_staged for f in per_fold)
        under = sum(severity_direction(f.confusion).under_staged for f in per_fold)
        return cls(
            per_fold=tuple(per_fold),
            accuracy_agg=_mean_stdev([f.accuracy for f in per_fold]),
            macro_f1_agg=_mean_stdev([f.macro_f1 for f in per_fold]),
            weighted_f1_agg=_mean_stdev([f.weighted_f1 for f in per_fold]),
            stdev_degenerate=len(per_fold) < 2,
            over_staged=over,
            under_staged=under,
            run_metadata=dict(run_metadata or {}),
        )


def report_to_json(report: EvalReport) -> str:
    """Deterministic JSON rendering (sorted keys, fixed separators)."""
    payload = {
        "schema_version": 1,
        "run_metadata": dict(report.run_metadata),
        "aggregate": {
            "accuracy": {"mean": report.accuracy_agg.mean, "stdev": report.accuracy_agg.stdev},
            "macro_f1": {"mean": report.macro_f1_agg.mean, "stdev": report.macro_f1_agg.stdev},
            "weighted_f1": {
                "mean": report.weighted_f1_agg.mean,
                "stdev": report.weighted_f1_agg.stdev,
            },
            "stdev_degenerate": report.stdev_degenerate,
            "over_staged": report.over_staged,
            "under_staged": report.under_staged,
        },
        "per_fold": [
            {
                "fold_id": f.fold_id,
                "confusion": [list(row) for row in f.confusion.counts],
                "unparseable": f.confusion.unparseable_count,
                "n_cases": f.confusion.scored_total,
                "n_correct": f.confusion.trace,
                "accuracy": f.accuracy,
                "macro_f1": f.macro_f1,
                "weighted_f1": f.weighted_f1,
                "per_class": {
                    label.name: {
                        "precision": m.precision,
                        "recall": m.recall,
                        "f1": m.f1,
                        "degenerate": m.degenerate,
                    }
                    for label, m in f.per_class.items()
                },
            }
            for f in report.per_fold
        ],
    }
    return json.dumps(payload, sort_keys=True, separators=(",", ": "), indent=1) + "\n"


def report_to_text(report: EvalReport) -> str:
    """Human-readable report table."""
    lines: list[str] = []
    meta = report.run_metadata
    lines.append("Evaluation report")
    lines.append("=================")
    for key in sorted(meta):
        lines.append(f"{key}: {meta[key]}")
    lines.append("")
    lines.append("fold   n  correct  unparse  accuracy  macro_f1  weighted_f1")
    for f in report.per_fold:
        cm = f.confusion
        lines.append(
            f"{f.fold_id:>4}{cm.scored_total:>5}{cm.trace:>9}"
            f"{cm.unparseable_count:>9}{f.accuracy:>10.4f}{f.macro_f1:>10.4f}"
            f"{f.weighted_f1:>13.4f}"
        )
    lines.append("")
    suffix = " (single fold; stdev degenerate)" if report.stdev_degenerate else ""
    lines.append(
        f"accuracy:    {report.accuracy_agg.mean:.4f} ± {report.accuracy_agg.stdev:.4f}{suffix}"
    )
    lines.append(
        f"macro F1:    {report.macro_f1_agg.mean:.4f} ± {report.macro_f1_agg.stdev:.4f}{suffix}"
    )
    lines.append(
        f"weighted F1: {report.weighted_f1_agg.mean:.4f} ± {report.weighted_f1_agg.stdev:.4f}{suffix}"
    )
    lines.append(
        f"over-staged: {report.over_staged}  under-staged: {report.under_staged}"
    )
    lines.append("")
    for f in report.per_fold:
        lines.append(f"confusion matrix, fold {f.fold_id} (rows true, cols predicted)")
        lines.append("        " + "".join(f"{l.name:>6}" for l in STAGE_ORDER))
        for label in STAGE_ORDER:
            row = f.confusion.counts[_index(label)]
            lines.append(f"{label.name:>6}  " + "".join(f"{v:>6}" for v in row))
        lines.append(f"unparseable: {f.confusion.unparseable_count}")
        lines.append("")
    return "\n".join(lines)
