# -*- coding: utf-8 -*-
"""
Expression spotting engine - evaluation

Core Features:
1. Inclusive-frame temporal IoU
2. Greedy one-to-one proposal / ground-truth matching
3. Pooled precision, recall and F1 with 0/0 -> 0
4. Micro-expression F1 at 0.5 s, at 1.0 s and from the optimal proposal set
"""

from dataclasses import asdict, dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import structlog

from dataio import ExpressionClass, GroundTruthInterval, VideoRecord

logger = structlog.get_logger(__name__)

Interval = Tuple[int, int]

ME_SECONDS = 0.5
ME_RELAXED_SECONDS = 1.0


def temporal_iou(a: Interval, b: Interval) -> float:
    """IoU of two 1-indexed inclusive frame intervals"""
    overlap = max(0, min(a[1], b[1]) - max(a[0], b[0]) + 1)
    union = (a[1] - a[0] + 1) + (b[1] - b[0] + 1) - overlap
    return overlap / union if union > 0 else 0.0


def _safe_ratio(numerator: float, denominator: float) -> float:
    return numerator / denominator if denominator > 0 else 0.0


@dataclass
class Counts:
    tp: int = 0
    fp: int = 0
    fn: int = 0

    def __add__(self, other: "Counts") -> "Counts":
        return Counts(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn)

    @property
    def precision(self) -> float:
        return _safe_ratio(self.tp, self.tp + self.fp)

    @property
    def recall(self) -> float:
        return _safe_ratio(self.tp, self.tp + self.fn)

    @property
    def f1(self) -> float:
        return _safe_ratio(2 * self.precision * self.recall, self.precision + self.recall)


@dataclass
class MatchResult:
    counts: Counts
    # (proposal index in the caller's order, ground-truth index, iou)
    matches: List[Tuple[int, int, float]] = field(default_factory=list)

    @property
    def tp(self) -> int:
        return self.counts.tp

    @property
    def fp(self) -> int:
        return self.counts.fp

    @property
    def fn(self) -> int:
        return self.counts.fn


def _interval(item) -> Interval:
    if isinstance(item, (tuple, list)):
        return int(item[0]), int(item[1])
    return item.onset_frame, item.offset_frame


def ranking_order(proposals: Sequence) -> List[int]:
    """Descending confidence, ties broken by onset frame"""
    return sorted(range(len(proposals)), key=lambda i: (-proposals[i].confidence, proposals[i].onset_frame,
                                                      proposals[i].offset_frame))


def match_and_count(proposals: Sequence, ground_truth: Sequence, k_eval: float = 0.5) -> MatchResult:
    """Each proposal, best first, claims the unmatched ground truth it overlaps most if IoU >= k_eval"""
    truths = [_interval(item) for item in ground_truth]
    claimed = [False] * len(truths)
    counts = Counts()
    matches = []

    for index in ranking_order(proposals):
        candidate = _interval(proposals[index])
        best, best_iou = -1, -1.0
        for gt_index, truth in enumerate(truths):
            if claimed[gt_index]:
                continue
            iou = temporal_iou(candidate, truth)
            if iou > best_iou:
                best, best_iou = gt_index, iou
        if best >= 0 and best_iou >= k_eval:
            claimed[best] = True
            counts.tp += 1
            matches.append((index, best, best_iou))
        else:
            counts.fp += 1

    counts.fn = claimed.count(False)
    return MatchResult(counts=counts, matches=matches)


# =================== CORPUS-LEVEL ===================

def _group_by_video(proposals: Iterable) -> Dict[str, List]:
    grouped: Dict[str, List] = {}
    for proposal in proposals:
        grouped.setdefault(proposal.video_id, []).append(proposal)
    return grouped


def _ground_truth(record: VideoRecord, label: Optional[ExpressionClass] = None) -> List[GroundTruthInterval]:
    return [item for item in (record.ground_truth or []) if label is None or item.label == label]


def duration_seconds(proposal, fps: float) -> float:
    return (proposal.offset_frame - proposal.onset_frame + 1) / fps


def pooled_counts(proposals: Sequence, records: Sequence[VideoRecord], k_eval: float = 0.5,
                  label: Optional[ExpressionClass] = None) -> Tuple[Counts, Dict[str, Counts]]:
    """Counts per video and their sum; proposals for unknown videos are false positives"""
    grouped = _group_by_video(proposals)
    known = {record.id for record in records}
    per_video: Dict[str, Counts] = {}
    total = Counts()
    for record in records:
        counts = match_and_count(grouped.get(record.id, []), _ground_truth(record, label), k_eval).counts
        per_video[record.id] = counts
        total = total + counts
    for video_id, orphans in grouped.items():
        if video_id not in known:
            logger.warning("proposals_for_unknown_video", video=video_id, proposals=len(orphans))
            total = total + Counts(fp=len(orphans))
    return total, per_video


def _short(proposals: Sequence, records: Sequence[VideoRecord], limit: float) -> List:
    fps = {record.id: record.fps for record in records}
    return [p for p in proposals if p.video_id in fps and duration_seconds(p, fps[p.video_id]) <= limit + 1e-12]


def optimal_cutoff(proposals: Sequence, records: Sequence[VideoRecord],
                   k_eval: float = 0.5) -> Tuple[Optional[float], List]:
    """Confidence cut-off with the best overall F1; None means every proposal is kept"""
    best_cutoff, best_set = None, list(proposals)
    best_f1 = pooled_counts(best_set, records, k_eval)[0].f1
    for cutoff in sorted({p.confidence for p in proposals}):
        kept = [p for p in proposals if p.confidence >= cutoff]
        f1 = pooled_counts(kept, records, k_eval)[0].f1
        if f1 > best_f1:
            best_cutoff, best_set, best_f1 = cutoff, kept, f1
    return best_cutoff, best_set


def f1_me_suite(proposals: Sequence, records: Sequence[VideoRecord],
                k_eval: float = 0.5) -> Tuple[float, float, float, Optional[float]]:
    """(f1_me_05, f1_me_10, f1_me_p, cut-off that produced the optimal set)"""
    me = ExpressionClass.ME
    f1_me_05 = pooled_counts(_short(proposals, records, ME_SECONDS), records, k_eval, me)[0].f1
    f1_me_10 = pooled_counts(_short(proposals, records, ME_RELAXED_SECONDS), records, k_eval, me)[0].f1
    cutoff, optimal = optimal_cutoff(proposals, records, k_eval)
    f1_me_p = pooled_counts(_short(optimal, records, ME_SECONDS), records, k_eval, me)[0].f1
    return f1_me_05, f1_me_10, f1_me_p, cutoff


@dataclass
class EvalReport:
    tp: int
    fp: int
    fn: int
    precision: float
    recall: float
    f1: float
    f1_me_05: float
    f1_me_10: float
    f1_me_p: float
    k_eval: float = 0.5
    optimal_threshold: Optional[float] = None
    per_video: Dict[str, Dict[str, int]] = field(default_factory=dict)

    @classmethod
    def from_counts(cls, counts: Counts, **extra) -> "EvalReport":
        return cls(tp=counts.tp, fp=counts.fp, fn=counts.fn, precision=counts.precision,
                   recall=counts.recall, f1=counts.f1, **extra)

    @property
    def counts(self) -> Counts:
        return Counts(self.tp, self.fp, self.fn)

    def to_dict(self) -> Dict:
        return asdict(self)

    def summary_rows(self) -> List[Tuple[str, str]]:
        """Fixed-order (metric, value) rows for tabular display"""
        optimal = "all" if self.optimal_threshold is None else f"{self.optimal_threshold:.4f}"
        return [
            ("TP", str(self.tp)),
            ("FP", str(self.fp)),
            ("FN", str(self.fn)),
            ("Precision", f"{self.precision:.4f}"),
            ("Recall", f"{self.recall:.4f}"),
            ("F1", f"{self.f1:.4f}"),
            ("F1-ME (0.5 s)", f"{self.f1_me_05:.4f}"),
            ("F1-ME (1.0 s)", f"{self.f1_me_10:.4f}"),
            ("F1-ME (optimal set)", f"{self.f1_me_p:.4f}"),
            ("Optimal cut-off", optimal),
        ]


def evaluate(proposals: Sequence, records: Sequence[VideoRecord], k_eval: float = 0.5) -> EvalReport:
    total, per_video = pooled_counts(proposals, records, k_eval)
    f1_me_05, f1_me_10, f1_me_p, cutoff = f1_me_suite(proposals, records, k_eval)
    report = EvalReport.from_counts(
        total,
        f1_me_05=f1_me_05,
        f1_me_10=f1_me_10,
        f1_me_p=f1_me_p,
        k_eval=k_eval,
        optimal_threshold=cutoff,
        per_video={video_id: asdict(counts) for video_id, counts in per_video.items()},
    )
    logger.info("evaluation", videos=len(records), proposals=len(proposals), tp=report.tp, fp=report.fp,
                fn=report.fn, f1=round(report.f1, 4))
    return report


def pool_reports(reports: Sequence[EvalReport], proposals: Sequence, records: Sequence[VideoRecord],
                 k_eval: float = 0.5) -> EvalReport:
    """Corpus-wide report from folds; counts are summed before any ratio is taken"""
    total = Counts()
    per_video: Dict[str, Dict[str, int]] = {}
    for report in reports:
        total = total + report.counts
        per_video.update(report.per_video)
    f1_me_05, f1_me_10, f1_me_p, cutoff = f1_me_suite(proposals, records, k_eval)
    return EvalReport.from_counts(total, f1_me_05=f1_me_05, f1_me_10=f1_me_10, f1_me_p=f1_me_p,
                                  k_eval=k_eval, optimal_threshold=cutoff, per_video=per_video)
