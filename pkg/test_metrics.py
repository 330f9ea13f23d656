# -*- coding: utf-8 -*-
"""
Tests for IoU, one-to-one matching and the pooled / micro-expression F1 scores
"""

import itertools

import pytest

from dataio import ExpressionClass, GroundTruthInterval, VideoLabels, VideoRecord
from metrics import Counts, evaluate, f1_me_suite, match_and_count, pool_reports, pooled_counts, temporal_iou
from spotting import Proposal

ME, MAE = ExpressionClass.ME, ExpressionClass.MAE


def _record(video_id, intervals, fps=30.0, frame_count=300):
    truth = [GroundTruthInterval(onset_frame=on, offset_frame=off, label=label) for on, off, label in intervals]
    labels = VideoLabels(mae=int(any(label == MAE for *_, label in intervals)),
                         me=int(any(label == ME for *_, label in intervals)))
    return VideoRecord(id=video_id, subject="s01", fps=fps, frame_count=frame_count, snippet_len=8,
                       labels=labels, ground_truth=truth)


def _proposal(onset, offset, confidence, video_id="v", label=MAE):
    return Proposal(video_id, onset, offset, label, confidence)


# =================== IOU & MATCHING ===================

def test_temporal_iou_examples():
    assert temporal_iou((11, 20), (11, 20)) == 1.0
    assert temporal_iou((1, 10), (11, 20)) == 0.0
    assert temporal_iou((11, 20), (16, 25)) == 1 / 3


def test_match_examples():
    assert match_and_count([_proposal(1, 10, 0.9)], [(1, 10)]).counts == Counts(1, 0, 0)
    assert match_and_count([_proposal(1, 10, 0.9), _proposal(1, 10, 0.8)], [(1, 10)]).counts == Counts(1, 1, 0)
    assert match_and_count([], [(1, 10), (20, 30), (40, 50)]).counts == Counts(0, 0, 3)


def test_match_threshold_is_inclusive():
    # IoU exactly 0.5
    assert match_and_count([_proposal(1, 10, 0.9)], [(1, 5)]).tp == 1
    assert match_and_count([_proposal(1, 10, 0.9)], [(1, 5)], k_eval=0.6).tp == 0


def test_match_records_pairs_in_caller_order():
    proposals = [_proposal(40, 50, 0.2), _proposal(1, 10, 0.9)]
    result = match_and_count(proposals, [(1, 10), (40, 50)])
    assert result.matches == [(1, 0, 1.0), (0, 1, 1.0)]


def _greedy_reference(proposals, truths, k_eval):
    order = sorted(proposals, key=lambda p: (-p.confidence, p.onset_frame, p.offset_frame))
    free = list(range(len(truths)))
    tp = 0
    for proposal in order:
        ious = [(temporal_iou((proposal.onset_frame, proposal.offset_frame), truths[i]), -i) for i in free]
        if ious:
            iou, neg_index = max(ious)
            if iou >= k_eval:
                free.remove(-neg_index)
                tp += 1
    return Counts(tp, len(proposals) - tp, len(truths) - tp)


def _maximum_matching(proposals, truths, k_eval):
    """Largest one-to-one assignment of proposals to ground truths, by exhaustion"""
    eligible = [[temporal_iou((p.onset_frame, p.offset_frame), t) >= k_eval for t in truths] for p in proposals]
    best = 0
    slots = list(range(len(truths))) + [None] * len(proposals)
    for assignment in set(itertools.permutations(slots, len(proposals))):
        best = max(best, sum(1 for i, t in enumerate(assignment) if t is not None and eligible[i][t]))
    return best


def _random_proposals(rng, count, horizon=120):
    proposals = []
    for _ in range(count):
        onset = int(rng.integers(1, horizon))
        proposals.append(_proposal(onset, onset + int(rng.integers(0, 25)), float(rng.random())))
    return proposals


def test_match_equals_greedy_reference(rng):
    for _ in range(500):
        proposals = _random_proposals(rng, int(rng.integers(0, 12)))
        truths = [(on, on + int(rng.integers(0, 25))) for on in rng.integers(1, 120, size=int(rng.integers(0, 6)))]
        k_eval = float(rng.choice([0.3, 0.5, 0.7]))
        result = match_and_count(proposals, truths, k_eval)
        assert result.counts == _greedy_reference(proposals, truths, k_eval)
        assert result.tp + result.fp == len(proposals)
        assert result.tp + result.fn == len(truths)


def test_match_is_maximum_for_separated_ground_truth(rng):
    # with gaps between ground truths no proposal reaches IoU 0.5 with two of them
    for _ in range(500):
        truths, cursor = [], 1
        for _ in range(int(rng.integers(0, 4))):
            onset = cursor + int(rng.integers(1, 10))
            truths.append((onset, onset + int(rng.integers(2, 15))))
            cursor = truths[-1][1] + 1
        proposals = _random_proposals(rng, int(rng.integers(0, 5)), horizon=max(cursor, 2))
        assert match_and_count(proposals, truths).tp == _maximum_matching(proposals, truths, 0.5)


def test_match_is_permutation_invariant(rng):
    proposals = _random_proposals(rng, 10)
    truths = [(5, 20), (30, 45), (60, 80)]
    expected = match_and_count(proposals, truths).counts
    for _ in range(10):
        shuffled = list(rng.permutation(proposals))
        assert match_and_count(shuffled, truths).counts == expected


# =================== POOLED COUNTS ===================

def test_zero_division_conventions():
    empty = Counts()
    assert (empty.precision, empty.recall, empty.f1) == (0.0, 0.0, 0.0)
    assert Counts(0, 3, 0).f1 == 0.0
    assert Counts(2, 0, 2).precision == 1.0


def test_counts_are_pooled_before_ratios():
    records = [_record("a", [(1, 10, MAE)]), _record("b", [(1, 10, MAE), (50, 60, MAE)])]
    proposals = [_proposal(1, 10, 0.9, "a"), _proposal(1, 10, 0.9, "b"), _proposal(100, 120, 0.5, "b")]
    total, per_video = pooled_counts(proposals, records)
    assert total == Counts(2, 1, 1)
    assert per_video["a"] == Counts(1, 0, 0)
    assert per_video["b"] == Counts(1, 1, 1)


def test_proposals_for_unknown_videos_are_false_positives():
    total, _ = pooled_counts([_proposal(1, 10, 0.9, "ghost")], [_record("a", [(1, 10, MAE)])])
    assert total == Counts(0, 1, 1)


# =================== MICRO-EXPRESSION F1 ===================

def test_no_micro_expressions_gives_zero():
    records = [_record("v", [(1, 100, MAE)])]
    f1_me_05, f1_me_10, f1_me_p, _ = f1_me_suite([_proposal(1, 100, 0.9)], records)
    assert (f1_me_05, f1_me_10, f1_me_p) == (0.0, 0.0, 0.0)


def test_all_micro_expressions_found():
    records = [_record("v", [(11, 18, ME), (101, 115, ME)])]
    proposals = [_proposal(11, 18, 0.9, label=ME), _proposal(101, 115, 0.8, label=ME)]
    assert f1_me_suite(proposals, records)[0] == 1.0


def test_duration_buckets():
    records = [_record("v", [(11, 18, ME), (101, 115, ME)])]
    # 21 frames at 30 fps is 0.7 s: outside the 0.5 s bucket, inside the 1.0 s one
    proposals = [_proposal(11, 18, 0.9, label=ME), _proposal(98, 118, 0.8, label=MAE)]
    f1_me_05, f1_me_10, _, _ = f1_me_suite(proposals, records)
    assert f1_me_05 == pytest.approx(2 / 3)
    assert f1_me_10 == 1.0


def test_optimal_set_drops_low_confidence_noise():
    records = [_record("v", [(1, 60, MAE), (101, 110, ME)])]
    proposals = [
        _proposal(1, 60, 0.9),
        _proposal(101, 110, 0.8, label=ME),
        _proposal(150, 158, 0.2, label=ME),
    ]
    f1_me_05, _, f1_me_p, cutoff = f1_me_suite(proposals, records)
    assert cutoff == 0.8
    assert f1_me_p == 1.0
    assert f1_me_05 == pytest.approx(2 / 3)


def test_optimal_set_keeps_everything_on_ties():
    records = [_record("v", [(1, 60, MAE), (101, 110, ME)])]
    proposals = [_proposal(1, 60, 0.9), _proposal(101, 110, 0.8, label=ME)]
    assert f1_me_suite(proposals, records)[3] is None


# =================== REPORTS ===================

def test_evaluate_report():
    records = [_record("v", [(1, 60, MAE), (101, 110, ME)]), _record("w", [])]
    proposals = [_proposal(1, 60, 0.9), _proposal(200, 230, 0.4, "w")]
    report = evaluate(proposals, records)
    assert (report.tp, report.fp, report.fn) == (1, 1, 1)
    assert report.precision == 0.5 and report.recall == 0.5 and report.f1 == 0.5
    assert report.per_video["w"] == {"tp": 0, "fp": 1, "fn": 0}
    assert report.to_dict()["k_eval"] == 0.5
    assert [name for name, _ in report.summary_rows()][:3] == ["TP", "FP", "FN"]


def test_pooled_report_matches_single_evaluation():
    first = [_record("a", [(1, 60, MAE)])]
    second = [_record("b", [(11, 18, ME), (40, 90, MAE)])]
    proposals_a = [_proposal(1, 60, 0.7, "a")]
    proposals_b = [_proposal(11, 18, 0.9, "b", ME), _proposal(120, 150, 0.3, "b")]
    pooled = pool_reports([evaluate(proposals_a, first), evaluate(proposals_b, second)],
                          proposals_a + proposals_b, first + second)
    direct = evaluate(proposals_a + proposals_b, first + second)
    assert pooled.to_dict() == direct.to_dict()
