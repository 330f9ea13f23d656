# -*- coding: utf-8 -*-
"""
Tests for training, corpus spotting, pairing and the evaluation protocols
"""

import numpy as np
import pandas as pd
import pytest

from config import load_config
from dataio import SynthSpec, synth_corpus
from errors import ConfigError, DataError
from losses import joint_total
from numerics import save_checkpoint
from pipeline import ModelParams, ModelSpec
from trainer import (
    TRACE_COLUMNS,
    Trainer,
    any_pairable,
    build_pairs,
    holdout_split,
    load_model,
    loso,
    save_model,
    spot_corpus,
    train,
)


def _labels(*rows):
    return [np.array(row, dtype=float) for row in rows]


# =================== PAIRING ===================

def test_build_pairs_share_labels(rng):
    labels = _labels([1, 0], [0, 1], [1, 0], [0, 1], [1, 1], [0, 0])
    for _ in range(20):
        pairs = build_pairs(labels, 4, rng)
        assert len(pairs) == 2
        used = [index for pair in pairs for index in pair]
        assert len(set(used)) == 4
        for a, b in pairs:
            assert np.any(labels[a] * labels[b] > 0)


def test_build_pairs_gives_up():
    assert build_pairs(_labels([1, 0], [0, 1]), 2, np.random.default_rng(0), attempts=10) is None
    assert build_pairs(_labels([1, 0], [1, 0]), 0, np.random.default_rng(0)) is None


def test_any_pairable():
    assert any_pairable(_labels([1, 0], [0, 1], [1, 1]))
    assert not any_pairable(_labels([1, 0], [0, 1], [0, 0]))


# =================== TRAINING ===================

def test_zero_learning_rate_keeps_initial_parameters(small_corpus, fast_config):
    config = fast_config.model_copy(update={"learning_rate": 0.0})
    result = train(small_corpus, config, progress=False)
    initial = ModelParams.init(small_corpus.feature_dim, config.seed, config.model)
    for name, value in initial.named_parameters().items():
        np.testing.assert_array_equal(result.params.named_parameters()[name].data, value.data)


def test_training_is_deterministic(small_corpus, fast_config):
    first = train(small_corpus, fast_config, progress=False)
    second = train(small_corpus, fast_config, progress=False)
    pd.testing.assert_frame_equal(first.trace, second.trace)
    for name, value in first.params.named_parameters().items():
        assert value.data.tobytes() == second.params.named_parameters()[name].data.tobytes()


def test_seed_changes_training(small_corpus, fast_config):
    first = train(small_corpus, fast_config, progress=False)
    second = train(small_corpus, fast_config.model_copy(update={"seed": 1}), progress=False)
    assert not first.trace["L_total"].equals(second.trace["L_total"])


def test_trace_rows_reconstruct_total(small_corpus, fast_config):
    trace = train(small_corpus, fast_config, progress=False).trace
    assert list(trace.columns) == TRACE_COLUMNS
    assert trace["iteration"].tolist() == [1, 2]
    for row in trace.to_dict("records"):
        assert row["L_total"] == pytest.approx(joint_total(row, fast_config.loss_weights), abs=1e-12)
        assert all(np.isfinite(value) for value in row.values())


def test_unpairable_corpus_trains_without_consistency(fast_config):
    silent = synth_corpus(4, seed=1, spec=SynthSpec(d=8, t_range=(20, 24), mae_rate=0.0, me_rate=0.0))
    trace = train(silent, fast_config, progress=False).trace
    assert (trace["L_fc"] == 0.0).all()


def test_training_rejects_empty_corpus(small_corpus, fast_config):
    with pytest.raises(DataError):
        train(small_corpus.subset(lambda video: False), fast_config, progress=False)


# =================== SPOTTING ===================

def test_spot_corpus_proposals_inside_videos(small_corpus, fast_config):
    params = ModelParams.init(small_corpus.feature_dim, 0, fast_config.model)
    records = {record.id: record for record in small_corpus.records}
    for proposal in spot_corpus(small_corpus, params, fast_config):
        record = records[proposal.video_id]
        assert 1 <= proposal.onset_frame <= proposal.offset_frame <= record.frame_count
        assert proposal.confidence >= fast_config.spot.confidence_floor


def test_spot_corpus_rejects_dimension_mismatch(small_corpus, fast_config):
    params = ModelParams.init(4, 0, ModelSpec(hidden=4))
    with pytest.raises(DataError):
        spot_corpus(small_corpus, params, fast_config)


def test_checkpoint_reproduces_proposals(tmp_path, small_corpus, fast_config):
    params = train(small_corpus, fast_config, progress=False).params
    restored = load_model(save_model(tmp_path / "model.mcwc", params))
    assert spot_corpus(small_corpus, params, fast_config) == spot_corpus(small_corpus, restored, fast_config)


def test_checkpoint_records_fusion_mode(tmp_path):
    concat = ModelSpec(hidden=4, fusion="concat")
    path = save_model(tmp_path / "concat.mcwc", ModelParams.init(4, 0, concat), concat)
    assert load_model(path, concat).dim == 4
    with pytest.raises(ConfigError, match="fusion"):
        load_model(path, ModelSpec(hidden=4))


def test_checkpoint_without_fusion_marker_is_rejected(tmp_path, small_params):
    path = save_checkpoint(tmp_path / "bare.mcwc", small_params.named_parameters())
    with pytest.raises(DataError, match="fusion"):
        load_model(path)


def test_trainer_class_matches_train(small_corpus, fast_config):
    first = Trainer(fast_config, progress=False).fit(small_corpus)
    second = train(small_corpus, fast_config, progress=False)
    pd.testing.assert_frame_equal(first.trace, second.trace)


# =================== PROTOCOLS ===================

def test_holdout_split(small_corpus):
    train_part, held = holdout_split(small_corpus, 0.2, seed=0)
    assert len(held) == 1 and len(train_part) == 5
    assert {v.id for v in train_part}.isdisjoint({v.id for v in held})
    again = holdout_split(small_corpus, 0.2, seed=0)[1]
    assert [v.id for v in again] == [v.id for v in held]
    with pytest.raises(ConfigError):
        holdout_split(small_corpus, 1.5, seed=0)


def test_loso_partitions_subjects(tmp_path, small_corpus, fast_config):
    result = loso(small_corpus, fast_config, out_dir=tmp_path)
    assert [fold.subject for fold in result.folds] == ["s01", "s02", "s03"]
    covered = sorted(video for fold in result.folds for video in fold.videos)
    assert covered == sorted(video.id for video in small_corpus)
    assert result.report.tp == sum(fold.report.tp for fold in result.folds)
    assert result.report.fn == sum(fold.report.fn for fold in result.folds)
    assert (tmp_path / "fold_s02.mcwc").exists()
    assert (tmp_path / "fold_s02_trace.csv").exists()
    table = pd.read_csv(tmp_path / "folds.csv")
    assert table["fold"].tolist() == ["s01", "s02", "s03"]


def test_loso_is_independent_of_worker_count(small_corpus, fast_config):
    serial = loso(small_corpus, fast_config, workers=1)
    parallel = loso(small_corpus, fast_config, workers=3)
    assert serial.proposals == parallel.proposals
    assert serial.report.to_dict() == parallel.report.to_dict()


def test_loso_needs_two_subjects(small_corpus, fast_config):
    single = small_corpus.subset(lambda video: video.record.subject == "s01")
    with pytest.raises(ConfigError):
        loso(single, fast_config)


def test_config_rejects_batch_smaller_than_pairs():
    with pytest.raises(ConfigError):
        load_config(batch_size=2, pair_count=4)
