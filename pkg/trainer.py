# -*- coding: utf-8 -*-
"""
Expression spotting engine - training orchestration

Core Features:
1. Seeded batch sampling, snippet subsampling and shared-label video pairing
2. Joint-loss optimisation with Adam and a per-iteration loss trace
3. Corpus-wide spotting with trained parameters
4. Held-out split and leave-one-subject-out protocols
"""

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
import structlog
from tqdm import tqdm

from config import RunConfig
from dataio import Corpus, subsample_indices
from errors import ConfigError, DataError
from losses import (
    ConsistencyView,
    LossComponents,
    batch_mean,
    feature_consistency,
    joint_loss,
    suppress,
    topk_pool,
    video_losses,
)
from metrics import EvalReport, evaluate, pool_reports
from numerics import AdamState, Tensor, adam_step, collect_grads, load_checkpoint, save_checkpoint
from pipeline import ModelParams, ModelSpec, forward
from spotting import Proposal, spot_video

logger = structlog.get_logger(__name__)

TRACE_COLUMNS = ["iteration", "L_sc", "L_dc1", "L_dc2", "L_dc3", "L_fc", "L_sl", "L_gl", "L_total"]
PAIRING_ATTEMPTS = 100


@dataclass
class TrainResult:
    params: ModelParams
    trace: pd.DataFrame
    optimizer: AdamState


@dataclass
class FoldResult:
    subject: str
    videos: List[str]
    report: EvalReport
    proposals: List[Proposal]
    trace: pd.DataFrame


@dataclass
class LosoResult:
    folds: List[FoldResult]
    report: EvalReport
    proposals: List[Proposal] = field(default_factory=list)

    def fold_table(self) -> pd.DataFrame:
        return pd.DataFrame([
            {"fold": fold.subject, "videos": len(fold.videos), "TP": fold.report.tp, "FP": fold.report.fp,
             "FN": fold.report.fn, "F1": fold.report.f1}
            for fold in self.folds
        ])


# =================== PERSISTENCE ===================

FUSION_KEY = "meta.fusion"
FUSION_CODES = {"cscm": 0.0, "concat": 1.0}


def save_model(path: Union[str, Path], params: ModelParams, spec: Optional[ModelSpec] = None) -> Path:
    """Write the parameters together with the fusion mode they were trained under"""
    spec = spec or ModelSpec()
    named = dict(params.named_parameters())
    named[FUSION_KEY] = np.array([FUSION_CODES[spec.fusion]])
    return save_checkpoint(path, named)


def load_model(path: Union[str, Path], spec: Optional[ModelSpec] = None) -> ModelParams:
    """
    Read a checkpoint written by save_model

    Raises:
        DataError: the fusion marker is missing or unreadable
        ConfigError: the checkpoint was trained under a different fusion mode than ``spec``
    """
    spec = spec or ModelSpec()
    named = load_checkpoint(path)
    marker = named.pop(FUSION_KEY, None)
    if marker is None:
        raise DataError(f"{path} does not record a fusion mode")
    modes = {code: mode for mode, code in FUSION_CODES.items()}
    recorded = modes.get(float(marker.ravel()[0])) if marker.size == 1 else None
    if recorded is None:
        raise DataError(f"{path} has an unreadable fusion marker {marker.tolist()}")
    if recorded != spec.fusion:
        raise ConfigError(f"{path} was trained with fusion={recorded!r}, the configuration asks for {spec.fusion!r}")
    return ModelParams.from_named(named)


def write_trace(path: Union[str, Path], trace: pd.DataFrame) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    trace.to_csv(path, index=False)
    return path


# =================== PAIRING ===================

def shares_label(first: np.ndarray, second: np.ndarray) -> bool:
    return bool(np.any(first * second > 0))


def any_pairable(labels: Sequence[np.ndarray]) -> bool:
    return any(shares_label(labels[i], labels[j]) for i in range(len(labels)) for j in range(i + 1, len(labels)))


def build_pairs(labels: Sequence[np.ndarray], pair_count: int, rng: np.random.Generator,
                attempts: int = PAIRING_ATTEMPTS) -> Optional[List[Tuple[int, int]]]:
    """Disjoint index pairs drawn from the batch, each sharing a positive label; None if every attempt fails"""
    n_pairs = min(pair_count // 2, len(labels) // 2)
    if n_pairs == 0:
        return None
    for _ in range(attempts):
        chosen = rng.choice(len(labels), size=2 * n_pairs, replace=False)
        pairs = [(int(chosen[2 * i]), int(chosen[2 * i + 1])) for i in range(n_pairs)]
        if all(shares_label(labels[a], labels[b]) for a, b in pairs):
            return pairs
    return None


# =================== TRAINING ===================

class Trainer:
    """
    Joint-loss optimiser over a corpus

    Each iteration draws a seeded batch, subsamples every video to t_train snippets, runs the
    training-mode forward pass, adds feature consistency over shared-label pairs and takes one
    Adam step. One trace row per iteration.
    """

    def __init__(self, config: RunConfig, progress: bool = True):
        self.config = config
        self.progress = progress

    def fit(self, corpus: Corpus, params: Optional[ModelParams] = None) -> TrainResult:
        config = self.config
        if len(corpus) == 0:
            raise DataError("cannot train on an empty corpus")

        # Step 1: parameters, optimiser state and the corpus label vectors
        params = params or ModelParams.init(corpus.feature_dim, config.seed, config.model)
        named = params.named_parameters()
        optimizer = AdamState(learning_rate=config.learning_rate, beta1=config.beta1, beta2=config.beta2,
                              epsilon=config.epsilon)
        labels = [video.record.labels.as_vector() for video in corpus]

        # Step 2: pairing is only attempted when some two videos share a positive label
        pairing = config.pairs_per_batch > 0 and any_pairable(labels)
        if config.pairs_per_batch > 0 and not pairing:
            logger.warning("no_pairable_videos", videos=len(corpus))

        logger.info("training_started", videos=len(corpus), iterations=config.iterations,
                    batch_size=config.batch_size, t_train=config.t_train, seed=config.seed)

        # Step 3: iterate
        rows = []
        for iteration in tqdm(range(1, config.iterations + 1), desc="training", disable=not self.progress):
            components, total = self._batch_loss(corpus, labels, params, iteration, pairing)
            self._step(params, named, total, optimizer)

            row = {"iteration": iteration, **components.as_floats(), "L_total": total.item()}
            rows.append(row)
            if iteration % config.log_every == 0:
                logger.info("training_progress", **{key: round(value, 5) for key, value in row.items()})

        trace = pd.DataFrame(rows, columns=TRACE_COLUMNS)
        logger.info("training_finished", iterations=config.iterations,
                    final_loss=float(trace["L_total"].iloc[-1]) if len(trace) else None)
        return TrainResult(params=params, trace=trace, optimizer=optimizer)

    def _sample_batch(self, corpus: Corpus, rng: np.random.Generator) -> np.ndarray:
        return rng.choice(len(corpus), size=min(self.config.batch_size, len(corpus)), replace=False)

    def _batch_loss(self, corpus: Corpus, labels: Sequence[np.ndarray], params: ModelParams, iteration: int,
                    pairing: bool) -> Tuple[LossComponents, Tensor]:
        config = self.config
        rng = np.random.default_rng([config.seed, iteration])

        views, per_video = [], []
        for index in self._sample_batch(corpus, rng):
            video = corpus[int(index)]
            # both modalities keep the same snippets
            kept = subsample_indices(video.snippets, config.t_train, rng)
            outputs = forward(video.rgb.values[kept], video.flow.values[kept], params, training=True,
                              seed=config.seed, spec=config.model, video_id=video.id, iteration=iteration)
            per_video.append(video_losses(outputs, labels[index], config.pooling, config.duration_mask))
            views.append(ConsistencyView.from_outputs(outputs, labels[index]))

        fc = Tensor(0.0)
        if pairing:
            pairs = build_pairs([view.labels for view in views], config.pair_count, rng)
            if pairs is None:
                logger.warning("pairing_failed", iteration=iteration, attempts=PAIRING_ATTEMPTS)
            else:
                fc = feature_consistency([(views[a], views[b]) for a, b in pairs], config.pooling)

        components = batch_mean(per_video, fc)
        return components, joint_loss(components, config.loss_weights)

    @staticmethod
    def _step(params: ModelParams, named, total: Tensor, optimizer: AdamState) -> None:
        params.zero_grad()
        total.backward()
        adam_step(named, collect_grads(named), optimizer)


def train(corpus: Corpus, config: RunConfig, progress: bool = True,
          params: Optional[ModelParams] = None) -> TrainResult:
    return Trainer(config, progress=progress).fit(corpus, params)


# =================== SPOTTING ===================

def spot_corpus(corpus: Corpus, params: ModelParams, config: RunConfig) -> List[Proposal]:
    if len(corpus) and corpus.feature_dim != params.dim:
        raise DataError(f"checkpoint expects D={params.dim}, corpus has D={corpus.feature_dim}")
    proposals: List[Proposal] = []
    for video in corpus:
        outputs = forward(video.rgb.values, video.flow.values, params, training=False, spec=config.model)
        # mean attention suppresses the T-CAM before pooling and scoring
        s_hat = suppress(outputs.s, outputs.a)
        _, p = topk_pool(s_hat, config.pooling)
        record = video.record
        proposals.extend(spot_video(outputs.a, s_hat, p, config.spot, video.id, record.snippet_len,
                                    record.fps, record.frame_count))
    logger.info("corpus_spotted", videos=len(corpus), proposals=len(proposals))
    return proposals


# =================== PROTOCOLS ===================

def holdout_split(corpus: Corpus, fraction: float, seed: int) -> Tuple[Corpus, Corpus]:
    """(train, held-out) with round(fraction * n) held-out videos, at least one on each side"""
    if not 0.0 < fraction < 1.0:
        raise ConfigError(f"holdout fraction must lie in (0, 1), got {fraction}")
    if len(corpus) < 2:
        raise ConfigError("a held-out split needs at least two videos")
    order = np.random.default_rng([seed, 2]).permutation(len(corpus))
    n_held = min(len(corpus) - 1, max(1, int(round(fraction * len(corpus)))))
    held = {int(i) for i in order[:n_held]}
    train_part = Corpus([video for i, video in enumerate(corpus) if i not in held])
    held_part = Corpus([video for i, video in enumerate(corpus) if i in held])
    return train_part, held_part


def loso(corpus: Corpus, config: RunConfig, out_dir: Optional[Union[str, Path]] = None,
         workers: Optional[int] = None, k_eval: float = 0.5) -> LosoResult:
    """One fold per subject; counts are pooled over folds before the final ratios"""
    subjects = corpus.subjects()
    if len(subjects) < 2:
        raise ConfigError(f"leave-one-subject-out needs at least two subjects, got {subjects}")
    out_path = Path(out_dir) if out_dir is not None else None

    def run_fold(subject: str) -> FoldResult:
        train_part = corpus.subset(lambda video: video.record.subject != subject)
        test_part = corpus.subset(lambda video: video.record.subject == subject)
        result = train(train_part, config, progress=False)
        proposals = spot_corpus(test_part, result.params, config)
        report = evaluate(proposals, test_part.records, k_eval)
        if out_path is not None:
            save_model(out_path / f"fold_{subject}.mcwc", result.params, config.model)
            write_trace(out_path / f"fold_{subject}_trace.csv", result.trace)
        logger.info("fold_complete", subject=subject, videos=len(test_part), tp=report.tp, fp=report.fp,
                    fn=report.fn)
        return FoldResult(subject=subject, videos=[video.id for video in test_part], report=report,
                          proposals=proposals, trace=result.trace)

    with ThreadPoolExecutor(max_workers=workers or config.fold_workers) as pool:
        folds = list(pool.map(run_fold, subjects))

    proposals = [proposal for fold in folds for proposal in fold.proposals]
    pooled = pool_reports([fold.report for fold in folds], proposals, corpus.records, k_eval)
    result = LosoResult(folds=folds, report=pooled, proposals=proposals)
    if out_path is not None:
        result.fold_table().to_csv(out_path / "folds.csv", index=False)
    logger.info("loso_complete", folds=len(folds), tp=pooled.tp, fp=pooled.fp, fn=pooled.fn,
                f1=round(pooled.f1, 4))
    return result
