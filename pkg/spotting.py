# -*- coding: utf-8 -*-
"""
Expression spotting engine - proposal generation

Core Features:
1. Multi-top snippet selection over a sweep of sampling divisors
2. Multi-threshold selection (baseline post-processing)
3. Consecutive-snippet grouping into frame intervals
4. Outer-inner contrast scoring and greedy temporal NMS
"""

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Literal, Optional, Sequence, Tuple, Union

import numpy as np
import structlog
from pydantic import BaseModel, ConfigDict, Field

from dataio import ExpressionClass
from errors import ArgumentError, ConfigError, DataError
from metrics import ME_SECONDS, temporal_iou
from numerics import Tensor, topk_indices

logger = structlog.get_logger(__name__)

SnippetInterval = Tuple[int, int]


class SpotConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    m_start: int = Field(default=8, ge=1)
    m_count: int = Field(default=15, ge=1)
    varsigma: float = 0.15
    psi: float = Field(default=0.25, gt=0)
    nms_iou: float = Field(default=0.01, ge=0, le=1)
    confidence_floor: float = Field(default=0.1, ge=0)
    tau_l: float = 0.1
    tau_u: float = 0.9
    n_levels: int = Field(default=9, ge=1)
    method: Literal["multitop", "multithreshold"] = "multitop"
    # pooled NMS by default; when set, NMS runs per duration-derived label, not per score column
    classwise_nms: bool = False

    @property
    def m_values(self) -> List[int]:
        return list(range(self.m_start, self.m_start + self.m_count))


@dataclass
class Proposal:
    video_id: str
    onset_frame: int
    offset_frame: int
    label: ExpressionClass
    confidence: float
    phi_mae: float = 0.0
    phi_me: float = 0.0

    @property
    def frames(self) -> int:
        return self.offset_frame - self.onset_frame + 1

    def to_json(self) -> Dict:
        return {
            "video_id": self.video_id,
            "onset_frame": self.onset_frame,
            "offset_frame": self.offset_frame,
            "class": self.label.value,
            "confidence": self.confidence,
        }

    @classmethod
    def from_json(cls, raw: Dict) -> "Proposal":
        try:
            return cls(
                video_id=str(raw["video_id"]),
                onset_frame=int(raw["onset_frame"]),
                offset_frame=int(raw["offset_frame"]),
                label=ExpressionClass(raw["class"]),
                confidence=float(raw["confidence"]),
            )
        except (KeyError, TypeError, ValueError) as e:
            raise DataError(f"malformed proposal {raw!r}: {e}") from e


def write_proposals(path: Union[str, Path], proposals: Sequence[Proposal]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    ordered = sorted(proposals, key=lambda p: (p.video_id, p.onset_frame, p.offset_frame))
    path.write_text(json.dumps([p.to_json() for p in ordered], indent=2), encoding="utf-8")
    return path


def read_proposals(path: Union[str, Path]) -> List[Proposal]:
    path = Path(path)
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as e:
        raise DataError(f"cannot read proposals {path}: {e}") from e
    if not isinstance(raw, list):
        raise DataError(f"{path} must hold a JSON array of proposals")
    return [Proposal.from_json(item) for item in raw]


def _values(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


# =================== SNIPPET SELECTION ===================

def select_multitop(a, m: int) -> np.ndarray:
    """Mask of the max(1, T // m) highest-attention snippets"""
    if m < 1:
        raise ArgumentError(f"m must be >= 1, got {m}")
    values = _values(a)
    mask = np.zeros(values.shape[0], dtype=bool)
    mask[topk_indices(values, max(1, values.shape[0] // m))] = True
    return mask


def select_multithreshold(a, tau_l: float, tau_u: float, n_levels: int) -> List[np.ndarray]:
    if tau_l >= tau_u:
        raise ConfigError(f"tau_l ({tau_l}) must be below tau_u ({tau_u})")
    if n_levels < 1:
        raise ArgumentError(f"n_levels must be >= 1, got {n_levels}")
    values = _values(a)
    thresholds = [tau_l] if n_levels == 1 else np.linspace(tau_l, tau_u, n_levels)
    return [values > threshold for threshold in thresholds]


def group_consecutive(mask) -> List[SnippetInterval]:
    """Maximal runs of selected snippets as 1-indexed inclusive intervals"""
    intervals: List[SnippetInterval] = []
    start = None
    for index, selected in enumerate(np.asarray(mask, dtype=bool), start=1):
        if selected and start is None:
            start = index
        elif not selected and start is not None:
            intervals.append((start, index - 1))
            start = None
    if start is not None:
        intervals.append((start, len(mask)))
    return intervals


def snippets_to_frames(interval: SnippetInterval, snippet_len: int) -> Tuple[int, int]:
    return (interval[0] - 1) * snippet_len + 1, interval[1] * snippet_len


# =================== SCORING ===================

def score_proposal(interval: SnippetInterval, s_hat, p, config: SpotConfig) -> Tuple[float, float]:
    """Outer-inner contrast per foreground class plus the video-level prior"""
    scores = _values(s_hat)
    prior = _values(p)
    snippets = scores.shape[0]
    start, end = interval
    if not 1 <= start <= end <= snippets:
        raise ArgumentError(f"interval {interval} outside [1, {snippets}]")

    width = int(np.ceil(config.psi * (end - start + 1) - 1e-9))
    inner = scores[start - 1:end, :2].mean(axis=0)
    # outer windows exclude the interval itself
    outer_rows = np.concatenate([scores[max(0, start - 1 - width):start - 1, :2],
                                 scores[end:min(snippets, end + width), :2]])
    outer = outer_rows.mean(axis=0) if outer_rows.shape[0] else np.zeros(2)
    phi = inner - outer + config.varsigma * prior[:2]
    return float(phi[0]), float(phi[1])


def nms(proposals: Sequence[Proposal], iou_threshold: float) -> List[Proposal]:
    """Greedy: keep the most confident, drop everything overlapping it by more than iou_threshold"""
    remaining = sorted(proposals, key=lambda p: (-p.confidence, p.onset_frame, p.offset_frame))
    kept: List[Proposal] = []
    for candidate in remaining:
        interval = (candidate.onset_frame, candidate.offset_frame)
        if all(temporal_iou(interval, (k.onset_frame, k.offset_frame)) <= iou_threshold for k in kept):
            kept.append(candidate)
    return kept


def classify_by_duration(frames: int, fps: float) -> ExpressionClass:
    return ExpressionClass.ME if frames / fps <= ME_SECONDS + 1e-12 else ExpressionClass.MAE


def candidate_intervals(a, config: SpotConfig) -> List[SnippetInterval]:
    if config.method == "multitop":
        masks = [select_multitop(a, m) for m in config.m_values]
    else:
        masks = select_multithreshold(a, config.tau_l, config.tau_u, config.n_levels)
    unique = set()
    for mask in masks:
        unique.update(group_consecutive(mask))
    return sorted(unique)


# =================== PER-VIDEO SPOTTING ===================

class ExpressionSpotter:
    """Scored, non-overlapping expression proposals for one video at a time"""

    def __init__(self, config: Optional[SpotConfig] = None):
        self.config = config or SpotConfig()

    def spot(self, a, s_hat, p, video_id: str, snippet_len: int, fps: float,
             frame_count: Optional[int] = None) -> List[Proposal]:
        """Proposals sorted by onset frame"""
        # one candidate per distinct snippet interval over every selection
        candidates = [
            self._propose(interval, s_hat, p, video_id, snippet_len, fps, frame_count)
            for interval in candidate_intervals(a, self.config)
        ]

        # truncation threshold, then one proposal per frame interval
        candidates = self._distinct([c for c in candidates if c.confidence >= self.config.confidence_floor])

        kept = self._suppress(candidates)
        kept.sort(key=lambda proposal: (proposal.onset_frame, proposal.offset_frame))
        logger.debug("video_spotted", video=video_id, candidates=len(candidates), kept=len(kept))
        return kept

    def _propose(self, interval: SnippetInterval, s_hat, p, video_id: str, snippet_len: int, fps: float,
                 frame_count: Optional[int]) -> Proposal:
        phi_mae, phi_me = score_proposal(interval, s_hat, p, self.config)
        onset, offset = snippets_to_frames(interval, snippet_len)
        if frame_count is not None:
            offset = min(offset, frame_count)
        label = classify_by_duration(offset - onset + 1, fps)
        # the two class scores of an interval collapse to the larger one before NMS
        return Proposal(video_id, onset, offset, label, max(phi_mae, phi_me), phi_mae, phi_me)

    @staticmethod
    def _distinct(candidates: List[Proposal]) -> List[Proposal]:
        best: Dict[Tuple[int, int], Proposal] = {}
        for candidate in candidates:
            key = (candidate.onset_frame, candidate.offset_frame)
            if key not in best or candidate.confidence > best[key].confidence:
                best[key] = candidate
        return list(best.values())

    def _suppress(self, candidates: List[Proposal]) -> List[Proposal]:
        if not self.config.classwise_nms:
            return nms(candidates, self.config.nms_iou)
        # labels come from duration, so this keeps micro- and macro-length intervals apart
        kept: List[Proposal] = []
        for label in ExpressionClass:
            kept.extend(nms([c for c in candidates if c.label == label], self.config.nms_iou))
        return kept


def spot_video(a, s_hat, p, config: SpotConfig, video_id: str, snippet_len: int, fps: float,
               frame_count: Optional[int] = None) -> List[Proposal]:
    return ExpressionSpotter(config).spot(a, s_hat, p, video_id, snippet_len, fps, frame_count)
