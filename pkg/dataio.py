# -*- coding: utf-8 -*-
"""
Expression spotting engine - data ingestion

Core Features:
1. Manifest (JSON) and MCWF feature-file ingestion with full validation
2. Synthetic corpora with planted macro-/micro-expression intervals
3. Training-time snippet subsampling shared by both modalities
"""

import json
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Dict, Iterator, List, Literal, Optional, Sequence, Tuple, Union

import numpy as np
import structlog
from pydantic import BaseModel, ConfigDict, Field, TypeAdapter, ValidationError, model_validator

from errors import ArgumentError, ConfigError, DataError

logger = structlog.get_logger(__name__)

FEATURE_MAGIC = b"MCWF"
FEATURE_VERSION = 1
MANIFEST_NAME = "manifest.json"

# duration convention for expression classes, in seconds
ME_MAX_SECONDS = 0.5
MAE_MAX_SECONDS = 4.0


class Modality(str, Enum):
    RGB = "rgb"
    FLOW = "flow"


class ExpressionClass(str, Enum):
    MAE = "mae"
    ME = "me"


class VideoLabels(BaseModel):
    model_config = ConfigDict(extra="forbid")

    mae: Literal[0, 1] = 0
    me: Literal[0, 1] = 0

    def as_vector(self) -> np.ndarray:
        return np.array([self.mae, self.me], dtype=np.float64)


class GroundTruthInterval(BaseModel):
    model_config = ConfigDict(extra="forbid", populate_by_name=True)

    onset_frame: int
    offset_frame: int
    label: ExpressionClass = Field(alias="class")

    @property
    def frames(self) -> int:
        return self.offset_frame - self.onset_frame + 1


class VideoRecord(BaseModel):
    """One manifest entry; frames are 1-indexed and inclusive"""

    model_config = ConfigDict(extra="forbid")

    id: str
    subject: str
    fps: float = Field(gt=0)
    frame_count: int = Field(ge=1)
    snippet_len: int = Field(ge=1)
    labels: VideoLabels = Field(default_factory=VideoLabels)
    ground_truth: Optional[List[GroundTruthInterval]] = None

    @property
    def snippet_count(self) -> int:
        return self.frame_count // self.snippet_len

    @model_validator(mode="after")
    def _check_invariants(self) -> "VideoRecord":
        if self.snippet_count < 1:
            raise ValueError(f"frame_count {self.frame_count} shorter than one snippet of {self.snippet_len}")
        if self.ground_truth is None:
            return self
        for interval in self.ground_truth:
            if not 1 <= interval.onset_frame <= interval.offset_frame <= self.frame_count:
                raise ValueError(
                    f"interval [{interval.onset_frame}, {interval.offset_frame}] outside [1, {self.frame_count}]"
                )
        present = {interval.label for interval in self.ground_truth}
        if bool(self.labels.mae) != (ExpressionClass.MAE in present):
            raise ValueError(f"label mae={self.labels.mae} inconsistent with ground truth")
        if bool(self.labels.me) != (ExpressionClass.ME in present):
            raise ValueError(f"label me={self.labels.me} inconsistent with ground truth")
        return self

    def to_json(self) -> Dict:
        return self.model_dump(mode="json", by_alias=True, exclude_none=True)


_MANIFEST_ADAPTER = TypeAdapter(List[VideoRecord])


@dataclass(frozen=True)
class FeatureMatrix:
    video_id: str
    modality: Modality
    values: np.ndarray

    @property
    def snippets(self) -> int:
        return self.values.shape[0]

    @property
    def dim(self) -> int:
        return self.values.shape[1]


@dataclass
class Video:
    record: VideoRecord
    rgb: FeatureMatrix
    flow: FeatureMatrix

    @property
    def id(self) -> str:
        return self.record.id

    @property
    def snippets(self) -> int:
        return self.rgb.snippets


@dataclass
class Corpus:
    videos: List[Video] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.videos)

    def __iter__(self) -> Iterator[Video]:
        return iter(self.videos)

    def __getitem__(self, index: int) -> Video:
        return self.videos[index]

    @property
    def feature_dim(self) -> Optional[int]:
        return self.videos[0].rgb.dim if self.videos else None

    @property
    def records(self) -> List[VideoRecord]:
        return [video.record for video in self.videos]

    def subjects(self) -> List[str]:
        return sorted({video.record.subject for video in self.videos})

    def subset(self, keep) -> "Corpus":
        """Videos for which keep(video) is true, order preserved"""
        return Corpus([video for video in self.videos if keep(video)])


# =================== FEATURE FILES ===================

def feature_path(feature_dir: Union[str, Path], video_id: str, modality: Modality) -> Path:
    return Path(feature_dir) / f"{video_id}.{Modality(modality).value}.mcwf"


def write_feature_file(path: Union[str, Path], values: np.ndarray) -> Path:
    path = Path(path)
    values = np.ascontiguousarray(values, dtype="<f4")
    if values.ndim != 2:
        raise DataError(f"feature matrix must be T x D, got shape {values.shape}")
    header = struct.pack("<4sIII", FEATURE_MAGIC, FEATURE_VERSION, values.shape[0], values.shape[1])
    path.write_bytes(header + values.tobytes())
    return path


def read_feature_file(path: Union[str, Path]) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise DataError(f"missing feature file {path}")
    payload = path.read_bytes()
    header_size = struct.calcsize("<4sIII")
    if len(payload) < header_size:
        raise DataError(f"malformed header in {path}")
    magic, version, snippets, dim = struct.unpack_from("<4sIII", payload, 0)
    if magic != FEATURE_MAGIC:
        raise DataError(f"malformed header in {path}: magic {magic!r}")
    if version != FEATURE_VERSION:
        raise DataError(f"unsupported feature version {version} in {path}")
    expected = header_size + 4 * snippets * dim
    if len(payload) != expected:
        raise DataError(f"{path} holds {len(payload)} bytes, header promises {expected}")
    values = np.frombuffer(payload, dtype="<f4", count=snippets * dim, offset=header_size)
    return values.astype(np.float64).reshape(snippets, dim)


# =================== CORPUS I/O ===================

def parse_manifest(raw) -> List[VideoRecord]:
    try:
        records = _MANIFEST_ADAPTER.validate_python(raw)
    except ValidationError as e:
        raise DataError(f"invalid manifest: {e}") from e
    seen = set()
    for record in records:
        if record.id in seen:
            raise DataError(f"duplicate video id '{record.id}' in manifest")
        seen.add(record.id)
    return records


def read_manifest(manifest_path: Union[str, Path]) -> List[VideoRecord]:
    manifest_path = Path(manifest_path)
    try:
        raw = json.loads(manifest_path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as e:
        raise DataError(f"cannot read manifest {manifest_path}: {e}") from e
    return parse_manifest(raw)


def _load_video(record: VideoRecord, feature_dir: Path) -> Video:
    rgb = read_feature_file(feature_path(feature_dir, record.id, Modality.RGB))
    flow = read_feature_file(feature_path(feature_dir, record.id, Modality.FLOW))
    if rgb.shape[0] != flow.shape[0]:
        raise DataError(f"video '{record.id}': rgb has T={rgb.shape[0]}, flow has T={flow.shape[0]}")
    if rgb.shape[1] != flow.shape[1]:
        raise DataError(f"video '{record.id}': rgb has D={rgb.shape[1]}, flow has D={flow.shape[1]}")
    if rgb.shape[0] != record.snippet_count:
        logger.warning("snippet_count_mismatch", video=record.id, features=rgb.shape[0],
                       expected=record.snippet_count)
    return Video(
        record=record,
        rgb=FeatureMatrix(record.id, Modality.RGB, rgb),
        flow=FeatureMatrix(record.id, Modality.FLOW, flow),
    )


def load_corpus(manifest_path: Union[str, Path], feature_dir: Optional[Union[str, Path]] = None,
                workers: int = 4) -> Corpus:
    """Load and validate a whole corpus; any bad video rejects all of it"""
    manifest_path = Path(manifest_path)
    feature_dir = Path(feature_dir) if feature_dir is not None else manifest_path.parent
    records = read_manifest(manifest_path)

    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        videos = list(pool.map(lambda record: _load_video(record, feature_dir), records))

    dims = {video.rgb.dim for video in videos}
    if len(dims) > 1:
        raise DataError(f"feature dimension differs across videos: {sorted(dims)}")

    logger.info("corpus_loaded", manifest=str(manifest_path), videos=len(videos), dim=next(iter(dims), None))
    return Corpus(videos)


def write_corpus(corpus: Corpus, out_dir: Union[str, Path]) -> Path:
    """Write manifest.json and one MCWF file per (video, modality)"""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for video in corpus:
        write_feature_file(feature_path(out_dir, video.id, Modality.RGB), video.rgb.values)
        write_feature_file(feature_path(out_dir, video.id, Modality.FLOW), video.flow.values)
    manifest = out_dir / MANIFEST_NAME
    manifest.write_text(json.dumps([record.to_json() for record in corpus.records], indent=2), encoding="utf-8")
    logger.info("corpus_written", out_dir=str(out_dir), videos=len(corpus))
    return manifest


# =================== SYNTHETIC CORPORA ===================

class SynthSpec(BaseModel):
    model_config = ConfigDict(extra="forbid")

    d: int = Field(default=64, ge=1)
    fps: float = Field(default=30.0, gt=0)
    g: int = Field(default=8, ge=1)
    t_range: Tuple[int, int] = (200, 250)
    effect_size: float = Field(default=2.0, ge=0)
    n_subjects: int = Field(default=5, ge=1)
    mae_rate: float = Field(default=0.7, ge=0, le=1)
    me_rate: float = Field(default=0.6, ge=0, le=1)
    # share of a video's snippets that its macro-expressions may cover together
    mae_budget: float = Field(default=0.1, gt=0, le=1)
    # cosine between the class directions; both classes move the same facial regions
    shared_motion: float = Field(default=0.5, ge=0, lt=1)

    @model_validator(mode="after")
    def _check_range(self) -> "SynthSpec":
        low, high = self.t_range
        if low < 10:
            raise ValueError(f"t_range minimum must be >= 10, got {low}")
        if high < low:
            raise ValueError(f"t_range {self.t_range} is empty")
        return self

    def me_snippet_limit(self) -> int:
        return int(np.floor(ME_MAX_SECONDS * self.fps / self.g + 1e-9))

    def mae_snippet_range(self) -> Tuple[int, int]:
        return self.me_snippet_limit() + 1, int(np.floor(MAE_MAX_SECONDS * self.fps / self.g + 1e-9))


def _unit(vector: np.ndarray) -> np.ndarray:
    return vector / np.linalg.norm(vector)


def class_directions(seed: int, spec: SynthSpec) -> Dict[ExpressionClass, np.ndarray]:
    """Unit shift per class: a common motion component plus a class-specific one"""
    rng = np.random.default_rng([seed, 0])
    shared = _unit(rng.standard_normal(spec.d))
    directions = {}
    for label in ExpressionClass:
        specific = _unit(rng.standard_normal(spec.d))
        mixed = np.sqrt(spec.shared_motion) * shared + np.sqrt(1.0 - spec.shared_motion) * specific
        # the components can only cancel when d == 1
        directions[label] = _unit(mixed) if np.linalg.norm(mixed) > 1e-12 else specific
    return directions


def _place_intervals(lengths: Sequence[Tuple[ExpressionClass, int]], snippets: int,
                     rng: np.random.Generator) -> List[Tuple[ExpressionClass, int, int]]:
    """Non-overlapping 0-based inclusive snippet intervals, at least one snippet apart"""
    placed: List[Tuple[ExpressionClass, int, int]] = []
    for label, length in sorted(lengths, key=lambda item: -item[1]):
        if length > snippets:
            continue
        for _ in range(100):
            start = int(rng.integers(0, snippets - length + 1))
            end = start + length - 1
            if all(end < other_start - 1 or start > other_end + 1 for _, other_start, other_end in placed):
                placed.append((label, start, end))
                break
    return sorted(placed, key=lambda item: item[1])


def _draw_lengths(snippets: int, spec: SynthSpec, rng: np.random.Generator) -> List[Tuple[ExpressionClass, int]]:
    me_limit = spec.me_snippet_limit()
    mae_low, mae_high = spec.mae_snippet_range()
    lengths: List[Tuple[ExpressionClass, int]] = []
    if rng.random() < spec.mae_rate:
        count = int(rng.integers(1, 3))
        # one or two macro-expressions sharing the budget; never shorter than the class minimum
        budget = int(np.floor(spec.mae_budget * snippets))
        upper = min(mae_high, max(mae_low, budget // count))
        lengths.extend((ExpressionClass.MAE, int(rng.integers(mae_low, upper + 1))) for _ in range(count))
    if rng.random() < spec.me_rate:
        lengths.append((ExpressionClass.ME, int(rng.integers(1, me_limit + 1))))
    return lengths


def synth_corpus(n_videos: int, seed: int, spec: Optional[SynthSpec] = None) -> Corpus:
    """Gaussian background with planted, snippet-aligned expression intervals"""
    spec = spec or SynthSpec()
    if spec.me_snippet_limit() < 1:
        raise ConfigError(f"snippet length g={spec.g} at {spec.fps} fps leaves no snippet for a micro-expression")
    mae_low, mae_high = spec.mae_snippet_range()
    if mae_high < mae_low:
        raise ConfigError(f"snippet length g={spec.g} at {spec.fps} fps leaves no macro-expression duration")

    directions = class_directions(seed, spec)

    videos = []
    for index in range(n_videos):
        rng = np.random.default_rng([seed, 1, index])
        snippets = int(rng.integers(spec.t_range[0], spec.t_range[1] + 1))
        placed = _place_intervals(_draw_lengths(snippets, spec, rng), snippets, rng)

        # same signal in both modalities, independent noise
        rgb = rng.standard_normal((snippets, spec.d))
        flow = rng.standard_normal((snippets, spec.d))
        for label, start, end in placed:
            rgb[start:end + 1] += spec.effect_size * directions[label]
            flow[start:end + 1] += spec.effect_size * directions[label]

        present = {label for label, _, _ in placed}
        video_id = f"synth_{index:04d}"
        record = VideoRecord(
            id=video_id,
            subject=f"s{index % spec.n_subjects + 1:02d}",
            fps=spec.fps,
            frame_count=snippets * spec.g,
            snippet_len=spec.g,
            labels=VideoLabels(mae=int(ExpressionClass.MAE in present), me=int(ExpressionClass.ME in present)),
            ground_truth=[
                GroundTruthInterval(onset_frame=start * spec.g + 1, offset_frame=(end + 1) * spec.g, label=label)
                for label, start, end in placed
            ],
        )
        # stored as float32 on disk, so keep exactly representable values
        videos.append(Video(
            record=record,
            rgb=FeatureMatrix(video_id, Modality.RGB, rgb.astype(np.float32).astype(np.float64)),
            flow=FeatureMatrix(video_id, Modality.FLOW, flow.astype(np.float32).astype(np.float64)),
        ))

    logger.info("synthetic_corpus", videos=n_videos, seed=seed, dim=spec.d, effect_size=spec.effect_size)
    return Corpus(videos)


# =================== SUBSAMPLING ===================

def subsample_indices(snippets: int, t_train: int, rng: np.random.Generator) -> np.ndarray:
    if t_train < 1:
        raise ArgumentError(f"t_train must be >= 1, got {t_train}")
    if snippets == t_train:
        return np.arange(snippets)
    if snippets < t_train:
        extra = rng.integers(0, snippets, size=t_train - snippets)
        return np.sort(np.concatenate([np.arange(snippets), extra]), kind="stable")
    return np.sort(rng.choice(snippets, size=t_train, replace=False))


def subsample_snippets(features: Tuple[np.ndarray, np.ndarray], t_train: int,
                       seed) -> Tuple[np.ndarray, np.ndarray]:
    """Same ascending index set applied to both modalities"""
    rgb, flow = features
    if rgb.shape[0] != flow.shape[0]:
        raise DataError(f"modalities disagree on T: {rgb.shape[0]} vs {flow.shape[0]}")
    indices = subsample_indices(rgb.shape[0], t_train, np.random.default_rng(seed))
    return rgb[indices], flow[indices]
