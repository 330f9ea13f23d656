# -*- coding: utf-8 -*-
"""
Expression spotting engine - consistency losses

Core Features:
1. Class-wise top-K pooling of T-CAMs into video-level probabilities
2. Three MIL classification terms (raw, attention-suppressed, duration-masked)
3. Attention-guided feature consistency across video pairs
4. Modal consistency, sparsity and guide terms on the attention scores
5. Joint objective with per-term weights and ablation switches
"""

from dataclasses import dataclass, fields
from typing import Dict, List, Sequence, Tuple

import numpy as np
import structlog
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from errors import ConfigError, ShapeError
from numerics import (
    Tensor,
    TensorLike,
    add,
    as_tensor,
    div,
    gather,
    l1_norm,
    log_softmax,
    matmul,
    max_over_axis,
    mul,
    reduce_sum,
    reshape,
    softmax,
    square,
    stop_gradient,
    sub,
    topk_indices,
    transpose,
)
from pipeline import NUM_CLASSES, ForwardOutputs

logger = structlog.get_logger(__name__)

MAE, ME, BACKGROUND = 0, 1, 2
FOREGROUND = (MAE, ME)


class PoolingSpec(BaseModel):
    model_config = ConfigDict(extra="forbid")

    # divisors per class, ordered [mae, me, background]
    h: Tuple[int, int, int] = (7, 9, 5)

    @field_validator("h")
    @classmethod
    def _positive(cls, value):
        if any(divisor < 1 for divisor in value):
            raise ValueError(f"every pooling divisor must be >= 1, got {value}")
        return value

    def rates(self, snippets: int) -> List[int]:
        return [max(1, snippets // divisor) for divisor in self.h]


class DurationMaskSpec(BaseModel):
    model_config = ConfigDict(extra="forbid")

    eta: int = Field(default=2, ge=1)
    omega_l: float = Field(default=1.2, gt=0)
    omega_u: float = Field(default=1.4, gt=0)

    @model_validator(mode="after")
    def _ordered(self) -> "DurationMaskSpec":
        if self.omega_l >= self.omega_u:
            raise ValueError(f"omega_l ({self.omega_l}) must be below omega_u ({self.omega_u})")
        return self


class LossWeights(BaseModel):
    model_config = ConfigDict(extra="forbid")

    lambda1: float = Field(default=0.5, ge=0)
    lambda2: float = Field(default=0.5, ge=0)
    lambda3: float = Field(default=0.8, ge=0)
    lambda4: float = Field(default=0.8, ge=0)
    enable_sc: bool = True
    enable_dc1: bool = True
    enable_dc2: bool = True


@dataclass
class LossComponents:
    sc: Tensor
    dc1: Tensor
    dc2: Tensor
    dc3: Tensor
    fc: Tensor
    sl: Tensor
    gl: Tensor

    def as_floats(self) -> Dict[str, float]:
        return {f"L_{item.name}": getattr(self, item.name).item() for item in fields(self)}


# =================== POOLING & MIL ===================

def topk_selection(s: TensorLike, spec: PoolingSpec) -> List[np.ndarray]:
    """Selected snippet indices per class column"""
    s = as_tensor(s)
    if s.ndim != 2 or s.shape[1] != len(spec.h):
        raise ShapeError(f"T-CAM must be [T x {len(spec.h)}], got {s.shape}")
    rates = spec.rates(s.shape[0])
    return [topk_indices(s.data[:, column], k) for column, k in enumerate(rates)]


def topk_pool(s: TensorLike, spec: PoolingSpec) -> Tuple[Tensor, Tensor]:
    """Mean of the k_i largest logits per class, then softmax over classes"""
    s = as_tensor(s)
    weights = np.zeros(s.shape)
    for column, selected in enumerate(topk_selection(s, spec)):
        weights[selected, column] = 1.0 / len(selected)
    u = reduce_sum(mul(s, weights), axis=0)
    return u, softmax(u, axis=0)


def mil_cross_entropy(u: Tensor, target: Sequence[float]) -> Tensor:
    return mul(reduce_sum(mul(log_softmax(u, axis=0), np.asarray(target, dtype=np.float64))), -1.0)


def _labels(y_video) -> Tuple[float, float]:
    y = np.asarray(y_video, dtype=np.float64).reshape(-1)
    if y.shape != (2,):
        raise ShapeError(f"video label must be [mae, me], got shape {y.shape}")
    return float(y[MAE]), float(y[ME])


def loss_dc1(s: TensorLike, y_video, spec: PoolingSpec) -> Tensor:
    y_mae, y_me = _labels(y_video)
    return mil_cross_entropy(topk_pool(s, spec)[0], [y_mae, y_me, 1.0])


def suppress(s: TensorLike, a: TensorLike) -> Tensor:
    s, a = as_tensor(s), as_tensor(a)
    if a.shape != (s.shape[0],):
        raise ShapeError(f"attention of shape {a.shape} does not match T-CAM {s.shape}")
    return mul(s, reshape(a, (s.shape[0], 1)))


def loss_dc2(s_hat: TensorLike, y_video, spec: PoolingSpec) -> Tensor:
    y_mae, y_me = _labels(y_video)
    return mil_cross_entropy(topk_pool(s_hat, spec)[0], [y_mae, y_me, 0.0])


def duration_mask(a: TensorLike, spec: DurationMaskSpec) -> np.ndarray:
    """0 where the windowed attention jumps by between omega_l and omega_u times its mean jump"""
    values = a.data if isinstance(a, Tensor) else np.asarray(a, dtype=np.float64)
    snippets, eta = values.shape[0], spec.eta
    if snippets <= eta:
        raise ConfigError(f"duration mask needs T > eta, got T={snippets}, eta={eta}")

    window_means = np.lib.stride_tricks.sliding_window_view(values, eta).mean(axis=1)
    deviations = np.abs(np.diff(window_means))
    mean_deviation = deviations.mean()
    inside = (deviations > spec.omega_l * mean_deviation) & (deviations < spec.omega_u * mean_deviation)

    mask = np.ones(snippets)
    # the trailing eta positions have no deviation and stay unmasked
    mask[:snippets - eta][inside] = 0.0
    return mask


def loss_dc3(s: TensorLike, mask: np.ndarray, y_video, spec: PoolingSpec) -> Tensor:
    s = as_tensor(s)
    y_mae, _ = _labels(y_video)
    masked = mul(s, np.asarray(mask, dtype=np.float64).reshape(-1, 1))
    return mil_cross_entropy(topk_pool(masked, spec)[0], [y_mae, 0.0, 1.0])


# =================== FEATURE CONSISTENCY ===================

@dataclass
class ConsistencyView:
    """What one video contributes to a consistency pair"""

    a: Tensor
    s: Tensor
    fused: Tensor
    labels: np.ndarray

    @classmethod
    def from_outputs(cls, outputs: ForwardOutputs, labels) -> "ConsistencyView":
        return cls(a=outputs.a, s=outputs.s, fused=outputs.fused, labels=np.asarray(labels, dtype=np.float64))

    @property
    def snippets(self) -> int:
        return self.a.shape[0]


def shared_labels(first: ConsistencyView, second: ConsistencyView) -> List[int]:
    return [column for column in FOREGROUND if first.labels[column] * second.labels[column] > 0]


def consistency_score(source: ConsistencyView, target: ConsistencyView, column: int, h_mae: int) -> Tensor:
    """Attention-weighted similarity of target snippets to the source's salient snippets for one class"""
    k = max(1, source.snippets // h_mae)
    selected = topk_indices(source.a, k)
    class_weights = softmax(gather(source.s, (selected[:, None], np.array(FOREGROUND)[None, :])), axis=1)
    salient = mul(gather(source.fused, selected), reshape(gather(class_weights, (slice(None), column)), (k, 1)))
    similarity = softmax(matmul(target.fused, transpose(salient)), axis=1)
    best = max_over_axis(similarity, axis=1)
    return div(reduce_sum(mul(target.a, best)), reduce_sum(target.a))


def feature_consistency(pairs: Sequence[Tuple[ConsistencyView, ConsistencyView]], spec: PoolingSpec) -> Tensor:
    """1 - mean consistency over every shared label of every pair, both directions"""
    h_mae = spec.h[MAE]
    scores: List[Tensor] = []
    valid_labels = 0
    for index, (first, second) in enumerate(pairs):
        shared = shared_labels(first, second)
        if not shared:
            logger.warning("pair_without_shared_label", pair=index)
            continue
        for column in shared:
            scores.append(consistency_score(first, second, column, h_mae))
            scores.append(consistency_score(second, first, column, h_mae))
        valid_labels += len(shared)

    if valid_labels == 0:
        logger.warning("no_valid_consistency_labels", pairs=len(pairs))
        return Tensor(0.0)

    total = scores[0]
    for score in scores[1:]:
        total = add(total, score)
    return sub(1.0, mul(total, 1.0 / (2 * valid_labels)))


# =================== ATTENTION TERMS ===================

def loss_sc(a_rgb: TensorLike, a_flow: TensorLike) -> Tensor:
    """Mutual learning between the modal attentions, each against the other's detached copy"""
    a_rgb, a_flow = as_tensor(a_rgb), as_tensor(a_flow)
    snippets = a_rgb.shape[0]
    rgb_term = reduce_sum(square(sub(a_rgb, stop_gradient(a_flow))))
    flow_term = reduce_sum(square(sub(stop_gradient(a_rgb), a_flow)))
    return mul(add(rgb_term, flow_term), 1.0 / (2 * snippets))


def loss_sl(a: TensorLike, a_rgb: TensorLike, a_flow: TensorLike) -> Tensor:
    a = as_tensor(a)
    total = add(add(l1_norm(a), l1_norm(a_rgb)), l1_norm(a_flow))
    return mul(total, 1.0 / (3 * a.shape[0]))


def foreground_probability(s: TensorLike) -> Tensor:
    """Per-snippet 1 - p(background) from the class softmax of each T-CAM row"""
    s = as_tensor(s)
    return sub(1.0, gather(softmax(s, axis=1), (slice(None), BACKGROUND)))


def loss_gl(p_f: TensorLike, a: TensorLike, a_rgb: TensorLike, a_flow: TensorLike) -> Tensor:
    """Pull every attention toward the snippet foreground probability; a scalar p_f is broadcast over T"""
    a = as_tensor(a)
    terms = [l1_norm(sub(p_f, attention)) for attention in (a, a_rgb, a_flow)]
    return mul(add(add(terms[0], terms[1]), terms[2]), 1.0 / (3 * a.shape[0]))


# =================== JOINT OBJECTIVE ===================

def video_losses(outputs: ForwardOutputs, labels, pooling: PoolingSpec, mask_spec: DurationMaskSpec) -> LossComponents:
    """Every per-video term from one forward pass; fc is filled in per batch"""
    if outputs.s.shape[1] != NUM_CLASSES:
        raise ShapeError(f"T-CAM must have {NUM_CLASSES} columns, got {outputs.s.shape}")
    s_hat = suppress(outputs.s, outputs.a)
    mask = duration_mask(outputs.a, mask_spec)
    return LossComponents(
        sc=loss_sc(outputs.a_rgb, outputs.a_flow),
        dc1=loss_dc1(outputs.s, labels, pooling),
        dc2=loss_dc2(s_hat, labels, pooling),
        dc3=loss_dc3(outputs.s, mask, labels, pooling),
        fc=Tensor(0.0),
        sl=loss_sl(outputs.a, outputs.a_rgb, outputs.a_flow),
        gl=loss_gl(foreground_probability(outputs.s), outputs.a, outputs.a_rgb, outputs.a_flow),
    )


def batch_mean(per_video: Sequence[LossComponents], fc: Tensor) -> LossComponents:
    """Average per-video terms over the batch and attach the batch's consistency term"""
    scale = 1.0 / len(per_video)
    averaged = {}
    for item in fields(LossComponents):
        if item.name == "fc":
            continue
        total = getattr(per_video[0], item.name)
        for components in per_video[1:]:
            total = add(total, getattr(components, item.name))
        averaged[item.name] = mul(total, scale)
    return LossComponents(fc=fc, **averaged)


def joint_loss(components: LossComponents, weights: LossWeights) -> Tensor:
    total = Tensor(0.0)
    if weights.enable_sc:
        total = add(total, components.sc)
    if weights.enable_dc1:
        total = add(total, components.dc1)
    if weights.enable_dc2:
        total = add(total, components.dc2)
    total = add(total, mul(components.dc3, weights.lambda1))
    total = add(total, mul(components.fc, weights.lambda2))
    total = add(total, mul(components.sl, weights.lambda3))
    return add(total, mul(components.gl, weights.lambda4))


def joint_total(values: Dict[str, float], weights: LossWeights) -> float:
    """joint_loss on plain floats, as recorded in a loss trace"""
    total = 0.0
    if weights.enable_sc:
        total += values["L_sc"]
    if weights.enable_dc1:
        total += values["L_dc1"]
    if weights.enable_dc2:
        total += values["L_dc2"]
    total += weights.lambda1 * values["L_dc3"]
    total += weights.lambda2 * values["L_fc"]
    total += weights.lambda3 * values["L_sl"]
    return total + weights.lambda4 * values["L_gl"]
