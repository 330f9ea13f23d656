# -*- coding: utf-8 -*-
"""
Expression spotting engine - forward model

Core Features:
1. Cross-modal enhancement of rgb and flow features (two CSCM instances)
2. Modal-specific attention heads and their class-agnostic mean
3. Modal-enhanced fused features and snippet-level class logits (T-CAM)
"""

import zlib
from collections import OrderedDict
from dataclasses import dataclass
from typing import Dict, Literal, Mapping, Optional

import numpy as np
import structlog
from pydantic import BaseModel, ConfigDict, Field

from cscm import CscmParams, cscm_forward
from errors import DataError, ShapeError
from numerics import (
    Tensor,
    TensorLike,
    add,
    as_tensor,
    concat,
    conv1d,
    conv_weight,
    dropout,
    mul,
    relu,
    reshape,
    sigmoid,
    zeros,
)

logger = structlog.get_logger(__name__)

# [mae, me, background]; background is always the last column
CLASS_NAMES = ("mae", "me", "background")
NUM_CLASSES = len(CLASS_NAMES)


class ModelSpec(BaseModel):
    model_config = ConfigDict(extra="forbid")

    hidden: int = Field(default=512, ge=1)
    head_dropout: float = Field(default=0.5, ge=0, lt=1)
    classifier_dropout: float = Field(default=0.7, ge=0, lt=1)
    # "concat" skips both CSCMs and fuses raw features
    fusion: Literal["cscm", "concat"] = "cscm"


@dataclass
class AttentionHeadParams:
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor

    @classmethod
    def init(cls, dim: int, hidden: int, rng: np.random.Generator) -> "AttentionHeadParams":
        return cls(
            w1=conv_weight(3, dim, hidden, rng),
            b1=zeros((hidden,)),
            w2=conv_weight(1, hidden, 1, rng),
            b2=zeros((1,)),
        )

    @property
    def hidden(self) -> int:
        return self.w1.shape[2]


@dataclass
class FusionClassifierParams:
    w_fuse: Tensor
    b_fuse: Tensor
    w_cls: Tensor
    b_cls: Tensor

    @classmethod
    def init(cls, dim: int, rng: np.random.Generator) -> "FusionClassifierParams":
        return cls(
            w_fuse=conv_weight(1, 2 * dim, dim, rng),
            b_fuse=zeros((dim,)),
            w_cls=conv_weight(1, dim, NUM_CLASSES, rng),
            b_cls=zeros((NUM_CLASSES,)),
        )


def _named(prefix: str, group) -> Dict[str, Tensor]:
    return {f"{prefix}.{name}": getattr(group, name) for name in group.__dataclass_fields__}


def _rebuild(group_cls, named: Mapping[str, np.ndarray], prefix: str):
    try:
        return group_cls(**{
            name: Tensor(named[f"{prefix}.{name}"], requires_grad=True)
            for name in group_cls.__dataclass_fields__
        })
    except KeyError as e:
        raise DataError(f"checkpoint is missing parameter {e}") from e


@dataclass
class ModelParams:
    cscm_rgb: CscmParams
    cscm_flow: CscmParams
    head_rgb: AttentionHeadParams
    head_flow: AttentionHeadParams
    fusion: FusionClassifierParams

    GROUPS = ("cscm_rgb", "cscm_flow", "head_rgb", "head_flow", "fusion")

    @classmethod
    def init(cls, dim: int, seed: int, spec: Optional[ModelSpec] = None) -> "ModelParams":
        spec = spec or ModelSpec()
        rng = np.random.default_rng(seed)
        return cls(
            cscm_rgb=CscmParams.init(dim, rng),
            cscm_flow=CscmParams.init(dim, rng),
            head_rgb=AttentionHeadParams.init(dim, spec.hidden, rng),
            head_flow=AttentionHeadParams.init(dim, spec.hidden, rng),
            fusion=FusionClassifierParams.init(dim, rng),
        )

    @property
    def dim(self) -> int:
        return self.cscm_rgb.dim

    def named_parameters(self) -> "OrderedDict[str, Tensor]":
        named: "OrderedDict[str, Tensor]" = OrderedDict()
        for group in self.GROUPS:
            named.update(_named(group, getattr(self, group)))
        return named

    @classmethod
    def from_named(cls, named: Mapping[str, np.ndarray]) -> "ModelParams":
        params = cls(
            cscm_rgb=_rebuild(CscmParams, named, "cscm_rgb"),
            cscm_flow=_rebuild(CscmParams, named, "cscm_flow"),
            head_rgb=_rebuild(AttentionHeadParams, named, "head_rgb"),
            head_flow=_rebuild(AttentionHeadParams, named, "head_flow"),
            fusion=_rebuild(FusionClassifierParams, named, "fusion"),
        )
        unknown = set(named) - set(params.named_parameters())
        if unknown:
            raise DataError(f"checkpoint has unexpected parameters: {sorted(unknown)}")
        return params

    def zero_grad(self):
        for param in self.named_parameters().values():
            param.zero_grad()


@dataclass
class ForwardOutputs:
    a_rgb: Tensor
    a_flow: Tensor
    a: Tensor
    fused: Tensor
    s: Tensor
    o_rgb: Tensor
    o_flow: Tensor

    @property
    def snippets(self) -> int:
        return self.a.shape[0]


def attention_head(o: TensorLike, params: AttentionHeadParams, dropout_rate: float = 0.5,
                   rng: Optional[np.random.Generator] = None) -> Tensor:
    """Per-snippet foreground probability; dropout only when rng is given"""
    o = as_tensor(o)
    hidden = dropout(relu(conv1d(o, params.w1, params.b1)), dropout_rate, rng)
    return reshape(sigmoid(conv1d(hidden, params.w2, params.b2)), (o.shape[0],))


def dropout_rng(seed: int, iteration: int, video_id: str) -> np.random.Generator:
    """Dropout stream for one video at one iteration, independent of batch order"""
    return np.random.default_rng([seed, iteration, zlib.crc32(video_id.encode("utf-8"))])


def forward(x_rgb: TensorLike, x_flow: TensorLike, params: ModelParams, training: bool = False,
            seed: Optional[int] = None, spec: Optional[ModelSpec] = None, video_id: str = "",
            iteration: int = 0) -> ForwardOutputs:
    spec = spec or ModelSpec()
    x_rgb, x_flow = as_tensor(x_rgb), as_tensor(x_flow)
    if x_rgb.shape != x_flow.shape:
        raise ShapeError(f"rgb features {x_rgb.shape} and flow features {x_flow.shape} differ")
    if x_rgb.ndim != 2 or x_rgb.shape[1] != params.dim:
        raise ShapeError(f"model expects [T x {params.dim}] features, got {x_rgb.shape}")

    rng = dropout_rng(seed, iteration, video_id) if training and seed is not None else None

    # Step 1: each modality compensated by the other, or passed through for concat fusion
    if spec.fusion == "cscm":
        o_rgb = cscm_forward(x_rgb, x_flow, params.cscm_rgb)
        o_flow = cscm_forward(x_flow, x_rgb, params.cscm_flow)
    else:
        o_rgb, o_flow = x_rgb, x_flow

    # Step 2: class-agnostic attention per modality and their mean
    a_rgb = attention_head(o_rgb, params.head_rgb, spec.head_dropout, rng)
    a_flow = attention_head(o_flow, params.head_flow, spec.head_dropout, rng)
    a = mul(add(a_rgb, a_flow), 0.5)

    # Step 3: fused features and the T-CAM
    fusion = params.fusion
    fused = conv1d(concat([o_rgb, o_flow], axis=1), fusion.w_fuse, fusion.b_fuse)
    s = conv1d(dropout(fused, spec.classifier_dropout, rng), fusion.w_cls, fusion.b_cls)

    return ForwardOutputs(a_rgb=a_rgb, a_flow=a_flow, a=a, fused=fused, s=s, o_rgb=o_rgb, o_flow=o_flow)
