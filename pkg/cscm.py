# -*- coding: utf-8 -*-
"""
Expression spotting engine - core saliency compensation

Core Features:
1. Squeeze the main modality into a channel descriptor
2. Self-attention over the main modality to find its salient core
3. Gate the main modality with the auxiliary modality plus that core

Two independent instances run per forward pass: rgb-main/flow-aux and
flow-main/rgb-aux, through the same code path.
"""

from dataclasses import dataclass

import numpy as np

from errors import ShapeError
from numerics import (
    Tensor,
    add,
    conv1d,
    conv_weight,
    matmul,
    mean_over_axis,
    mul,
    reshape,
    sigmoid,
    softmax,
    transpose,
    zeros,
)


@dataclass
class CscmParams:
    w_main: Tensor
    b_main: Tensor
    w_q: Tensor
    b_q: Tensor
    w_f: Tensor
    b_f: Tensor
    w_aux: Tensor
    b_aux: Tensor

    @classmethod
    def init(cls, dim: int, rng: np.random.Generator) -> "CscmParams":
        return cls(
            w_main=conv_weight(3, dim, dim, rng),
            b_main=zeros((dim,)),
            w_q=conv_weight(1, dim, dim, rng),
            b_q=zeros((dim,)),
            w_f=conv_weight(1, dim, dim, rng),
            b_f=zeros((dim,)),
            w_aux=conv_weight(3, dim, dim, rng),
            b_aux=zeros((dim,)),
        )

    @property
    def dim(self) -> int:
        return self.w_main.shape[1]


def squeeze_main(x_main: Tensor, params: CscmParams) -> Tensor:
    """Channel descriptor in (0, 1)^D from the temporally pooled main features"""
    pooled = mean_over_axis(x_main, axis=0, keepdims=True)
    return reshape(sigmoid(conv1d(pooled, params.w_main, params.b_main)), (params.dim,))


def core_attention(x_main: Tensor, params: CscmParams):
    """Query projection and its row-normalized T x T self-attention matrix"""
    queries = conv1d(x_main, params.w_q, params.b_q)
    return queries, softmax(matmul(queries, transpose(queries)), axis=1)


def core_saliency(x_main: Tensor, params: CscmParams) -> Tensor:
    queries, attention = core_attention(x_main, params)
    # no shortcut back to x_main
    return conv1d(matmul(attention, queries), params.w_f, params.b_f)


def cscm_forward(x_main: Tensor, x_aux: Tensor, params: CscmParams) -> Tensor:
    """Main-modality features gated by a descriptor built from both modalities"""
    if x_main.shape != x_aux.shape:
        raise ShapeError(f"main features {x_main.shape} and auxiliary features {x_aux.shape} differ")
    f_main = squeeze_main(x_main, params)
    f_core = core_saliency(x_main, params)
    f_aux = conv1d(add(x_aux, f_core), params.w_aux, params.b_aux)
    gate = sigmoid(mul(f_aux, f_main))
    return mul(gate, x_main)
