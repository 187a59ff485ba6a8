"""Uncertainty-guided low-rank attention over shallow features.

The uncertainty map is pooled to a token grid and passed through two small
convolutions giving Q (tokens x r) and K (r x tokens). Their product is at
most rank r before the row softmax. The resulting attention mixes pooled
features; the mix is upsampled and added back onto the input features.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import DimensionError, Tensor, as_tensor


@dataclass
class EugaConfig:
    rank: int = 8
    token_stride: int = 4
    feature_channels: int = 16
    qk_kernel: int = 3

    def __post_init__(self):
        if self.rank < 1 or self.token_stride < 1:
            raise ValueError("rank and token_stride must be positive")
        if self.qk_kernel % 2 == 0:
            raise ValueError("qk_kernel must be odd")

    def validate_for(self, h: int, w: int) -> int:
        s = self.token_stride
        if h % s or w % s:
            raise DimensionError(f"token_stride {s} does not divide {h}x{w}")
        n_tok = (h // s) * (w // s)
        if self.rank > n_tok:
            raise DimensionError(f"rank {self.rank} exceeds token count {n_tok}")
        return n_tok


@dataclass
class EugaWeights:
    q_weight: Tensor  # (r, 1, k, k)
    q_bias: Tensor  # (r,)
    k_weight: Tensor
    k_bias: Tensor


def attention_weights(umap, w: EugaWeights, cfg: EugaConfig) -> Tensor:
    """Row-stochastic attention (N, tokens, tokens) from an (N, 1, H, W) map."""
    umap = as_tensor(umap)
    n, _, h, wd = umap.shape
    n_tok = cfg.validate_for(h, wd)
    pooled = T.avgpool(umap, cfg.token_stride) if cfg.token_stride > 1 else umap
    q = T.conv2d(pooled, w.q_weight, w.q_bias).reshape(n, cfg.rank, n_tok)
    k = T.conv2d(pooled, w.k_weight, w.k_bias).reshape(n, cfg.rank, n_tok)
    scores = T.transpose(q, (0, 2, 1)) @ k
    return T.softmax(scores * (1.0 / math.sqrt(cfg.rank)))


def score_matrix(umap, w: EugaWeights, cfg: EugaConfig) -> np.ndarray:
    """Pre-softmax scores Q K, without the 1/sqrt(r) scaling (for rank diagnostics)."""
    umap = as_tensor(umap)
    n, _, h, wd = umap.shape
    n_tok = cfg.validate_for(h, wd)
    pooled = T.avgpool(umap, cfg.token_stride) if cfg.token_stride > 1 else umap
    q = T.conv2d(pooled, w.q_weight, w.q_bias).data.reshape(n, cfg.rank, n_tok)
    k = T.conv2d(pooled, w.k_weight, w.k_bias).data.reshape(n, cfg.rank, n_tok)
    return np.swapaxes(q, 1, 2) @ k


def euga_forward(features, umap, w: EugaWeights, cfg: EugaConfig, return_attention: bool = False):
    """features (N, C_f, H, W), umap (N, 1, H, W) -> features + attended features."""
    features, umap = as_tensor(features), as_tensor(umap)
    if features.ndim != 4 or umap.ndim != 4 or umap.shape[1] != 1:
        raise DimensionError(f"euga: features {features.shape}, umap {umap.shape}")
    if features.shape[0] != umap.shape[0] or features.shape[2:] != umap.shape[2:]:
        raise DimensionError(f"euga: features {features.shape} and umap {umap.shape} disagree")
    n, c, h, wd = features.shape
    s = cfg.token_stride
    attn = attention_weights(umap, w, cfg)
    values = T.avgpool(features, s) if s > 1 else features
    values = values.reshape(n, c, attn.shape[-1])
    mixed = values @ T.transpose(attn, (0, 2, 1))
    mixed = mixed.reshape(n, c, h // s, wd // s)
    if s > 1:
        mixed = T.upsample(mixed, s)
    out = features + mixed
    return (out, attn) if return_attention else out


def attention_entropy(attn) -> float:
    """Mean Shannon entropy of the attention rows (natural log)."""
    a = attn.data if isinstance(attn, Tensor) else np.asarray(attn, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(a > 0, -a * np.log(a), 0.0)
    return float(terms.sum(axis=-1).mean())
