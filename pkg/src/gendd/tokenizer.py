"""Split teacher features into position-indexed tokens, and back.

Also holds the per-dimension standardization applied to teacher features
before tokenization.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable

import numpy as np
import torch
import torch.nn.functional as F

from .errors import ValidationError

STATS_VERSION = 1
STD_FLOOR = 1e-6


@dataclass
class TokenBatch:
    tokens: torch.Tensor  # (B, n, d_tok)
    position_ids: torch.Tensor  # (n,)
    condition: torch.Tensor | None  # (B, d_s)
    labels: torch.Tensor | None = None  # (B,)
    feature_dim: int = 0

    @property
    def n_tokens(self) -> int:
        return self.tokens.shape[1]

    @property
    def token_dim(self) -> int:
        return self.tokens.shape[2]


def num_tokens(d_t: int, d_tok: int) -> int:
    return math.ceil(d_t / d_tok)


def split_features(features: torch.Tensor, d_tok: int) -> torch.Tensor:
    """(B, d_t) -> (B, ceil(d_t / d_tok), d_tok), zero-padding the last token."""
    if d_tok < 1:
        raise ValidationError(f"d_tok must be >= 1, got {d_tok}")
    if features.dim() != 2:
        raise ValidationError(f"features must be (B, d_t), got {tuple(features.shape)}")
    if not torch.isfinite(features).all():
        raise ValidationError("features contain non-finite values")
    B, d_t = features.shape
    n = num_tokens(d_t, d_tok)
    pad = n * d_tok - d_t
    if pad:
        features = F.pad(features, (0, pad))
    return features.reshape(B, n, d_tok)


def split(
    features: torch.Tensor,
    d_tok: int,
    condition: torch.Tensor | None = None,
    labels: torch.Tensor | None = None,
) -> TokenBatch:
    tokens = split_features(features, d_tok)
    if condition is not None and condition.shape[0] != features.shape[0]:
        raise ValidationError("condition batch size does not match features")
    return TokenBatch(
        tokens=tokens,
        position_ids=torch.arange(tokens.shape[1], device=features.device),
        condition=condition,
        labels=labels,
        feature_dim=features.shape[1],
    )


def assemble(tokens: torch.Tensor, d_t: int) -> torch.Tensor:
    if tokens.dim() != 3:
        raise ValidationError(f"tokens must be (B, n, d_tok), got {tuple(tokens.shape)}")
    B, n, d_tok = tokens.shape
    if n * d_tok < d_t:
        raise ValidationError(f"{n} tokens of dim {d_tok} cannot hold {d_t} features")
    return tokens.reshape(B, n * d_tok)[:, :d_t]


@dataclass
class FeatureStats:
    mean: np.ndarray
    std: np.ndarray
    sample_count: int
    version: int = STATS_VERSION

    @property
    def dim(self) -> int:
        return self.mean.shape[0]

    @classmethod
    def identity(cls, d_t: int) -> "FeatureStats":
        return cls(np.zeros(d_t), np.ones(d_t), 0)

    def state_dict(self) -> dict:
        return {
            "version": self.version,
            "mean": np.asarray(self.mean, dtype=np.float64),
            "std": np.asarray(self.std, dtype=np.float64),
            "sample_count": int(self.sample_count),
        }

    @classmethod
    def from_state_dict(cls, state: dict) -> "FeatureStats":
        if state.get("version") != STATS_VERSION:
            raise ValidationError(f"unsupported feature-stats version {state.get('version')}")
        return cls(
            np.asarray(state["mean"], dtype=np.float64),
            np.asarray(state["std"], dtype=np.float64),
            int(state["sample_count"]),
        )


def fit_stats(features: Iterable, unbiased: bool = True) -> FeatureStats:
    """Per-dimension mean/std over a stream of feature rows or row batches.

    Accumulates in float64 with Chan's parallel update so arbitrarily long
    streams are fine. ``unbiased`` selects the n-1 denominator.
    """
    count = 0
    mean = m2 = None
    for chunk in features:
        if isinstance(chunk, torch.Tensor):
            chunk = chunk.detach().cpu().numpy()
        x = np.atleast_2d(np.asarray(chunk, dtype=np.float64))
        if x.shape[0] == 0:
            continue
        n_b = x.shape[0]
        mean_b = x.mean(axis=0)
        m2_b = ((x - mean_b) ** 2).sum(axis=0)
        if mean is None:
            count, mean, m2 = n_b, mean_b, m2_b
            continue
        if x.shape[1] != mean.shape[0]:
            raise ValidationError("feature dimension changed mid-stream")
        delta = mean_b - mean
        total = count + n_b
        mean = mean + delta * n_b / total
        m2 = m2 + m2_b + delta**2 * count * n_b / total
        count = total
    if mean is None:
        raise ValidationError("cannot fit stats on an empty stream")
    if count < 2:
        raise ValidationError("need at least 2 samples to fit stats")
    var = m2 / (count - 1 if unbiased else count)
    std = np.maximum(np.sqrt(var), STD_FLOOR)
    return FeatureStats(mean=mean, std=std, sample_count=count)


def _stats_tensors(stats: FeatureStats, features):
    if features.shape[-1] != stats.dim:
        raise ValidationError(f"feature dim {features.shape[-1]} != stats dim {stats.dim}")
    if isinstance(features, torch.Tensor):
        mean = torch.as_tensor(stats.mean, dtype=features.dtype, device=features.device)
        std = torch.as_tensor(stats.std, dtype=features.dtype, device=features.device)
        return mean, std
    return stats.mean, stats.std


def apply_stats(features, stats: FeatureStats):
    mean, std = _stats_tensors(stats, features)
    return (features - mean) / std


def invert_stats(features, stats: FeatureStats):
    mean, std = _stats_tensors(stats, features)
    return features * std + mean
