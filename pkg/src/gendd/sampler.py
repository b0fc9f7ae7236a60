"""Reverse-process feature generation with respacing and classifier-free guidance."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .errors import NonFiniteError, ValidationError
from .schedule import NoiseSchedule, RespacedSchedule, respace
from .tokenizer import FeatureStats, assemble, invert_stats

VARIANCE_MODES = ("posterior", "zero")


@dataclass
class SamplerConfig:
    steps: int = 64
    guidance_scale: float = 2.0
    variance: str = "posterior"
    seed: int = 0

    def __post_init__(self):
        if self.steps < 1:
            raise ValidationError("sampler steps must be >= 1")
        if self.guidance_scale < 0:
            raise ValidationError("guidance scale must be >= 0")
        if self.variance not in VARIANCE_MODES:
            raise ValidationError(f"unknown variance mode {self.variance!r}")


def guided_eps(head, x, m, ids, cond, scale: float) -> torch.Tensor:
    """``eps_u + s * (eps_c - eps_u)``; scales 0 and 1 return a single branch exactly."""
    if cond is None or scale == 0:
        return head(x, m, ids, None)
    eps_c = head(x, m, ids, cond)
    if scale == 1:
        return eps_c
    eps_u = head(x, m, ids, None)
    return eps_u + scale * (eps_c - eps_u)


def _view_index(view: RespacedSchedule, m: int) -> int:
    j = int(np.searchsorted(view.steps, m))
    if j >= view.S or view.steps[j] != m:
        raise ValidationError(f"step {m} is not kept by the respaced schedule")
    return j


def reverse_step(head, view: RespacedSchedule, x_m: torch.Tensor, m: int, ids, cond,
                 config: SamplerConfig, noise: torch.Tensor | None = None) -> torch.Tensor:
    """One update ``x_m -> x_{m_prev}`` over the respaced chain.

    ``m`` is a base-schedule step kept by ``view``. ``noise`` is the standard
    normal draw for this step; it is ignored on the final step and in
    ``zero`` variance mode.
    """
    j = _view_index(view, m)
    alpha, beta, abar = float(view.alphas[j]), float(view.betas[j]), float(view.alpha_bar[j])
    eps = guided_eps(head, x_m, m, ids, cond, config.guidance_scale)
    x_prev = (x_m - beta / np.sqrt(1.0 - abar) * eps) / np.sqrt(alpha)
    if j > 0 and config.variance == "posterior":
        if noise is None:
            raise ValidationError("posterior variance mode needs a noise draw")
        x_prev = x_prev + float(np.sqrt(view.posterior_variance()[j])) * noise
    if not torch.isfinite(x_prev).all():
        raise NonFiniteError(
            f"non-finite sampler state at step {m}",
            {"step": m, "view_index": j, "alpha_bar": abar,
             "eps_finite": bool(torch.isfinite(eps).all()), "input_finite": bool(torch.isfinite(x_m).all())},
        )
    return x_prev


def sample_generators(seed: int, sample_indices) -> list[torch.Generator]:
    """One RNG substream per sample, keyed by its global index, so results do
    not depend on how samples are batched."""
    return [torch.Generator().manual_seed(int(seed) * 1_000_003 + int(i)) for i in sample_indices]


def _draw(gens, shape, dtype, device) -> torch.Tensor:
    return torch.stack([torch.randn(shape, generator=g, dtype=dtype) for g in gens]).to(device)


@torch.no_grad()
def sample_tokens(head, view: RespacedSchedule, condition: torch.Tensor, config: SamplerConfig,
                  sample_indices=None, token_ids=None) -> torch.Tensor:
    """Run all token chains of a batch in parallel; returns (B, n, d_tok).

    ``token_ids`` restricts sampling to a subset of positions; each sample's
    noise stream is still drawn for every position, so any subset reproduces
    the corresponding slice of the full run exactly.
    """
    B = condition.shape[0]
    n, d_tok = head.n_positions, head.token_dim
    dtype, device = head.null_condition.dtype, condition.device
    if sample_indices is None:
        sample_indices = range(B)
    gens = sample_generators(config.seed, sample_indices)
    sel = torch.arange(n, device=device) if token_ids is None else torch.as_tensor(token_ids, device=device)
    x = _draw(gens, (n, d_tok), dtype, device)[:, sel]
    cond = condition.to(dtype)
    for j in range(view.S - 1, -1, -1):
        noise = _draw(gens, (n, d_tok), dtype, device)[:, sel] if j > 0 else None
        x = reverse_step(head, view, x, int(view.steps[j]), sel, cond, config, noise)
    return x


def generate_feature(head, schedule: NoiseSchedule | RespacedSchedule, condition: torch.Tensor,
                     config: SamplerConfig, stats: FeatureStats | None = None,
                     feature_dim: int | None = None, sample_indices=None) -> torch.Tensor:
    """Generate teacher-space features (B, d_t) from student conditions (B, d_s)."""
    view = schedule if isinstance(schedule, RespacedSchedule) else respace(schedule, config.steps)
    tokens = sample_tokens(head, view, condition, config, sample_indices)
    if feature_dim is None:
        feature_dim = stats.dim if stats is not None else tokens.shape[1] * tokens.shape[2]
    feats = assemble(tokens, feature_dim)
    if stats is not None:
        feats = invert_stats(feats, stats)
    return feats


@torch.no_grad()
def classify(classifier, features: torch.Tensor):
    """Teacher-classifier argmax labels and softmax probabilities."""
    if isinstance(classifier, torch.nn.Linear) and features.shape[-1] != classifier.in_features:
        raise ValidationError(f"feature dim {features.shape[-1]} != classifier input {classifier.in_features}")
    param = next(classifier.parameters(), None) if isinstance(classifier, torch.nn.Module) else None
    if param is not None:
        features = features.to(param.dtype)
    logits = classifier(features)
    probs = torch.softmax(logits, dim=-1)
    return logits.argmax(dim=-1), probs
