"""Forward-diffusion variance schedules and respaced sampling views.

Step indices are 1-based: ``betas[m - 1]`` is the variance added at step
``m`` and ``alpha_bar[m]`` is the cumulative product up to ``m``, with
``alpha_bar[0] == 1``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch

from .errors import ConfigError, ValidationError

KINDS = ("linear", "cosine")
MAX_BETA = 0.999


def _cosine_betas(M: int, s: float = 0.008) -> np.ndarray:
    t = np.arange(M + 1, dtype=np.float64) / M
    f = np.cos((t + s) / (1 + s) * math.pi / 2) ** 2
    betas = 1.0 - f[1:] / f[:-1]
    return np.minimum(betas, MAX_BETA)


def _linear_betas(M: int) -> np.ndarray:
    # 1e-4..2e-2 at M=1000, rescaled so short chains still reach high noise
    scale = 1000.0 / M
    start = min(scale * 1e-4, MAX_BETA)
    end = min(scale * 2e-2, MAX_BETA)
    return np.linspace(start, end, M, dtype=np.float64)


@dataclass(frozen=True, eq=False)
class NoiseSchedule:
    kind: str
    M: int
    betas: np.ndarray = field(repr=False)
    alphas: np.ndarray = field(repr=False)
    alpha_bar: np.ndarray = field(repr=False)

    @classmethod
    def from_betas(cls, betas, kind: str = "custom") -> "NoiseSchedule":
        betas = np.asarray(betas, dtype=np.float64).copy()
        if betas.ndim != 1 or betas.size == 0:
            raise ValidationError("betas must be a non-empty 1-d array")
        if not np.all((betas >= 0) & (betas < 1)):
            raise ValidationError("betas must lie in [0, 1)")
        alphas = 1.0 - betas
        alpha_bar = np.empty(betas.size + 1, dtype=np.float64)
        alpha_bar[0] = 1.0
        # sequential product so alpha_bar[m] == alpha_bar[m-1] * alphas[m-1] exactly
        for i, a in enumerate(alphas):
            alpha_bar[i + 1] = alpha_bar[i] * a
        for arr in (betas, alphas, alpha_bar):
            arr.setflags(write=False)
        return cls(kind=kind, M=int(betas.size), betas=betas, alphas=alphas, alpha_bar=alpha_bar)

    def beta(self, m: int) -> float:
        self.check_step(m)
        return float(self.betas[m - 1])

    def alpha(self, m: int) -> float:
        self.check_step(m)
        return float(self.alphas[m - 1])

    def check_step(self, m: int) -> None:
        if not 1 <= int(m) <= self.M:
            raise ValidationError(f"step {m} outside [1, {self.M}]")

    def alpha_bar_tensor(self, like: torch.Tensor | None = None) -> torch.Tensor:
        t = torch.from_numpy(np.array(self.alpha_bar))
        if like is not None:
            t = t.to(device=like.device, dtype=like.dtype)
        return t


def build_schedule(kind: str = "cosine", M: int = 1000) -> NoiseSchedule:
    if kind not in KINDS:
        raise ConfigError(f"unsupported schedule kind {kind!r}; expected one of {KINDS}")
    if int(M) != M or M <= 0:
        raise ValidationError(f"M must be a positive integer, got {M}")
    betas = _cosine_betas(M) if kind == "cosine" else _linear_betas(M)
    return NoiseSchedule.from_betas(betas, kind=kind)


def forward_noise(s: NoiseSchedule, x0, m, eps):
    """Sample ``x_m = sqrt(abar_m) * x0 + sqrt(1 - abar_m) * eps``.

    ``m`` is an int or an integer tensor broadcastable against the leading
    dimensions of ``x0``. Works on numpy arrays and torch tensors.
    """
    if tuple(x0.shape) != tuple(eps.shape):
        raise ValidationError(f"x0 shape {tuple(x0.shape)} != eps shape {tuple(eps.shape)}")
    if isinstance(x0, torch.Tensor):
        m_t = torch.as_tensor(m, device=x0.device, dtype=torch.long)
        if m_t.numel() and (int(m_t.min()) < 1 or int(m_t.max()) > s.M):
            raise ValidationError(f"step outside [1, {s.M}]")
        ab = s.alpha_bar_tensor(x0)[m_t]
        while ab.dim() < x0.dim():
            ab = ab.unsqueeze(-1)
        return ab.sqrt() * x0 + (1.0 - ab).sqrt() * eps
    m_a = np.asarray(m)
    if m_a.size and (m_a.min() < 1 or m_a.max() > s.M):
        raise ValidationError(f"step outside [1, {s.M}]")
    ab = s.alpha_bar[m_a]
    x0 = np.asarray(x0, dtype=np.float64)
    ab = np.reshape(ab, ab.shape + (1,) * (x0.ndim - ab.ndim))
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * np.asarray(eps, dtype=np.float64)


@dataclass(frozen=True, eq=False)
class RespacedSchedule:
    """Reverse-process view over a strictly increasing subsequence of steps.

    Position ``j`` of the view corresponds to base step ``steps[j]``; the
    effective ``alpha[j]`` is the ratio of consecutive kept cumulative
    products (the implicit previous step of ``steps[0]`` is 0).
    """

    base: NoiseSchedule
    steps: np.ndarray
    alpha_bar: np.ndarray = field(repr=False)
    alpha_bar_prev: np.ndarray = field(repr=False)
    alphas: np.ndarray = field(repr=False)
    betas: np.ndarray = field(repr=False)

    @property
    def S(self) -> int:
        return int(self.steps.size)

    def posterior_variance(self) -> np.ndarray:
        return self.betas * (1.0 - self.alpha_bar_prev) / (1.0 - self.alpha_bar)


def respace_steps(M: int, S: int) -> np.ndarray:
    if int(S) != S or not 1 <= S <= M:
        raise ValidationError(f"S must be an integer in [1, {M}], got {S}")
    if S == 1:
        return np.array([M], dtype=np.int64)
    # spacing (M-1)/(S-1) >= 1, so rounding keeps the sequence strictly increasing
    return np.round(np.linspace(1, M, S)).astype(np.int64)


def respace(s: NoiseSchedule, S: int) -> RespacedSchedule:
    steps = respace_steps(s.M, S)
    abar = s.alpha_bar[steps].copy()
    abar_prev = np.concatenate([[1.0], abar[:-1]])
    prev_steps = np.concatenate([[0], steps[:-1]])
    # adjacent kept steps reuse the base alpha exactly
    alphas = np.where(steps - prev_steps == 1, s.alphas[steps - 1], abar / abar_prev)
    betas = 1.0 - alphas
    for arr in (steps, abar, abar_prev, alphas, betas):
        arr.setflags(write=False)
    return RespacedSchedule(
        base=s, steps=steps, alpha_bar=abar, alpha_bar_prev=abar_prev, alphas=alphas, betas=betas
    )
