"""Distribution Contraction: pull diffusion targets toward class centers."""
from __future__ import annotations

from dataclasses import dataclass

import torch

from .errors import ValidationError
from .tokenizer import FeatureStats, apply_stats

CENTER_SOURCES = ("classifier_weights", "empirical_means")


@dataclass
class ContractionSpec:
    lam: float
    centers: torch.Tensor | None  # (C, d_t); None only when lam == 1
    center_source: str = "classifier_weights"

    def __post_init__(self):
        if not 0.0 <= self.lam <= 1.0:
            raise ValidationError(f"lambda must be in [0, 1], got {self.lam}")
        if self.center_source not in CENTER_SOURCES:
            raise ValidationError(f"unknown center source {self.center_source!r}")
        if self.centers is None and self.lam < 1.0:
            raise ValidationError("centers are required when lambda < 1")
        if self.centers is not None and self.centers.dim() != 2:
            raise ValidationError("centers must be a (C, d_t) matrix")

    @property
    def num_classes(self) -> int:
        return 0 if self.centers is None else self.centers.shape[0]

    @property
    def unsupervised(self) -> bool:
        return self.lam == 1.0


def centers_from_classifier(W: torch.Tensor, stats: FeatureStats | None = None) -> torch.Tensor:
    """Class centers are the teacher classifier's weight rows (bias ignored).

    When features are standardized, the centers move into the same space so
    that contraction commutes with de-standardization.
    """
    if W.dim() != 2:
        raise ValidationError(f"classifier weight must be (C, d_t), got {tuple(W.shape)}")
    centers = W.detach().clone()
    if stats is not None:
        centers = apply_stats(centers, stats)
    return centers


def empirical_centers(features: torch.Tensor, labels: torch.Tensor, num_classes: int) -> torch.Tensor:
    if features.shape[0] != labels.shape[0]:
        raise ValidationError("features and labels disagree on sample count")
    sums = torch.zeros(num_classes, features.shape[1], dtype=features.dtype, device=features.device)
    sums.index_add_(0, labels, features)
    counts = torch.bincount(labels, minlength=num_classes).clamp_min(1).to(features.dtype)
    return sums / counts[:, None]


def contract(x0: torch.Tensor, y: torch.Tensor | int | None, spec: ContractionSpec) -> torch.Tensor:
    """Return ``lam * x0 + (1 - lam) * centers[y]``; ``x0`` may be (d_t,) or (B, d_t)."""
    if spec.unsupervised:
        return x0
    if y is None:
        raise ValidationError("labels are required when lambda < 1")
    y = torch.as_tensor(y, device=x0.device)
    if int(y.min()) < 0 or int(y.max()) >= spec.num_classes:
        raise ValidationError(f"label outside [0, {spec.num_classes})")
    c = spec.centers.to(device=x0.device, dtype=x0.dtype)[y]
    if c.shape != x0.shape:
        raise ValidationError(f"center shape {tuple(c.shape)} != target shape {tuple(x0.shape)}")
    return spec.lam * x0 + (1.0 - spec.lam) * c
