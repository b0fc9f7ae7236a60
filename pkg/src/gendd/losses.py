"""Training objectives: token-wise noise prediction on contracted targets, and
the CE + temperature-KL logit-distillation baseline."""
from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .contraction import ContractionSpec
from .errors import NonFiniteError, ValidationError
from .schedule import NoiseSchedule, forward_noise
from .tokenizer import TokenBatch, split_features

CFG_DROP_RATE = 0.1


@dataclass
class LossBatchPlan:
    """Randomness for one loss evaluation, drawn up front so that two loss
    paths can share it exactly."""

    steps: torch.Tensor  # (B, n) int64 in [1, M]
    eps: torch.Tensor  # (B, n, d_tok)
    drop_mask: torch.Tensor  # (B,) bool


def sample_plan(
    batch_size: int,
    n_tokens: int,
    token_dim: int,
    M: int,
    drop_rate: float = CFG_DROP_RATE,
    generator: torch.Generator | None = None,
    dtype=torch.float32,
    device=None,
) -> LossBatchPlan:
    steps = torch.randint(1, M + 1, (batch_size, n_tokens), generator=generator, device=device)
    eps = torch.randn(batch_size, n_tokens, token_dim, generator=generator, dtype=dtype, device=device)
    drop = torch.rand(batch_size, generator=generator, device=device) < drop_rate
    return LossBatchPlan(steps=steps, eps=eps, drop_mask=drop)


def contracted_tokens(batch: TokenBatch, spec: ContractionSpec) -> torch.Tensor:
    if spec.unsupervised:
        return batch.tokens
    if batch.labels is None:
        raise ValidationError("labels are required when lambda < 1")
    center_tokens = split_features(spec.centers.to(batch.tokens), batch.token_dim)
    if center_tokens.shape[1:] != batch.tokens.shape[1:]:
        raise ValidationError("centers and features tokenize to different shapes")
    return spec.lam * batch.tokens + (1.0 - spec.lam) * center_tokens[batch.labels]


def training_loss(head, schedule: NoiseSchedule, batch: TokenBatch, spec: ContractionSpec,
                  plan: LossBatchPlan, target: torch.Tensor | None = None) -> torch.Tensor:
    """Mean over batch and tokens of ``||eps - head(x_m, m, id, c)||^2``.

    ``x_m`` noises the contracted target with the plan's steps and noise.
    Gradients reach the head and, through ``batch.condition``, the student.
    ``target`` overrides the contracted tokens (used by mixup).
    """
    x0 = contracted_tokens(batch, spec) if target is None else target
    x_m = forward_noise(schedule, x0, plan.steps, plan.eps)
    pred = head(x_m, plan.steps, batch.position_ids, batch.condition, plan.drop_mask)
    loss = (plan.eps - pred).pow(2).sum(-1).mean()
    if not torch.isfinite(loss):
        raise NonFiniteError(
            "non-finite diffusion loss",
            {
                "loss": float(loss.detach()),
                "target_finite": bool(torch.isfinite(x0).all()),
                "pred_finite": bool(torch.isfinite(pred).all()),
                "cond_finite": batch.condition is None or bool(torch.isfinite(batch.condition).all()),
            },
        )
    return loss


def kl_baseline_loss(
    teacher_logits: torch.Tensor,
    student_logits: torch.Tensor,
    labels: torch.Tensor | None = None,
    T: float = 1.0,
    w_kl: float = 0.5,
    w_ce: float = 0.5,
) -> torch.Tensor:
    """``w_ce * CE(student, y) + w_kl * T^2 * KL(softmax(t/T) || softmax(s/T))``."""
    if teacher_logits.shape != student_logits.shape:
        raise ValidationError("teacher and student logits must have the same shape")
    log_p_s = F.log_softmax(student_logits / T, dim=-1)
    log_p_t = F.log_softmax(teacher_logits.detach() / T, dim=-1)
    loss = w_kl * T * T * F.kl_div(log_p_s, log_p_t, log_target=True, reduction="batchmean")
    if w_ce > 0:
        if labels is None:
            raise ValidationError("labels are required when w_ce > 0")
        loss = loss + w_ce * F.cross_entropy(student_logits, labels)
    return loss
