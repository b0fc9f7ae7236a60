"""Conditional noise-prediction head eps(y_m, m, id, c).

A small MLP conditioned on the diffusion step, the token position and the
student feature. The three conditioning inputs are embedded to the hidden
width and summed; the sum modulates each residual block through adaptive
layer norm. A learned null vector replaces the student embedding for the
unconditional branch of classifier-free guidance.
"""
from __future__ import annotations

import math

import torch
import torch.nn as nn

from .errors import ValidationError

HEAD_VERSION = 1
ARCHS = ("residual", "flat")


def timestep_embedding(m, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    """Interleaved ``(sin, cos)`` pairs over geometrically spaced frequencies.

    Every pair has unit norm, so ``||emb|| = sqrt(dim / 2)`` for every step.
    """
    if dim < 2 or dim % 2:
        raise ValidationError(f"timestep embedding dim must be even and >= 2, got {dim}")
    m = torch.as_tensor(m)
    if m.numel() and float(m.min()) < 0:
        raise ValidationError("timestep must be >= 0")
    dtype = m.dtype if m.is_floating_point() else torch.get_default_dtype()
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=dtype, device=m.device) / half)
    args = m.to(dtype)[..., None] * freqs
    return torch.stack([torch.sin(args), torch.cos(args)], dim=-1).flatten(-2)


def modulate(x, shift, scale):
    return x * (1 + scale) + shift


class ResBlock(nn.Module):
    def __init__(self, width: int):
        super().__init__()
        self.norm = nn.LayerNorm(width, elementwise_affine=False, eps=1e-6)
        self.mlp = nn.Sequential(nn.Linear(width, width), nn.SiLU(), nn.Linear(width, width))
        self.ada = nn.Sequential(nn.SiLU(), nn.Linear(width, 3 * width))

    def forward(self, x, c):
        shift, scale, gate = self.ada(c).chunk(3, dim=-1)
        return x + gate * self.mlp(modulate(self.norm(x), shift, scale))


class FinalLayer(nn.Module):
    def __init__(self, width: int, out_dim: int):
        super().__init__()
        self.norm = nn.LayerNorm(width, elementwise_affine=False, eps=1e-6)
        self.ada = nn.Sequential(nn.SiLU(), nn.Linear(width, 2 * width))
        self.linear = nn.Linear(width, out_dim)
        nn.init.zeros_(self.linear.weight)
        nn.init.zeros_(self.linear.bias)

    def forward(self, x, c):
        shift, scale = self.ada(c).chunk(2, dim=-1)
        return self.linear(modulate(self.norm(x), shift, scale))


class DiffusionHead(nn.Module):
    """Token-wise noise predictor.

    Args:
        token_dim: dimension of each feature token.
        cond_dim: dimension of the student feature.
        n_positions: number of token positions.
        width: hidden width.
        depth: number of residual blocks (``residual``) or hidden layers (``flat``).
        arch: ``"residual"`` (adaptive-norm residual blocks) or ``"flat"``
            (plain stack of linear layers with additive conditioning).
        freq_dim: size of the sinusoidal step features.
    """

    def __init__(
        self,
        token_dim: int,
        cond_dim: int,
        n_positions: int,
        width: int = 256,
        depth: int = 3,
        arch: str = "residual",
        freq_dim: int = 256,
    ):
        super().__init__()
        for name, v in (("token_dim", token_dim), ("cond_dim", cond_dim),
                        ("n_positions", n_positions), ("width", width), ("depth", depth)):
            if v < 1:
                raise ValidationError(f"{name} must be positive, got {v}")
        if arch not in ARCHS:
            raise ValidationError(f"unknown head architecture {arch!r}")
        self.config = dict(token_dim=token_dim, cond_dim=cond_dim, n_positions=n_positions,
                           width=width, depth=depth, arch=arch, freq_dim=freq_dim)
        self.token_dim = token_dim
        self.n_positions = n_positions
        self.arch = arch
        self.freq_dim = freq_dim

        self.time_embed = nn.Sequential(nn.Linear(freq_dim, width), nn.SiLU(), nn.Linear(width, width))
        self.cond_embed = nn.Linear(cond_dim, width)
        self.pos_embed = nn.Embedding(n_positions, width)
        nn.init.normal_(self.pos_embed.weight, std=0.02)
        self.null_condition = nn.Parameter(torch.randn(width) * 0.02)
        self.input_proj = nn.Linear(token_dim, width)

        if arch == "residual":
            self.blocks = nn.ModuleList(ResBlock(width) for _ in range(depth))
            self.final = FinalLayer(width, token_dim)
        else:
            self.blocks = nn.ModuleList(nn.Linear(width, width) for _ in range(depth - 1))
            self.final = nn.Linear(width, token_dim)
            nn.init.zeros_(self.final.weight)
            nn.init.zeros_(self.final.bias)

    def conditioning(self, m, ids, cond, drop_mask=None):
        """Sum of step, position and (student or null) embeddings, shape (B, n, width)."""
        if ids.numel() and (int(ids.min()) < 0 or int(ids.max()) >= self.n_positions):
            raise ValidationError(f"position id outside [0, {self.n_positions})")
        t = self.time_embed(timestep_embedding(m, self.freq_dim).to(self.null_condition.dtype))
        B = t.shape[0]
        null = self.null_condition.expand(B, -1)
        if cond is None:
            c = null
        else:
            c = self.cond_embed(cond)
            if drop_mask is not None:
                c = torch.where(drop_mask[:, None], null, c)
        return t + self.pos_embed(ids) + c[:, None, :]

    def forward(self, x, m, ids, cond=None, drop_mask=None):
        """Predict the noise in ``x``.

        Shapes: ``x`` (B, n, d_tok) or (B, d_tok); ``m`` and ``ids``
        broadcastable to (B, n); ``cond`` (B, d_s) or None for the null
        condition; ``drop_mask`` optional bool (B,) routing rows to null.
        """
        squeeze = x.dim() == 2
        if squeeze:
            x = x[:, None, :]
        if x.shape[-1] != self.token_dim:
            raise ValidationError(f"token dim {x.shape[-1]} != head token dim {self.token_dim}")
        B, n, _ = x.shape
        m = torch.as_tensor(m, device=x.device)
        ids = torch.as_tensor(ids, device=x.device, dtype=torch.long)
        if squeeze:
            m = m[:, None] if m.dim() == 1 else m
            ids = ids[:, None] if ids.dim() == 1 else ids
        c = self.conditioning(m.expand(B, n), ids.expand(B, n), cond, drop_mask)
        h = self.input_proj(x)
        if self.arch == "residual":
            for block in self.blocks:
                h = block(h, c)
            out = self.final(h, c)
        else:
            h = torch.nn.functional.silu(h + c)
            for layer in self.blocks:
                h = torch.nn.functional.silu(layer(h) + c)
            out = self.final(h)
        return out[:, 0] if squeeze else out


def init_head(d_tok: int, d_s: int, n_positions: int, hidden_width: int = 256, seed: int = 0,
              depth: int = 3, arch: str = "residual", dtype=torch.float32) -> DiffusionHead:
    gen_state = torch.random.get_rng_state()
    try:
        torch.manual_seed(seed)
        head = DiffusionHead(d_tok, d_s, n_positions, width=hidden_width, depth=depth, arch=arch)
    finally:
        torch.random.set_rng_state(gen_state)
    return head.to(dtype)


def predict_eps(head: DiffusionHead, y_m, m, ids, c=None):
    """Functional alias for ``head(y_m, m, ids, c)``; ``c=None`` selects the null condition."""
    return head(y_m, m, ids, c)
