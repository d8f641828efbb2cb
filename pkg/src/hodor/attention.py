"""Multi-head attention primitives, including soft attention-masking.

The masked variant adds alpha * M to the key/query affinities before the
sqrt(d) scaling, with one learnable positive alpha per head. This keeps the
operation differentiable in the mask and lets descriptors focus on (without
being confined to) their own patch. Hard masking (-inf fill where the
thresholded mask is zero) is kept as an ablation mode.
"""

from __future__ import annotations

import math

import torch
import torch.nn.functional as F
from torch import nn

# Per-head mask-bias starting values; heads beyond eight reuse the last entry.
ALPHA_INIT = (32.0, 32.0, 16.0, 16.0, 8.0, 8.0, 4.0, 4.0)


def inverse_softplus(value: float) -> float:
    if value <= 0:
        raise ValueError("alpha must be positive")
    if value > 20.0:  # softplus is the identity to double precision here
        return value
    return value + math.log(-math.expm1(-value))


def split_heads(x: torch.Tensor, heads: int) -> torch.Tensor:
    """N x C -> heads x N x C/heads."""
    n, c = x.shape
    return x.view(n, heads, c // heads).transpose(0, 1)


def attention_core(q: torch.Tensor, k: torch.Tensor, v: torch.Tensor,
                   bias: torch.Tensor | None = None,
                   neg_inf_mask: torch.Tensor | None = None,
                   scale_full_dim: bool = False) -> torch.Tensor:
    """Scaled dot-product attention over pre-split heads.

    q: h x Nq x d, k/v: h x Nk x d, bias: h x Nq x Nk added before scaling.
    neg_inf_mask: Nq x Nk bool, True = attend allowed (hard masking mode).
    Queries whose keys are all disallowed receive a zero output.
    """
    d = q.shape[-1] * (q.shape[0] if scale_full_dim else 1)
    scores = torch.matmul(q, k.transpose(-2, -1))
    if bias is not None:
        scores = scores + bias
    scores = scores / math.sqrt(d)
    if neg_inf_mask is not None:
        scores = scores.masked_fill(~neg_inf_mask.unsqueeze(0), float("-inf"))
        weights = torch.softmax(scores, dim=-1)
        dead = ~neg_inf_mask.any(dim=-1)  # queries with no allowed key
        if dead.any():
            weights = torch.where(dead[None, :, None], torch.zeros_like(weights), weights)
    else:
        weights = torch.softmax(scores, dim=-1)
    return torch.matmul(weights, v)


def merge_heads(x: torch.Tensor) -> torch.Tensor:
    h, n, d = x.shape
    return x.transpose(0, 1).reshape(n, h * d)


class MultiHeadAttention(nn.Module):
    """Projections + attention_core; queries and key/value sources may differ."""

    def __init__(self, channels: int, heads: int, scale_full_dim: bool = False):
        super().__init__()
        if channels % heads:
            raise ValueError(f"heads={heads} must divide channels={channels}")
        self.heads = heads
        self.scale_full_dim = scale_full_dim
        self.q_proj = nn.Linear(channels, channels)
        self.k_proj = nn.Linear(channels, channels)
        self.v_proj = nn.Linear(channels, channels)
        self.out_proj = nn.Linear(channels, channels)
        for lin in (self.q_proj, self.k_proj, self.v_proj, self.out_proj):
            nn.init.xavier_uniform_(lin.weight)
            nn.init.zeros_(lin.bias)

    def forward(self, query: torch.Tensor, source: torch.Tensor,
                bias: torch.Tensor | None = None,
                neg_inf_mask: torch.Tensor | None = None) -> torch.Tensor:
        q = split_heads(self.q_proj(query), self.heads)
        k = split_heads(self.k_proj(source), self.heads)
        v = split_heads(self.v_proj(source), self.heads)
        out = attention_core(q, k, v, bias=bias, neg_inf_mask=neg_inf_mask,
                             scale_full_dim=self.scale_full_dim)
        return self.out_proj(merge_heads(out))


class MaskedCrossAttention(nn.Module):
    """Descriptor-to-pixel cross attention conditioned on patch masks.

    mode 'soft' adds alpha*M to the affinities (alpha = softplus of a raw
    per-head parameter, so it stays positive through training), 'hard'
    thresholds M at 0.5 and fills disallowed affinities with -inf, and 'none'
    attends without any mask term.
    """

    def __init__(self, channels: int, heads: int, scale_full_dim: bool = False):
        super().__init__()
        self.attn = MultiHeadAttention(channels, heads, scale_full_dim)
        init = [ALPHA_INIT[min(i, len(ALPHA_INIT) - 1)] for i in range(heads)]
        self.raw_alpha = nn.Parameter(torch.tensor([inverse_softplus(a) for a in init]))

    @property
    def alpha(self) -> torch.Tensor:
        return F.softplus(self.raw_alpha)

    def forward(self, descriptors: torch.Tensor, pixels: torch.Tensor,
                mask: torch.Tensor, mode: str = "soft",
                alpha: torch.Tensor | None = None) -> torch.Tensor:
        """descriptors: K x C, pixels: N x C, mask: K x N in [0, 1]."""
        if not (torch.isfinite(descriptors).all() and torch.isfinite(pixels).all()
                and torch.isfinite(mask).all()):
            raise ValueError("non-finite attention inputs")
        if mode == "soft":
            a = self.alpha if alpha is None else torch.as_tensor(
                alpha, dtype=mask.dtype, device=mask.device)
            bias = a.view(-1, 1, 1) * mask.unsqueeze(0)
            return self.attn(descriptors, pixels, bias=bias)
        if mode == "hard":
            return self.attn(descriptors, pixels, neg_inf_mask=mask >= 0.5)
        if mode == "none":
            return self.attn(descriptors, pixels)
        raise ValueError(f"unknown masking mode {mode!r}")


class FeedForward(nn.Module):
    """Three fully-connected layers with ReLU activations between them."""

    def __init__(self, channels: int, hidden: int):
        super().__init__()
        self.fc1 = nn.Linear(channels, hidden)
        self.fc2 = nn.Linear(hidden, hidden)
        self.fc3 = nn.Linear(hidden, channels)
        for lin in (self.fc1, self.fc2, self.fc3):
            nn.init.xavier_uniform_(lin.weight)
            nn.init.zeros_(lin.bias)

    def forward(self, x):
        return self.fc3(F.relu(self.fc2(F.relu(self.fc1(x)))))
