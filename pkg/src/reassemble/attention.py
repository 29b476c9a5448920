"""Masked multi-head self-attention and a pre-norm transformer block.

Written out by hand (rather than ``nn.MultiheadAttention``) so the
attention weights can be inspected and the module runs in float64 for
finite-difference checks.
"""

from __future__ import annotations

import math

import torch
from torch import nn


class MultiHeadAttention(nn.Module):
    def __init__(self, width: int, heads: int):
        super().__init__()
        if width % heads:
            raise ValueError(f"width {width} not divisible by heads {heads}")
        self.width = width
        self.heads = heads
        self.qkv = nn.Linear(width, 3 * width)
        self.out = nn.Linear(width, width)

    def forward(self, x: torch.Tensor, mask: torch.Tensor | None = None, return_weights: bool = False):
        """Self-attention over the second-to-last axis.

        ``x`` is ``[..., n, width]``; ``mask`` is a boolean ``[..., n, n]``
        (or broadcastable) where True means "may attend".
        """
        *lead, n, _ = x.shape
        hd = self.width // self.heads
        q, k, v = self.qkv(x).chunk(3, dim=-1)

        def split(t):
            return t.reshape(*lead, n, self.heads, hd).transpose(-3, -2)

        q, k, v = split(q), split(k), split(v)
        scores = q @ k.transpose(-1, -2) / math.sqrt(hd)
        if mask is not None:
            scores = scores.masked_fill(~mask.unsqueeze(-3), float("-inf"))
        weights = torch.softmax(scores, dim=-1)
        ctx = (weights @ v).transpose(-3, -2).reshape(*lead, n, self.width)
        out = self.out(ctx)
        return (out, weights) if return_weights else out


class TransformerBlock(nn.Module):
    """Pre-norm attention + MLP, both residual."""

    def __init__(self, width: int, heads: int, mlp_ratio: int = 2):
        super().__init__()
        self.norm1 = nn.LayerNorm(width)
        self.attn = MultiHeadAttention(width, heads)
        self.norm2 = nn.LayerNorm(width)
        self.mlp = nn.Sequential(
            nn.Linear(width, mlp_ratio * width),
            nn.GELU(),
            nn.Linear(mlp_ratio * width, width),
        )

    def forward(self, x, mask=None, return_weights: bool = False):
        a = self.attn(self.norm1(x), mask, return_weights=return_weights)
        if return_weights:
            a, w = a
        x = x + a
        x = x + self.mlp(self.norm2(x))
        return (x, w) if return_weights else x
