"""Pose denoiser: one token per keypoint, alternating intra-piece and
inter-piece self-attention, predicting the clean pose ``x0`` per token."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import torch
from torch import nn

from .attention import TransformerBlock
from .errors import ShapeMismatch


@dataclass
class DenoiserConfig:
    feature_width: int
    layers: int = 6
    heads: int = 4
    width: int = 128
    time_width: int = 64
    selector_width: int = 0

    def check(self):
        if self.layers < 2 or self.layers % 2:
            raise ValueError(f"layers must be even and >= 2, got {self.layers}")
        if self.width < 8 or self.time_width < 8:
            raise ValueError("widths must be >= 8")
        if self.width % self.heads:
            raise ValueError("width not divisible by heads")
        return self

    def to_dict(self):
        return asdict(self)


def timestep_embedding(t: torch.Tensor, width: int) -> torch.Tensor:
    """Sinusoidal embedding of (possibly fractional) timesteps, ``[N, width]``."""
    half = width // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64) / half)
    args = t.to(torch.float64).unsqueeze(-1) * freqs
    emb = torch.cat([torch.cos(args), torch.sin(args)], dim=-1)
    if width % 2:
        emb = torch.cat([emb, torch.zeros_like(emb[:, :1])], dim=-1)
    return emb


class PoseDenoiser(nn.Module):
    """Inputs are flat token rows grouped by piece.

    ``piece_index`` must be non-decreasing (tokens of a piece contiguous);
    ``group_index`` names the puzzle of each token so several puzzles can
    share a batch without attending to each other.
    """

    def __init__(self, config: DenoiserConfig):
        super().__init__()
        self.config = config.check()
        in_width = 4 + 2 + config.feature_width + config.selector_width + config.time_width
        self.embed = nn.Linear(in_width, config.width)
        self.blocks = nn.ModuleList(TransformerBlock(config.width, config.heads) for _ in range(config.layers))
        self.norm = nn.LayerNorm(config.width)
        self.head = nn.Linear(config.width, 4)

    def tokens(self, x_t, local_xy, features, t, selector_features=None):
        n = x_t.shape[0]
        if not (local_xy.shape[0] == features.shape[0] == n):
            raise ShapeMismatch("x_t, local coords and features must have one row per keypoint")
        if features.shape[1] != self.config.feature_width:
            raise ShapeMismatch(f"feature width {features.shape[1]} != {self.config.feature_width}")
        if not torch.is_tensor(t):
            t = torch.tensor(t)
        t = t.reshape(-1).expand(n) if t.numel() == 1 else t
        parts = [x_t, local_xy, features]
        if self.config.selector_width:
            if selector_features is None or selector_features.shape != (n, self.config.selector_width):
                raise ShapeMismatch("selector features missing or of the wrong width")
            parts.append(selector_features)
        parts.append(timestep_embedding(t, self.config.time_width).to(x_t.dtype))
        return self.embed(torch.cat(parts, dim=-1))

    def forward(self, x_t, local_xy, features, t, piece_index, group_index=None,
                selector_features=None, inter: bool = True, return_attention: bool = False):
        h = self.tokens(x_t, local_xy, features, t, selector_features)
        n = h.shape[0]
        if piece_index.shape[0] != n:
            raise ShapeMismatch("piece_index must have one entry per token")
        blocks_k = _uniform_block(piece_index)
        attn = []
        for i, block in enumerate(self.blocks):
            if i % 2 == 0:
                if blocks_k is not None and not return_attention:
                    h = block(h.reshape(-1, blocks_k, h.shape[-1])).reshape(n, -1)
                else:
                    mask = piece_index[:, None] == piece_index[None, :]
                    h, w = block(h, mask, return_weights=True)
                    attn.append(w)
            elif inter:
                mask = None
                if group_index is not None and bool((group_index != group_index[0]).any()):
                    mask = group_index[:, None] == group_index[None, :]
                if return_attention:
                    h, w = block(h, mask, return_weights=True)
                    attn.append(w)
                else:
                    h = block(h, mask)
        out = self.head(self.norm(h))
        return (out, attn) if return_attention else out


def _uniform_block(piece_index: torch.Tensor):
    """Tokens-per-piece if every piece has the same contiguous block size."""
    n = piece_index.shape[0]
    if n == 0:
        return None
    counts = torch.bincount(piece_index)
    counts = counts[counts > 0]
    k = int(counts[0])
    if not bool((counts == k).all()):
        return None
    uniq = torch.unique_consecutive(piece_index)
    # a piece split into two runs would be merged wrongly by the reshape
    if uniq.shape[0] != n // k or not torch.equal(uniq.repeat_interleave(k), piece_index):
        return None
    return k
