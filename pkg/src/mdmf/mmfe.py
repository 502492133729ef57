"""Prompt-prefixed cross-attention fusion.

The prompt embedding is prepended as row 0 to both the temporal-context
stream and the raw visual stream; learned positional embeddings are added to
both; then a post-norm transformer block cross-attends (queries from the
context stream, keys/values from the raw stream) and applies a feed-forward.
Support and query share the same parameters within a view.
"""

from __future__ import annotations

import math

import torch
from torch import nn


class ShapeError(ValueError):
    pass


def prepend_token(token: torch.Tensor, frames: torch.Tensor) -> torch.Tensor:
    """Prepend a prompt vector as row 0: (..., T, D) -> (..., T+1, D).

    ``token`` is either one (D,) vector broadcast across the batch or a
    per-sequence (..., D) batch matching the frame batch.
    """
    if token.shape[-1] != frames.shape[-1]:
        raise ShapeError(
            f"prompt dim {token.shape[-1]} != frame dim {frames.shape[-1]}"
        )
    if token.dim() == frames.dim() - 1:
        row = token.unsqueeze(-2)
    elif token.dim() == 1:
        row = token.reshape((1,) * (frames.dim() - 1) + (-1,)).expand(
            *frames.shape[:-2], 1, frames.shape[-1]
        )
    else:
        raise ShapeError(
            f"cannot prepend a {token.dim()}-d token to {frames.dim()}-d frames"
        )
    return torch.cat([row, frames], dim=-2)


class CrossAttention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        if dim % heads != 0:
            raise ValueError(f"dim {dim} not divisible by heads {heads}")
        self.heads = heads
        self.head_dim = dim // heads
        self.q_proj = nn.Linear(dim, dim)
        self.k_proj = nn.Linear(dim, dim)
        self.v_proj = nn.Linear(dim, dim)
        self.out_proj = nn.Linear(dim, dim)

    def forward(self, query: torch.Tensor, keyvalue: torch.Tensor) -> torch.Tensor:
        b, n, d = query.shape
        m = keyvalue.shape[1]
        q = self.q_proj(query).view(b, n, self.heads, self.head_dim).transpose(1, 2)
        k = self.k_proj(keyvalue).view(b, m, self.heads, self.head_dim).transpose(1, 2)
        v = self.v_proj(keyvalue).view(b, m, self.heads, self.head_dim).transpose(1, 2)
        scores = q @ k.transpose(-1, -2) / math.sqrt(self.head_dim)
        mixed = torch.softmax(scores, dim=-1) @ v
        return self.out_proj(mixed.transpose(1, 2).reshape(b, n, d))


class FusionBlock(nn.Module):
    def __init__(self, dim: int, heads: int, ffn_mult: int):
        super().__init__()
        self.attn = CrossAttention(dim, heads)
        self.norm1 = nn.LayerNorm(dim)
        self.ffn = nn.Sequential(
            nn.Linear(dim, ffn_mult * dim), nn.ReLU(), nn.Linear(ffn_mult * dim, dim)
        )
        self.norm2 = nn.LayerNorm(dim)

    def forward(self, query: torch.Tensor, keyvalue: torch.Tensor) -> torch.Tensor:
        x = self.norm1(query + self.attn(query, keyvalue))
        return self.norm2(x + self.ffn(x))


class FusionEncoder(nn.Module):
    """One (or a stack of) cross-attention block(s) over prompt-prefixed rows."""

    def __init__(self, dim: int, seq_len: int, heads: int = 8, layers: int = 1,
                 ffn_mult: int = 4):
        super().__init__()
        self.seq_len = seq_len
        self.pos = nn.Parameter(torch.randn(seq_len, dim) * 0.02)
        self.blocks = nn.ModuleList(
            FusionBlock(dim, heads, ffn_mult) for _ in range(layers)
        )

    def forward(self, query_seq: torch.Tensor, keyvalue_seq: torch.Tensor) -> torch.Tensor:
        """Fuse (B, T+1, D) context rows against (B, T+1, D) raw visual rows."""
        if query_seq.shape[-2:] != keyvalue_seq.shape[-2:]:
            raise ShapeError(
                f"query rows {tuple(query_seq.shape[-2:])} != "
                f"key/value rows {tuple(keyvalue_seq.shape[-2:])}"
            )
        if query_seq.shape[-2] != self.seq_len:
            raise ShapeError(
                f"expected {self.seq_len} rows (frames + prompt), got {query_seq.shape[-2]}"
            )
        pos = self.pos.to(query_seq.dtype)
        x = query_seq + pos
        keyvalue = keyvalue_seq + pos
        for block in self.blocks:
            x = block(x, keyvalue)
        return x
