"""Temporal-context extractors: the two views plus the identity baseline.

* local: two blocks of (Conv1d k=3 same-padding -> ReLU -> BatchNorm), so a
  frame sees its +/-2 neighbourhood.
* global: a 3-layer causal dilated conv stack (kernel 2, dilations 1/2/4,
  ReLU between layers); the last output frame, whose receptive field covers
  the whole default 8-frame sequence, is broadcast over time and added back
  onto the input.
* none: pass-through, which turns the downstream fusion block into plain
  self-attention.
"""

from __future__ import annotations

import warnings
from enum import Enum

import torch
from torch import nn


class ViewKind(str, Enum):
    LOCAL = "local"
    GLOBAL = "global"
    NONE = "none"


class ShapeError(ValueError):
    pass


class LocalContextExtractor(nn.Module):
    def __init__(self, dim: int, kernel: int = 3):
        super().__init__()
        if kernel % 2 != 1:
            raise ValueError("local context kernel must be odd for same-padding")
        pad = kernel // 2
        self.kernel = kernel
        self.conv1 = nn.Conv1d(dim, dim, kernel, padding=pad)
        self.bn1 = nn.BatchNorm1d(dim)
        self.conv2 = nn.Conv1d(dim, dim, kernel, padding=pad)
        self.bn2 = nn.BatchNorm1d(dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """(B, T, D) -> (B, T, D); batch statistics run over batch x time."""
        if x.shape[-2] < self.kernel:
            raise ShapeError(
                f"local context needs at least {self.kernel} frames, got {x.shape[-2]}"
            )
        h = x.transpose(-1, -2)
        h = self.bn1(torch.relu(self.conv1(h)))
        h = self.bn2(torch.relu(self.conv2(h)))
        return h.transpose(-1, -2)


class GlobalContextExtractor(nn.Module):
    def __init__(self, dim: int, dilations: tuple[int, ...] = (1, 2, 4), kernel: int = 2):
        super().__init__()
        self.kernel = kernel
        self.dilations = tuple(dilations)
        self.convs = nn.ModuleList(
            nn.Conv1d(dim, dim, kernel, dilation=d) for d in self.dilations
        )

    @property
    def receptive_field(self) -> int:
        return 1 + (self.kernel - 1) * sum(self.dilations)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """(B, T, D) -> (B, T, D): broadcast last causal-stack frame plus input."""
        frames = x.shape[-2]
        if self.receptive_field < frames:
            warnings.warn(
                f"dilation schedule {self.dilations} covers {self.receptive_field} "
                f"frames but sequences have {frames}; the broadcast frame will not "
                "see the whole sequence",
                stacklevel=2,
            )
        h = x.transpose(-1, -2)
        for i, conv in enumerate(self.convs):
            pad = (self.kernel - 1) * self.dilations[i]
            h = conv(nn.functional.pad(h, (pad, 0)))
            if i + 1 < len(self.convs):
                h = torch.relu(h)
        last = h[..., -1:]
        return last.transpose(-1, -2) + x


class IdentityContext(nn.Module):
    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return x


def build_context_extractor(view: ViewKind, dim: int, *, ltce_kernel: int = 3,
                            tcn_dilations: tuple[int, ...] = (1, 2, 4)) -> nn.Module:
    if view == ViewKind.LOCAL:
        return LocalContextExtractor(dim, kernel=ltce_kernel)
    if view == ViewKind.GLOBAL:
        return GlobalContextExtractor(dim, dilations=tcn_dilations)
    return IdentityContext()
