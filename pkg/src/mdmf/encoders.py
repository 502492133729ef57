"""Visual and text encoders behind one small interface.

The deterministic stubs make desk-scale runs self-contained: the visual stub
projects raw feature frames through a fixed seeded linear map and
layer-normalizes each frame; the text stub hashes the templated label string
into a unit-norm vector. A real frozen vision-language backbone plugs in by
registering an adapter factory that returns objects with the same two calls.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn


class EncoderInputError(ValueError):
    pass


@dataclass
class EncoderConfig:
    kind: str = "stub"
    dim: int = 64
    prompt_template: str = "a video of {label}"
    trainable: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.dim < 8:
            raise ValueError("embedding dimension must be at least 8")
        if "{label}" not in self.prompt_template:
            raise ValueError("prompt template needs a {label} placeholder")


@dataclass
class PromptEmbedding:
    """A D-vector from the text encoder, tagged with where it came from."""

    data: torch.Tensor
    source_class: str
    origin: str = "text-encoder"  # or "pps-sampled"


class StubVisualEncoder(nn.Module):
    """Fixed seeded random projection plus per-frame layer normalization."""

    def __init__(self, raw_dim: int, cfg: EncoderConfig):
        super().__init__()
        self.raw_dim = raw_dim
        self.dim = cfg.dim
        rng = np.random.default_rng(cfg.seed)
        weight = rng.standard_normal((raw_dim, cfg.dim)) / np.sqrt(raw_dim)
        weight_t = torch.as_tensor(weight, dtype=torch.float32)
        if cfg.trainable:
            self.projection = nn.Parameter(weight_t)
        else:
            self.register_buffer("projection", weight_t)

    def forward(self, frames: torch.Tensor) -> torch.Tensor:
        """(..., T, raw_dim) feature frames -> (..., T, dim) embeddings."""
        if frames.shape[-1] != self.raw_dim:
            raise EncoderInputError(
                f"expected raw feature dim {self.raw_dim}, got {frames.shape[-1]}"
            )
        projected = frames.to(self.projection.dtype) @ self.projection
        mean = projected.mean(dim=-1, keepdim=True)
        var = projected.var(dim=-1, unbiased=False, keepdim=True)
        return (projected - mean) / torch.sqrt(var + 1e-5)

    def encode_video(self, frames) -> torch.Tensor:
        """Encode one clip's sampled frames, (T, raw_dim) -> (T, dim)."""
        if not isinstance(frames, (np.ndarray, torch.Tensor)):
            raise EncoderInputError(
                "stub visual encoder needs raw feature frames; "
                "path-based clips require a backbone adapter"
            )
        return self.forward(torch.as_tensor(np.asarray(frames), dtype=torch.float32))


class StubTextEncoder:
    """Hash the templated label into a stable unit-norm embedding."""

    def __init__(self, cfg: EncoderConfig):
        self.cfg = cfg
        self._cache: dict[str, torch.Tensor] = {}

    def encode_label(self, class_name: str) -> PromptEmbedding:
        if not class_name:
            raise EncoderInputError("class name must be non-empty")
        prompt = self.cfg.prompt_template.format(label=class_name)
        if prompt not in self._cache:
            digest = hashlib.sha256(f"{self.cfg.seed}:{prompt}".encode()).digest()
            rng = np.random.default_rng(int.from_bytes(digest[:8], "little"))
            vec = rng.standard_normal(self.cfg.dim)
            vec /= np.linalg.norm(vec)
            self._cache[prompt] = torch.as_tensor(vec, dtype=torch.float32)
        return PromptEmbedding(self._cache[prompt].clone(), class_name, "text-encoder")


_ADAPTERS: dict[str, object] = {}


def register_adapter(name: str, factory) -> None:
    """Register a backbone adapter factory: (raw_dim, cfg) -> (visual, text).

    ``visual`` must expose ``encode_video`` mapping sampled frame references
    to a (T, dim) tensor; ``text`` must expose ``encode_label`` returning a
    PromptEmbedding of the same dim. Selected via ``encoder.kind = name``.
    """
    _ADAPTERS[name] = factory


def build_encoders(cfg: EncoderConfig, raw_dim: int):
    if cfg.kind == "stub":
        return StubVisualEncoder(raw_dim, cfg), StubTextEncoder(cfg)
    if cfg.kind in _ADAPTERS:
        return _ADAPTERS[cfg.kind](raw_dim, cfg)
    raise KeyError(
        f"unknown encoder kind {cfg.kind!r}; registered adapters: {sorted(_ADAPTERS)}"
    )
