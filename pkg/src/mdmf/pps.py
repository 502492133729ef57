"""Probability prompt selection for queries.

A query has no label at episode time, but its label must be one of the
support classes, so the query's visual embedding is compared (cosine) against
every support class prompt, the similarities pass through a temperature
softmax, and one support prompt is drawn from that distribution.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .encoders import PromptEmbedding


class DegenerateInputError(ValueError):
    """Zero-norm vector where a direction is required."""


class ParameterError(ValueError):
    pass


@dataclass
class PromptDistribution:
    probs: np.ndarray
    class_set: tuple[str, ...]
    temperature: float

    def __post_init__(self):
        self.probs = np.asarray(self.probs, dtype=np.float64)
        if self.probs.shape != (len(self.class_set),):
            raise ValueError("one probability per episode class required")
        if (self.probs < 0).any() or abs(self.probs.sum() - 1.0) > 1e-6:
            raise ValueError("probabilities must be non-negative and sum to 1")


def query_video_vector(frame_embeddings: torch.Tensor) -> torch.Tensor:
    """Temporal mean over a (T, D) or (..., T, D) frame-embedding sequence."""
    if frame_embeddings.shape[-2] < 1:
        raise ValueError("need at least one frame embedding")
    return frame_embeddings.mean(dim=-2)


def cosine_similarity(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    na = torch.linalg.vector_norm(a, dim=-1)
    nb = torch.linalg.vector_norm(b, dim=-1)
    if (na == 0).any() or (nb == 0).any():
        raise DegenerateInputError("cosine similarity of a zero-norm vector")
    return (a * b).sum(dim=-1) / (na * nb)


def prompt_distribution(
    similarities, class_set: tuple[str, ...], temperature: float
) -> PromptDistribution:
    """Temperature softmax over similarity scores (max-subtracted)."""
    if temperature <= 0:
        raise ParameterError("softmax temperature must be > 0")
    sims = np.asarray(
        similarities.detach().cpu().numpy()
        if isinstance(similarities, torch.Tensor)
        else similarities,
        dtype=np.float64,
    )
    scaled = sims / temperature
    scaled -= scaled.max()
    weights = np.exp(scaled)
    return PromptDistribution(weights / weights.sum(), class_set, temperature)


def select_prompt(
    dist: PromptDistribution,
    support_tokens: list[PromptEmbedding],
    mode: str = "sample",
    rng: np.random.Generator | None = None,
) -> PromptEmbedding:
    """Pick one support prompt: categorical draw via the CDF, or argmax.

    ``support_tokens`` must be aligned with ``dist.class_set``. Sample mode
    consumes exactly one uniform variate from ``rng``. Argmax ties break to
    the lowest class index.
    """
    if len(support_tokens) != len(dist.class_set):
        raise ValueError("one support token per episode class required")
    for token, name in zip(support_tokens, dist.class_set):
        if token.source_class != name:
            raise ValueError("support tokens are not aligned with the class set")
    if mode == "argmax":
        index = int(np.argmax(dist.probs))
    elif mode == "sample":
        if rng is None:
            raise ParameterError("sample mode needs an explicit random generator")
        u = rng.random()
        index = int(np.searchsorted(np.cumsum(dist.probs), u, side="right"))
        index = min(index, len(dist.probs) - 1)
    else:
        raise ParameterError(f"unknown selection mode {mode!r}")
    chosen = support_tokens[index]
    return PromptEmbedding(chosen.data.clone(), chosen.source_class, "pps-sampled")
