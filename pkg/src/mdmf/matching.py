"""Prototype matching: frame costs, alignment distance, fusion and main loss.

Distances use only the visual rows of the fused sequences (row 0, the prompt,
is excluded). The per-frame metric is cosine cost 1 - cos, and the sequence
distance is the relaxed-boundary soft-minimum alignment DP, averaged over
both comparison directions by default.
"""

from __future__ import annotations

import numpy as np
import torch

from . import alignment


class DegenerateInputError(ValueError):
    pass


class ParameterError(ValueError):
    pass


def class_prototype(features: torch.Tensor) -> torch.Tensor:
    """Elementwise mean of one class's (K, T+1, D) fused support features."""
    if features.numel() == 0 or features.shape[0] < 1:
        raise ValueError("prototype needs at least one support feature")
    return features.mean(dim=0)


def frame_cost(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Pairwise cosine cost 1 - cos between two row sets, (..., Ta, Tb)."""
    na = torch.linalg.vector_norm(a, dim=-1, keepdim=True)
    nb = torch.linalg.vector_norm(b, dim=-1, keepdim=True)
    if (na == 0).any() or (nb == 0).any():
        raise DegenerateInputError("frame cost over a zero-norm row")
    return 1.0 - (a / na) @ (b / nb).transpose(-1, -2)


class _AlignmentScore(torch.autograd.Function):
    """Batched DP score with the analytic soft-alignment gradient."""

    @staticmethod
    def forward(ctx, costs: torch.Tensor, gamma: float) -> torch.Tensor:
        costs64 = costs.detach().cpu().double().numpy()
        values, acc = alignment.dp_forward(costs64, gamma)
        ctx.gamma = gamma
        ctx.costs64 = costs64
        ctx.acc = acc
        ctx.values = values
        return torch.from_numpy(values).to(costs.dtype)

    @staticmethod
    def backward(ctx, grad_output):
        grads = alignment.dp_grad(ctx.costs64, ctx.acc, ctx.values, ctx.gamma)
        grad = torch.from_numpy(grads).to(grad_output.dtype)
        return grad * grad_output.reshape(-1, 1, 1), None


def alignment_score(costs: torch.Tensor, gamma: float) -> torch.Tensor:
    """One-directional DP score for a (B, R, C) cost batch -> (B,)."""
    if gamma <= 0:
        raise ParameterError("alignment gamma must be > 0")
    if costs.dim() == 2:
        return _AlignmentScore.apply(costs.unsqueeze(0), gamma)[0]
    return _AlignmentScore.apply(costs, gamma)


def otam(cost: torch.Tensor, gamma: float, bidirectional: bool = True) -> torch.Tensor:
    """Sequence distance from a frame-cost matrix (or batch of them).

    Bidirectional mode averages the score of the cost matrix and of its
    transpose, making the distance symmetric in its two sequences.
    """
    forward = alignment_score(cost, gamma)
    if not bidirectional:
        return forward
    return 0.5 * (forward + alignment_score(cost.transpose(-1, -2), gamma))


def view_distance(
    query_fused: torch.Tensor,
    prototype: torch.Tensor,
    gamma: float,
    bidirectional: bool = True,
) -> torch.Tensor:
    """Alignment distance over visual rows only (prompt row 0 excluded)."""
    return otam(
        frame_cost(query_fused[..., 1:, :], prototype[..., 1:, :]),
        gamma,
        bidirectional,
    )


def pairwise_view_distances(
    query_fused: torch.Tensor,
    prototypes: torch.Tensor,
    gamma: float,
    bidirectional: bool = True,
) -> torch.Tensor:
    """All query/prototype distances for one view: (P, T+1, D) x (N, T+1, D) -> (P, N)."""
    n_queries, n_classes = query_fused.shape[0], prototypes.shape[0]
    costs = frame_cost(
        query_fused[:, None, 1:, :], prototypes[None, :, 1:, :]
    ).reshape(n_queries * n_classes, query_fused.shape[1] - 1, prototypes.shape[1] - 1)
    return otam(costs, gamma, bidirectional).reshape(n_queries, n_classes)


def fuse_distances(per_view: dict) -> torch.Tensor:
    """Total distance = sum of the enabled views' distances (Eq-style fusion)."""
    if not per_view:
        raise ValueError("at least one view distance required")
    views = list(per_view.values())
    total = views[0]
    for extra in views[1:]:
        total = total + extra
    return total


def classify(distances: torch.Tensor) -> torch.Tensor:
    """Class probabilities: softmax over negated fused distances."""
    return torch.softmax(-distances, dim=-1)


def main_loss(probs: torch.Tensor, truth: torch.Tensor) -> torch.Tensor:
    """Mean cross-entropy of the true class under the given distributions."""
    picked = probs.gather(-1, truth.reshape(-1, 1)).squeeze(-1)
    return -(torch.log(picked.clamp_min(1e-12))).mean()
