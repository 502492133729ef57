"""Multi-view mutual distillation: posteriors, gating and KL losses.

Per query and per view there are two posteriors: a visual one (softmax over
negated view distances) and a text one (softmax over cosine similarities of
the fused prompt rows). The maxima of those posteriors are the discriminant
scores. A query joins the local-reliable set when the local view strictly
wins in every enabled comparison mode, and vice versa; mixed dominance or
ties leave it out. Reliable queries then teach the other view through
confidence-weighted KL divergences over the visual posteriors, with the
teacher side detached.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch

from .pps import cosine_similarity
from .temporal_views import ViewKind

CONDITION_MODES = ("t_compare", "v_compare")


def posterior_from_distances(distances: torch.Tensor) -> torch.Tensor:
    """Visual-mode posterior: softmax of negated view distances."""
    return torch.softmax(-distances, dim=-1)


def posterior_from_tokens(query_token: torch.Tensor, class_tokens: torch.Tensor) -> torch.Tensor:
    """Text-mode posterior: softmax over cosines of fused prompt rows."""
    sims = cosine_similarity(query_token.unsqueeze(-2), class_tokens)
    return torch.softmax(sims, dim=-1)


@dataclass
class ViewPosteriors:
    visual: torch.Tensor
    text: torch.Tensor
    view: ViewKind
    query_id: int = 0


@dataclass
class DiscriminantScores:
    visual_score: torch.Tensor
    text_score: torch.Tensor
    view: ViewKind


def discriminants(posteriors: ViewPosteriors) -> DiscriminantScores:
    """Maximum element of each posterior = the view's confidence per mode."""
    return DiscriminantScores(
        visual_score=posteriors.visual.max(dim=-1).values,
        text_score=posteriors.text.max(dim=-1).values,
        view=posteriors.view,
    )


@dataclass
class ReliabilityPartition:
    local_reliable: set[int] = field(default_factory=set)
    global_reliable: set[int] = field(default_factory=set)

    def __post_init__(self):
        if self.local_reliable & self.global_reliable:
            raise ValueError("a query cannot be reliable for both views")


def partition_queries(
    scores: dict[int, dict[ViewKind, DiscriminantScores]],
    conditions: tuple[str, ...] = CONDITION_MODES,
    margin: float = 0.0,
) -> ReliabilityPartition:
    """Assign each query to the view that strictly dominates.

    ``conditions`` selects which comparison modes must all favour a view
    (t_compare = text scores, v_compare = visual scores). With both disabled
    the gate falls back to the visual comparison alone. Ties never qualify.
    """
    unknown = set(conditions) - set(CONDITION_MODES)
    if unknown:
        raise ValueError(f"unknown distillation conditions {sorted(unknown)}")
    partition = ReliabilityPartition()
    use_visual = "v_compare" in conditions or not conditions
    use_text = "t_compare" in conditions
    for query_id, per_view in scores.items():
        local = per_view[ViewKind.LOCAL]
        glob = per_view[ViewKind.GLOBAL]
        local_wins, global_wins = True, True
        if use_visual:
            local_wins &= bool(local.visual_score > glob.visual_score + margin)
            global_wins &= bool(glob.visual_score > local.visual_score + margin)
        if use_text:
            local_wins &= bool(local.text_score > glob.text_score + margin)
            global_wins &= bool(glob.text_score > local.text_score + margin)
        if local_wins:
            partition.local_reliable.add(query_id)
        elif global_wins:
            partition.global_reliable.add(query_id)
    return partition


def kl_divergence(p: torch.Tensor, q: torch.Tensor, eps: float = 1e-9) -> torch.Tensor:
    """KL(p || q) with epsilon-clamped logs."""
    p = p.clamp_min(eps)
    q = q.clamp_min(eps)
    return (p * (torch.log(p) - torch.log(q))).sum(dim=-1)


def distillation_losses(
    partition: ReliabilityPartition,
    visual_posteriors: dict[int, dict[ViewKind, torch.Tensor]],
    scores: dict[int, dict[ViewKind, DiscriminantScores]],
    direction: str = "bidirectional",
) -> tuple[torch.Tensor, torch.Tensor]:
    """Confidence-weighted KL losses (global->local, local->global).

    The teacher view's posterior and its confidence weight
    (visual_score + text_score) are detached so no gradient reaches the
    teacher branch. An empty reliable set yields a zero loss. ``direction``
    can keep only one of the two losses (up = local view, down = global).
    """
    if direction not in ("bidirectional", "up_down", "down_up"):
        raise ValueError(f"unknown distillation direction {direction!r}")

    def weighted(reliable: set[int], teacher: ViewKind, student: ViewKind) -> torch.Tensor:
        if not reliable:
            return torch.tensor(0.0)
        total, weight_sum = 0.0, 0.0
        for query_id in sorted(reliable):
            teacher_scores = scores[query_id][teacher]
            weight = (teacher_scores.visual_score + teacher_scores.text_score).detach()
            teacher_post = visual_posteriors[query_id][teacher].detach()
            student_post = visual_posteriors[query_id][student]
            total = total + weight * kl_divergence(teacher_post, student_post)
            weight_sum = weight_sum + weight
        return total / weight_sum

    global_to_local = weighted(partition.global_reliable, ViewKind.GLOBAL, ViewKind.LOCAL)
    local_to_global = weighted(partition.local_reliable, ViewKind.LOCAL, ViewKind.GLOBAL)
    if direction == "up_down":  # local view teaches the global view only
        global_to_local = torch.zeros_like(global_to_local)
    elif direction == "down_up":  # global view teaches the local view only
        local_to_global = torch.zeros_like(local_to_global)
    return global_to_local, local_to_global


def total_loss(
    main: torch.Tensor,
    global_to_local: torch.Tensor,
    local_to_global: torch.Tensor,
    distill_weight: float = 1.0,
) -> torch.Tensor:
    if distill_weight < 0:
        raise ValueError("distillation weight must be >= 0")
    return main + distill_weight * (global_to_local + local_to_global)
