"""Episodic training, evaluation, ablation grids, export and checkpoints.

One iteration = one episode. Gradients accumulate (averaged) over
``accumulation_steps`` episodes before each Adam step. All randomness is
derived from the run seed through named seed streams, so a fixed seed
reproduces the metrics stream exactly and evaluation never depends on how
many training episodes ran.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
import time
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn

from . import matching, mvmd, pps
from .config import RunConfig, apply_overrides, config_from_dict, config_to_dict
from .encoders import EncoderConfig, build_encoders
from .episodes import DatasetSplit, Episode, load_manifest, sample_episode, sample_frames, synth_generate
from .mmfe import FusionEncoder, prepend_token
from .temporal_views import ViewKind, build_context_extractor

_SEED_STREAMS = {"train": 0, "train-rng": 1, "eval": 2, "eval-rng": 3, "export": 4}


class NonFiniteLossError(RuntimeError):
    def __init__(self, episode_seed: int, message: str):
        super().__init__(f"{message} (episode seed {episode_seed})")
        self.episode_seed = episode_seed


def derive_seed(base_seed: int, stream: str, index: int) -> int:
    seq = np.random.SeedSequence([base_seed, _SEED_STREAMS[stream], index])
    return int(seq.generate_state(1)[0])


def build_dataset(cfg: RunConfig) -> DatasetSplit:
    if cfg.manifest:
        return load_manifest(cfg.manifest)
    return synth_generate(
        num_classes=cfg.synth_classes,
        per_class=cfg.synth_per_class,
        d_raw=cfg.synth_d_raw,
        motif_len=cfg.synth_motif_len,
        noise_sigma=cfg.synth_noise_sigma,
        seed=cfg.synth_seed,
        frames_per_video=cfg.synth_frames,
        split_counts=cfg.synth_split_counts or None,
    )


class FewShotModel(nn.Module):
    """Encoders, per-view context extractors and fusion blocks, one bundle."""

    def __init__(self, cfg: RunConfig, raw_dim: int):
        super().__init__()
        self.run_config = cfg
        self.raw_dim = raw_dim
        encoder_cfg = EncoderConfig(
            kind=cfg.encoder_kind,
            dim=cfg.encoder_dim,
            prompt_template=cfg.prompt_template,
            trainable=cfg.encoder_trainable,
            seed=cfg.encoder_seed,
        )
        visual, text = build_encoders(encoder_cfg, raw_dim)
        self.visual_encoder = visual  # nn.Module stubs register; adapters may not be Modules
        self.text_encoder = text
        self.views = tuple(ViewKind(v) for v in cfg.views_enabled)
        self.context = nn.ModuleDict(
            {
                view.value: build_context_extractor(
                    view,
                    cfg.encoder_dim,
                    ltce_kernel=cfg.ltce_kernel,
                    tcn_dilations=cfg.tcn_dilations,
                )
                for view in self.views
            }
        )
        self.fusion = nn.ModuleDict(
            {
                view.value: FusionEncoder(
                    cfg.encoder_dim,
                    cfg.frames + 1,
                    heads=cfg.mmfe_heads,
                    layers=cfg.mmfe_layers,
                    ffn_mult=cfg.mmfe_ffn_mult,
                )
                for view in self.views
            }
        )
        # Stands in for the prompt row of queries when the selector is off.
        self.null_token = nn.Parameter(torch.randn(cfg.encoder_dim) * 0.02)

    @property
    def mvmd_active(self) -> bool:
        return self.run_config.mvmd_enabled and {ViewKind.LOCAL, ViewKind.GLOBAL} <= set(
            self.views
        )


def build_model(cfg: RunConfig, raw_dim: int) -> FewShotModel:
    torch.manual_seed(cfg.seed)
    return FewShotModel(cfg, raw_dim)


@dataclass
class EpisodeResult:
    episode: Episode
    view_distances: dict  # ViewKind -> (P, N) tensor
    fused_distances: torch.Tensor  # (P, N)
    probs: torch.Tensor  # (P, N)
    truth: torch.Tensor  # (P,)
    loss_main: torch.Tensor
    loss_g2l: torch.Tensor
    loss_l2g: torch.Tensor
    loss_total: torch.Tensor
    partition: mvmd.ReliabilityPartition
    fused_query: dict = field(default_factory=dict)  # ViewKind -> (P, T+1, D)
    fused_support: dict = field(default_factory=dict)  # ViewKind -> (N*K, T+1, D)

    @property
    def accuracy(self) -> float:
        return float((self.probs.argmax(dim=-1) == self.truth).double().mean())


def forward_episode(
    model: FewShotModel,
    episode: Episode,
    cfg: RunConfig,
    rng: np.random.Generator,
    train_mode: bool,
) -> EpisodeResult:
    """Run the full pipeline on one episode.

    encode -> prompt selection for queries / label prompts for support ->
    per view: temporal context, prompt prefix, cross-attention fusion,
    prototypes, alignment distances -> distance fusion, classification and
    main loss -> (when both views are on) posteriors, reliability gating and
    the two distillation losses.
    """
    n_way, k_shot, n_query = episode.way, episode.shot, episode.query_count
    clips = [s for group in episode.support for s in group] + list(episode.queries)
    encoded = torch.stack(
        [
            model.visual_encoder.encode_video(
                sample_frames(
                    clip,
                    cfg.frames,
                    deterministic=not train_mode,
                    seed=int(rng.integers(2**31 - 1)),
                )
            )
            for clip in clips
        ]
    )  # (N*K + P, T, D)
    support_raw = encoded[: n_way * k_shot]
    query_raw = encoded[n_way * k_shot :]

    class_tokens = [model.text_encoder.encode_label(name) for name in episode.class_set]
    token_matrix = torch.stack([t.data for t in class_tokens])  # (N, D)

    if cfg.pps_enabled:
        with torch.no_grad():
            query_vectors = pps.query_video_vector(query_raw)  # (P, D)
        query_tokens = []
        for q in range(n_query):
            sims = pps.cosine_similarity(query_vectors[q].unsqueeze(0), token_matrix)
            dist = pps.prompt_distribution(sims, episode.class_set, cfg.pps_temperature)
            query_tokens.append(
                pps.select_prompt(dist, class_tokens, mode=cfg.pps_mode, rng=rng).data
            )
        query_token_matrix = torch.stack(query_tokens)  # (P, D)
    else:
        query_token_matrix = model.null_token.unsqueeze(0).expand(n_query, -1)

    support_tokens = token_matrix.repeat_interleave(k_shot, dim=0)  # (N*K, D)

    view_distances: dict = {}
    fused_query: dict = {}
    fused_support: dict = {}
    prototypes: dict = {}
    for view in model.views:
        context = model.context[view.value](encoded)
        ctx_support, ctx_query = context[: n_way * k_shot], context[n_way * k_shot :]
        fused_s = model.fusion[view.value](
            prepend_token(support_tokens, ctx_support),
            prepend_token(support_tokens, support_raw),
        )
        fused_q = model.fusion[view.value](
            prepend_token(query_token_matrix, ctx_query),
            prepend_token(query_token_matrix, query_raw),
        )
        protos = fused_s.reshape(n_way, k_shot, *fused_s.shape[1:]).mean(dim=1)
        view_distances[view] = matching.pairwise_view_distances(
            fused_q, protos, cfg.otam_gamma, cfg.otam_bidirectional
        )
        fused_query[view] = fused_q
        fused_support[view] = fused_s
        prototypes[view] = protos

    fused = matching.fuse_distances(view_distances)
    probs = matching.classify(fused)
    truth = torch.as_tensor(episode.query_labels, dtype=torch.long)
    loss_main = matching.main_loss(probs, truth)

    partition = mvmd.ReliabilityPartition()
    loss_g2l = torch.tensor(0.0)
    loss_l2g = torch.tensor(0.0)
    if model.mvmd_active:
        def mvmd_terms():
            visual_posteriors, scores = {}, {}
            for q in range(n_query):
                visual_posteriors[q] = {}
                scores[q] = {}
                for view in (ViewKind.LOCAL, ViewKind.GLOBAL):
                    visual = mvmd.posterior_from_distances(view_distances[view][q])
                    text = mvmd.posterior_from_tokens(
                        fused_query[view][q, 0], prototypes[view][:, 0, :]
                    )
                    posterior = mvmd.ViewPosteriors(visual, text, view, query_id=q)
                    visual_posteriors[q][view] = visual
                    scores[q][view] = mvmd.discriminants(posterior)
            part = mvmd.partition_queries(
                scores, conditions=cfg.mvmd_conditions, margin=cfg.mvmd_margin
            )
            g2l, l2g = mvmd.distillation_losses(
                part, visual_posteriors, scores, direction=cfg.mvmd_direction
            )
            return part, g2l, l2g

        if cfg.mvmd_lambda > 0:
            partition, loss_g2l, loss_l2g = mvmd_terms()
        else:
            # Keep the graph identical to the distillation-off configuration.
            with torch.no_grad():
                partition, loss_g2l, loss_l2g = mvmd_terms()

    if model.mvmd_active and cfg.mvmd_lambda > 0:
        loss_total = mvmd.total_loss(loss_main, loss_g2l, loss_l2g, cfg.mvmd_lambda)
    else:
        loss_total = loss_main

    return EpisodeResult(
        episode=episode,
        view_distances=view_distances,
        fused_distances=fused,
        probs=probs,
        truth=truth,
        loss_main=loss_main,
        loss_g2l=loss_g2l,
        loss_l2g=loss_l2g,
        loss_total=loss_total,
        partition=partition,
        fused_query=fused_query,
        fused_support=fused_support,
    )


def metrics_record(index: int, result: EpisodeResult, wall_ms: float) -> dict:
    return {
        "episode": index,
        "loss_main": float(result.loss_main.detach()),
        "loss_g2l": float(result.loss_g2l.detach()),
        "loss_l2g": float(result.loss_l2g.detach()),
        "loss_total": float(result.loss_total.detach()),
        "accuracy": result.accuracy,
        "omega_g": len(result.partition.global_reliable),
        "omega_l": len(result.partition.local_reliable),
        "wall_ms": wall_ms,
    }


@dataclass
class TrainResult:
    model: FewShotModel
    optimizer: torch.optim.Optimizer
    metrics: list[dict]
    split: DatasetSplit


def train(cfg: RunConfig, split: DatasetSplit | None = None, metrics_sink=None) -> TrainResult:
    """Run the episodic training loop; see the module docstring for RNG rules."""
    if split is None:
        split = build_dataset(cfg)
    raw_dim = split.feature_dim or 0
    model = build_model(cfg, raw_dim)
    optimizer = torch.optim.Adam(
        model.parameters(), lr=cfg.lr, betas=(cfg.beta1, cfg.beta2)
    )
    model.train()
    metrics: list[dict] = []
    optimizer.zero_grad()
    for index in range(cfg.train_episodes):
        episode_seed = derive_seed(cfg.seed, "train", index)
        episode = sample_episode(
            split, "train", cfg.way, cfg.shot, cfg.queries, episode_seed
        )
        rng = np.random.default_rng(derive_seed(cfg.seed, "train-rng", index))
        started = time.perf_counter()
        result = forward_episode(model, episode, cfg, rng, train_mode=True)
        if not torch.isfinite(result.loss_total):
            raise NonFiniteLossError(episode_seed, "non-finite training loss")
        (result.loss_total / cfg.accumulation_steps).backward()
        if (index + 1) % cfg.accumulation_steps == 0:
            optimizer.step()
            optimizer.zero_grad()
        record = metrics_record(index, result, (time.perf_counter() - started) * 1e3)
        metrics.append(record)
        if metrics_sink is not None:
            metrics_sink(record)
        if (
            cfg.checkpoint_path
            and cfg.checkpoint_every > 0
            and (index + 1) % cfg.checkpoint_every == 0
        ):
            save_checkpoint(cfg.checkpoint_path, model, optimizer, episode_index=index + 1)
    if cfg.checkpoint_path:
        save_checkpoint(cfg.checkpoint_path, model, optimizer, episode_index=cfg.train_episodes)
    return TrainResult(model, optimizer, metrics, split)


@dataclass
class EvalResult:
    accuracy: float
    ci95: float
    per_episode: list[float]


def evaluate(model: FewShotModel, cfg: RunConfig, split: DatasetSplit) -> EvalResult:
    """Mean episode accuracy with a 1.96-sigma confidence interval."""
    if cfg.eval_episodes < 1:
        raise ValueError("eval.episodes must be >= 1")
    was_training = model.training
    model.eval()
    per_episode: list[float] = []
    with torch.no_grad():
        for index in range(cfg.eval_episodes):
            episode_seed = derive_seed(cfg.seed, "eval", index)
            episode = sample_episode(
                split, cfg.eval_part, cfg.way, cfg.shot, cfg.queries, episode_seed
            )
            rng = np.random.default_rng(derive_seed(cfg.seed, "eval-rng", index))
            result = forward_episode(model, episode, cfg, rng, train_mode=False)
            per_episode.append(result.accuracy)
    if was_training:
        model.train()
    mean = float(np.mean(per_episode))
    if len(per_episode) > 1:
        ci = 1.96 * float(np.std(per_episode, ddof=1)) / math.sqrt(len(per_episode))
    else:
        ci = float("nan")
    return EvalResult(mean, ci, per_episode)


def ablate(base_cfg: RunConfig, grid: list[dict], split: DatasetSplit | None = None) -> list[dict]:
    """Train+evaluate one run per grid entry (dotted-key config deltas)."""
    rows = []
    for delta in grid:
        cfg = apply_overrides(base_cfg, delta)
        run_split = split if split is not None else build_dataset(cfg)
        trained = train(cfg, split=run_split)
        scored = evaluate(trained.model, cfg, run_split)
        row = dict(delta)
        row["accuracy"] = scored.accuracy
        row["ci95"] = scored.ci95
        rows.append(row)
    return rows


def export_embeddings(
    model: FewShotModel, cfg: RunConfig, split: DatasetSplit, episodes: int, path
) -> int:
    """Write fused per-clip features (visual rows mean-pooled) as CSV.

    One row per clip per enabled view, over ``episodes`` deterministic
    episodes from the eval part. Returns the number of rows written.
    """
    model.eval()
    rows = 0
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["id", "label", "view"] + [f"d{i}" for i in range(cfg.encoder_dim)]
        )
        with torch.no_grad():
            for index in range(episodes):
                episode_seed = derive_seed(cfg.seed, "export", index)
                episode = sample_episode(
                    split, cfg.eval_part, cfg.way, cfg.shot, cfg.queries, episode_seed
                )
                rng = np.random.default_rng(derive_seed(cfg.seed, "export", 10**6 + index))
                result = forward_episode(model, episode, cfg, rng, train_mode=False)
                support_clips = [s for group in episode.support for s in group]
                for view in model.views:
                    pooled_s = result.fused_support[view][:, 1:, :].mean(dim=1)
                    pooled_q = result.fused_query[view][:, 1:, :].mean(dim=1)
                    for clip, vec in zip(support_clips, pooled_s):
                        writer.writerow([clip.id, clip.label, view.value] + vec.tolist())
                        rows += 1
                    for clip, vec in zip(episode.queries, pooled_q):
                        writer.writerow([clip.id, clip.label, view.value] + vec.tolist())
                        rows += 1
    return rows


def config_hash(cfg: RunConfig) -> str:
    payload = json.dumps(config_to_dict(cfg), sort_keys=True, default=list)
    return hashlib.sha256(payload.encode()).hexdigest()


def save_checkpoint(path, model: FewShotModel, optimizer=None, episode_index: int = 0) -> None:
    torch.save(
        {
            "model": model.state_dict(),
            "optimizer": optimizer.state_dict() if optimizer is not None else None,
            "config": config_to_dict(model.run_config),
            "config_hash": config_hash(model.run_config),
            "raw_dim": model.raw_dim,
            "episode_index": episode_index,
            "torch_rng": torch.get_rng_state(),
        },
        path,
    )


def load_checkpoint(path):
    """Rebuild (model, optimizer, config) exactly as saved."""
    payload = torch.load(path, weights_only=False)
    cfg = config_from_dict(payload["config"])
    model = build_model(cfg, payload["raw_dim"])
    model.load_state_dict(payload["model"])
    optimizer = torch.optim.Adam(model.parameters(), lr=cfg.lr, betas=(cfg.beta1, cfg.beta2))
    if payload["optimizer"] is not None:
        optimizer.load_state_dict(payload["optimizer"])
    torch.set_rng_state(payload["torch_rng"])
    return model, optimizer, cfg
