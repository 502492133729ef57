"""Run configuration and the flat key=value config-file format.

Config files are plain text, one ``dotted.key = value`` per line, ``#`` for
comments. Lists are comma-separated. The same dotted keys are accepted as
``--set`` overrides on the command line.
"""

from __future__ import annotations

from dataclasses import dataclass, fields
from pathlib import Path


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    # episodes
    way: int = 5
    shot: int = 1
    queries: int = 5
    frames: int = 8
    eval_part: str = "test"
    seed: int = 0
    # data source: a manifest path, or the synthetic generator below
    manifest: str = ""
    synth_classes: int = 10
    synth_per_class: int = 60
    synth_d_raw: int = 32
    synth_motif_len: int = 7
    synth_noise_sigma: float = 0.05
    synth_frames: int = 8
    synth_seed: int = 7
    synth_split_counts: tuple[int, ...] = ()
    # optimizer / schedule
    lr: float = 1e-5
    beta1: float = 0.9
    beta2: float = 0.999
    accumulation_steps: int = 16
    train_episodes: int = 1000
    eval_episodes: int = 2000
    checkpoint_path: str = ""
    checkpoint_every: int = 0  # episodes between periodic saves; 0 = final only
    # encoder
    encoder_kind: str = "stub"
    encoder_dim: int = 64
    encoder_seed: int = 0
    encoder_trainable: bool = False
    prompt_template: str = "a video of {label}"
    # probability prompt selector
    pps_enabled: bool = True
    pps_temperature: float = 0.1
    pps_mode: str = "sample"
    # temporal views
    views_enabled: tuple[str, ...] = ("local", "global")
    ltce_kernel: int = 3
    tcn_dilations: tuple[int, ...] = (1, 2, 4)
    # fusion encoder
    mmfe_heads: int = 8
    mmfe_layers: int = 1
    mmfe_ffn_mult: int = 4
    # alignment distance
    otam_gamma: float = 0.1
    otam_bidirectional: bool = True
    # mutual distillation
    mvmd_enabled: bool = True
    mvmd_lambda: float = 1.0
    mvmd_direction: str = "bidirectional"
    mvmd_conditions: tuple[str, ...] = ("t_compare", "v_compare")
    mvmd_margin: float = 0.0

    def __post_init__(self):
        if self.accumulation_steps < 1:
            raise ConfigError("optim.accumulation_steps must be >= 1")
        if self.lr <= 0:
            raise ConfigError("optim.lr must be > 0")
        if self.mvmd_lambda < 0:
            raise ConfigError("mvmd.lambda must be >= 0")
        unknown_views = set(self.views_enabled) - {"local", "global", "none"}
        if unknown_views or not self.views_enabled:
            raise ConfigError(f"views.enabled must be a non-empty subset of local/global/none")


KEY_MAP = {
    "episodes.way": "way",
    "episodes.shot": "shot",
    "episodes.queries": "queries",
    "episodes.frames": "frames",
    "episodes.eval_part": "eval_part",
    "seed": "seed",
    "data.manifest": "manifest",
    "data.synth.classes": "synth_classes",
    "data.synth.per_class": "synth_per_class",
    "data.synth.d_raw": "synth_d_raw",
    "data.synth.motif_len": "synth_motif_len",
    "data.synth.noise_sigma": "synth_noise_sigma",
    "data.synth.frames": "synth_frames",
    "data.synth.seed": "synth_seed",
    "data.synth.split_counts": "synth_split_counts",
    "optim.lr": "lr",
    "optim.beta1": "beta1",
    "optim.beta2": "beta2",
    "optim.accumulation_steps": "accumulation_steps",
    "train.episodes": "train_episodes",
    "train.checkpoint": "checkpoint_path",
    "train.checkpoint_every": "checkpoint_every",
    "eval.episodes": "eval_episodes",
    "encoder.kind": "encoder_kind",
    "encoder.dim": "encoder_dim",
    "encoder.seed": "encoder_seed",
    "encoder.trainable": "encoder_trainable",
    "encoder.prompt_template": "prompt_template",
    "pps.enabled": "pps_enabled",
    "pps.temperature": "pps_temperature",
    "pps.mode": "pps_mode",
    "views.enabled": "views_enabled",
    "views.ltce.kernel": "ltce_kernel",
    "views.tcn.dilations": "tcn_dilations",
    "mmfe.heads": "mmfe_heads",
    "mmfe.layers": "mmfe_layers",
    "mmfe.ffn_mult": "mmfe_ffn_mult",
    "otam.gamma": "otam_gamma",
    "otam.bidirectional": "otam_bidirectional",
    "mvmd.enabled": "mvmd_enabled",
    "mvmd.lambda": "mvmd_lambda",
    "mvmd.direction": "mvmd_direction",
    "mvmd.conditions": "mvmd_conditions",
    "mvmd.margin": "mvmd_margin",
}

_FIELD_TYPES = {f.name: f.type for f in fields(RunConfig)}


def _parse_scalar(raw: str, target: str):
    raw = raw.strip()
    if target == "int":
        return int(raw)
    if target == "float":
        return float(raw)
    if target == "bool":
        low = raw.lower()
        if low in ("true", "1", "yes", "on"):
            return True
        if low in ("false", "0", "no", "off"):
            return False
        raise ConfigError(f"expected a boolean, got {raw!r}")
    return raw


def parse_value(key: str, raw: str):
    if key not in KEY_MAP:
        raise ConfigError(f"unknown config key {key!r}")
    field_name = KEY_MAP[key]
    annotation = str(_FIELD_TYPES[field_name])
    if annotation.startswith("tuple"):
        raw = raw.strip()
        if not raw:
            return ()
        element = "int" if "int" in annotation else "str"
        return tuple(_parse_scalar(part, element) for part in raw.split(","))
    for scalar in ("bool", "int", "float"):
        if scalar in annotation:
            return _parse_scalar(raw, scalar)
    return raw.strip()


def apply_overrides(cfg: RunConfig, overrides: dict) -> RunConfig:
    """New config with dotted-key overrides applied (values may be raw strings)."""
    updates = {}
    for key, value in overrides.items():
        if key not in KEY_MAP:
            raise ConfigError(f"unknown config key {key!r}")
        if isinstance(value, str):
            value = parse_value(key, value)
        elif isinstance(value, list):
            value = tuple(value)
        updates[KEY_MAP[key]] = value
    merged = {f.name: getattr(cfg, f.name) for f in fields(RunConfig)}
    merged.update(updates)
    return RunConfig(**merged)


def load_config(path: str | Path) -> RunConfig:
    overrides = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            stripped = line.split("#", 1)[0].strip()
            if not stripped:
                continue
            if "=" not in stripped:
                raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
            key, raw = stripped.split("=", 1)
            overrides[key.strip()] = raw
    return apply_overrides(RunConfig(), overrides)


def config_to_dict(cfg: RunConfig) -> dict:
    return {f.name: getattr(cfg, f.name) for f in fields(RunConfig)}


def config_from_dict(data: dict) -> RunConfig:
    values = {}
    for f in fields(RunConfig):
        if f.name in data:
            value = data[f.name]
            values[f.name] = tuple(value) if isinstance(value, list) else value
    return RunConfig(**values)
