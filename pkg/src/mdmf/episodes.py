"""Dataset ingestion, episode sampling, frame sampling and synthetic data.

Datasets are grouped by class into disjoint train/val/test splits. An episode
is one N-way K-shot task: N classes, K support clips per class, P query clips
drawn from the remaining clips of those classes. Everything here is a pure
function of its inputs and an explicit seed.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

PARTS = ("train", "val", "test")

_CLASS_WORDS = (
    "swing", "jump", "wave", "spin", "kick", "lift", "push", "pull", "turn",
    "bend", "roll", "clap", "throw", "catch", "slide", "stomp", "reach",
    "duck", "hop", "twist",
)


class ManifestError(ValueError):
    """Malformed manifest record."""


class SplitViolationError(ValueError):
    """A class name appears in more than one split."""


class CapacityError(ValueError):
    """Not enough classes or samples to satisfy an episode request."""


@dataclass
class VideoSample:
    """One clip: an id, a class label, and ordered frame references.

    ``frames`` is either a (T_raw, d_raw) float array of synthetic feature
    frames or a tuple of file paths for a real-backbone adapter.
    """

    id: str
    label: str
    frames: np.ndarray | tuple[str, ...]

    def __post_init__(self):
        if not self.label:
            raise ValueError(f"sample {self.id!r} has an empty label")
        if len(self.frames) < 1:
            raise ValueError(f"sample {self.id!r} has no frames")

    def __len__(self) -> int:
        return len(self.frames)


@dataclass
class DatasetSplit:
    """Per-part class -> samples maps with pairwise-disjoint class sets."""

    train: dict[str, list[VideoSample]] = field(default_factory=dict)
    val: dict[str, list[VideoSample]] = field(default_factory=dict)
    test: dict[str, list[VideoSample]] = field(default_factory=dict)

    def part(self, name: str) -> dict[str, list[VideoSample]]:
        if name not in PARTS:
            raise ValueError(f"unknown part {name!r}, expected one of {PARTS}")
        return getattr(self, name)

    def validate_disjoint(self) -> None:
        for a, b in (("train", "val"), ("train", "test"), ("val", "test")):
            overlap = set(self.part(a)) & set(self.part(b))
            if overlap:
                raise SplitViolationError(
                    f"classes {sorted(overlap)} appear in both {a} and {b}"
                )

    @property
    def feature_dim(self) -> int | None:
        for name in PARTS:
            for samples in self.part(name).values():
                for sample in samples:
                    if isinstance(sample.frames, np.ndarray):
                        return int(sample.frames.shape[1])
        return None


@dataclass
class Episode:
    """One N-way K-shot task with P queries and a hidden ground truth."""

    way: int
    shot: int
    query_count: int
    class_set: tuple[str, ...]
    support: list[list[VideoSample]]  # way lists of shot samples
    queries: list[VideoSample]
    query_labels: tuple[int, ...]  # index into class_set, per query
    seed: int

    def __post_init__(self):
        if self.way < 2 or self.shot < 1 or self.query_count < 1:
            raise ValueError("episode needs way >= 2, shot >= 1, queries >= 1")
        if len(self.class_set) != self.way or len(self.support) != self.way:
            raise ValueError("class set / support size does not match way")
        if any(len(group) != self.shot for group in self.support):
            raise ValueError("every support class must contribute exactly shot samples")
        if len(self.queries) != self.query_count or len(self.query_labels) != self.query_count:
            raise ValueError("query count mismatch")
        if any(not 0 <= y < self.way for y in self.query_labels):
            raise ValueError("query label outside the episode class set")
        support_ids = {s.id for group in self.support for s in group}
        if support_ids & {q.id for q in self.queries}:
            raise ValueError("a sample appears in both support and queries")


def write_feature_file(path: str | Path, array: np.ndarray) -> None:
    """Binary frame-feature matrix: u32 dims header, then row-major f32."""
    array = np.asarray(array, dtype=np.float32)
    if array.ndim != 2:
        raise ValueError("feature file stores a 2-D (frames, dim) matrix")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<II", array.shape[0], array.shape[1]))
        fh.write(array.astype("<f4").tobytes())


def read_feature_file(path: str | Path) -> np.ndarray:
    with open(path, "rb") as fh:
        header = fh.read(8)
        if len(header) != 8:
            raise ValueError(f"{path}: truncated feature-file header")
        n_frames, dim = struct.unpack("<II", header)
        data = np.frombuffer(fh.read(), dtype="<f4")
    if data.size != n_frames * dim:
        raise ValueError(f"{path}: payload does not match header dims")
    return data.reshape(n_frames, dim).astype(np.float32)


def load_manifest(path: str | Path) -> DatasetSplit:
    """Read a newline-delimited JSON manifest into a validated DatasetSplit.

    Each record carries ``id``, ``label``, ``split`` and either ``frames``
    (a list of file paths) or ``feature_file`` (path to a binary feature
    matrix, resolved relative to the manifest).
    """
    path = Path(path)
    split = DatasetSplit()
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ManifestError(f"{path}:{lineno}: invalid JSON ({exc})") from exc
            for key in ("id", "label", "split"):
                if key not in record:
                    raise ManifestError(f"{path}:{lineno}: record missing {key!r}")
            if record["split"] not in PARTS:
                raise ManifestError(
                    f"{path}:{lineno}: split must be one of {PARTS}, got {record['split']!r}"
                )
            if "feature_file" in record:
                frames = read_feature_file(path.parent / record["feature_file"])
            elif "frames" in record:
                frames = tuple(record["frames"])
            else:
                raise ManifestError(
                    f"{path}:{lineno}: record needs 'frames' or 'feature_file'"
                )
            sample = VideoSample(id=record["id"], label=record["label"], frames=frames)
            split.part(record["split"]).setdefault(sample.label, []).append(sample)
    split.validate_disjoint()
    return split


def save_manifest(split: DatasetSplit, out_dir: str | Path) -> Path:
    """Write a split as manifest.jsonl plus one feature file per sample."""
    out_dir = Path(out_dir)
    features_dir = out_dir / "features"
    features_dir.mkdir(parents=True, exist_ok=True)
    manifest_path = out_dir / "manifest.jsonl"
    with open(manifest_path, "w", encoding="utf-8") as fh:
        for part in PARTS:
            for label in sorted(split.part(part)):
                for sample in split.part(part)[label]:
                    record = {"id": sample.id, "label": sample.label, "split": part}
                    if isinstance(sample.frames, np.ndarray):
                        rel = f"features/{sample.id}.bin"
                        write_feature_file(out_dir / rel, sample.frames)
                        record["feature_file"] = rel
                    else:
                        record["frames"] = list(sample.frames)
                    fh.write(json.dumps(record) + "\n")
    return manifest_path


def sample_episode(
    split: DatasetSplit, part: str, way: int, shot: int, queries: int, seed: int
) -> Episode:
    """Draw one episode from a split part, deterministically in ``seed``."""
    pool = split.part(part)
    classes = sorted(pool)
    if len(classes) < way:
        raise CapacityError(
            f"part {part!r} has {len(classes)} classes, episode needs {way}"
        )
    rng = np.random.default_rng(seed)
    chosen = [classes[i] for i in rng.choice(len(classes), size=way, replace=False)]
    support: list[list[VideoSample]] = []
    candidates: list[tuple[VideoSample, int]] = []
    for class_index, name in enumerate(chosen):
        samples = pool[name]
        if len(samples) < shot + 1:
            raise CapacityError(
                f"class {name!r} has {len(samples)} samples, needs {shot + 1} "
                f"to supply {shot} support plus a query candidate"
            )
        order = rng.permutation(len(samples))
        support.append([samples[i] for i in order[:shot]])
        candidates.extend((samples[i], class_index) for i in order[shot:])
    if len(candidates) < queries:
        raise CapacityError(
            f"{len(candidates)} query candidates available, episode needs {queries}"
        )
    picked = rng.choice(len(candidates), size=queries, replace=False)
    query_samples = [candidates[i][0] for i in picked]
    query_labels = tuple(candidates[i][1] for i in picked)
    return Episode(
        way=way,
        shot=shot,
        query_count=queries,
        class_set=tuple(chosen),
        support=support,
        queries=query_samples,
        query_labels=query_labels,
        seed=seed,
    )


def frame_indices(length: int, count: int, deterministic: bool, seed: int = 0) -> list[int]:
    """TSN-style segment sampling indices, non-decreasing, always ``count`` long.

    The clip is cut into ``count`` equal segments of the continuous range
    [0, length); deterministic mode takes each segment's centre, stochastic
    mode draws uniformly inside each segment. Clips shorter than ``count``
    repeat frames via the same formula.
    """
    if count < 1:
        raise ValueError("frame count must be >= 1")
    if deterministic:
        offsets = np.full(count, 0.5)
    else:
        offsets = np.random.default_rng(seed).random(count)
    idx = np.floor((np.arange(count) + offsets) * length / count).astype(int)
    return list(np.clip(idx, 0, length - 1))


def sample_frames(
    sample: VideoSample, count: int, deterministic: bool, seed: int = 0
):
    """Select ``count`` frame references from a clip (see frame_indices)."""
    idx = frame_indices(len(sample.frames), count, deterministic, seed)
    if isinstance(sample.frames, np.ndarray):
        return sample.frames[idx]
    return [sample.frames[i] for i in idx]


def _default_split_counts(num_classes: int) -> tuple[int, int, int]:
    n_val = max(1, round(num_classes * 0.2))
    n_test = max(1, round(num_classes * 0.25))
    n_train = num_classes - n_val - n_test
    return n_train, n_val, n_test


def _smooth_walk(rng: np.random.Generator, length: int, dim: int) -> np.ndarray:
    """Unit-vector sequence with strong consecutive correlation."""
    out = np.empty((length, dim))
    step = rng.standard_normal(dim)
    out[0] = step / np.linalg.norm(step)
    for t in range(1, length):
        step = 0.9 * out[t - 1] + 0.45 * rng.standard_normal(dim) / np.sqrt(dim)
        out[t] = step / np.linalg.norm(step)
    return out


def synth_generate(
    num_classes: int,
    per_class: int,
    d_raw: int = 32,
    motif_len: int = 7,
    noise_sigma: float = 0.05,
    seed: int = 0,
    frames_per_video: int = 8,
    split_counts: tuple[int, int, int] | None = None,
    motif_contrast: float = 1.3,
    dev_dim: int = 8,
    background_dim: int = 12,
    background_gain: float = 52.0,
) -> DatasetSplit:
    """Generate a motif-coded synthetic dataset.

    Each class is a random temporal motif: ``motif_len`` unit direction
    vectors built from a carrier walk shared by all classes plus a
    class-specific deviation sequence confined to a fixed ``dev_dim``
    subspace, weighted by ``motif_contrast``. A sample places its class motif
    at a random temporal offset inside a ``frames_per_video``-frame noise
    background (a per-sample smooth process in its own ``background_dim``
    subspace, scaled by ``background_gain * noise_sigma`` the way scene
    content dominates real video features) and adds isotropic Gaussian noise
    of scale ``noise_sigma`` on top.

    The background buries the class signal from direct frame matching, so an
    untrained matcher sits near chance, while suppressing the background
    subspace (a class-agnostic linear map, learnable from the training
    classes and valid for unseen ones) recovers it. Mean-pooling frames
    cannot solve the task: class identity needs temporally aligned frames.

    ``split_counts`` overrides the default class allocation (which keeps at
    least one class per part, hence the ``num_classes >= 3`` requirement).
    """
    if num_classes < 3:
        raise CapacityError("need at least 3 classes so every split part gets one")
    if motif_len > frames_per_video:
        raise ValueError("motif cannot be longer than the clip")
    if dev_dim + background_dim >= d_raw:
        raise ValueError("d_raw must exceed dev_dim + background_dim to leave carrier room")
    counts = split_counts if split_counts is not None else _default_split_counts(num_classes)
    if sum(counts) != num_classes or min(counts) < 0:
        raise ValueError(f"split counts {counts} do not partition {num_classes} classes")

    rng = np.random.default_rng(seed)
    names = [f"{_CLASS_WORDS[i % len(_CLASS_WORDS)]}_{i:02d}" for i in range(num_classes)]

    basis, _ = np.linalg.qr(rng.standard_normal((d_raw, d_raw)))
    dev_basis = basis[:, :dev_dim]
    background_basis = basis[:, dev_dim : dev_dim + background_dim]
    carrier_basis = basis[:, dev_dim + background_dim :]
    carrier = _smooth_walk(rng, motif_len, carrier_basis.shape[1]) @ carrier_basis.T

    split = DatasetSplit()
    parts = [name for name, n in zip(PARTS, counts) for _ in range(n)]
    for label, part in zip(names, parts):
        deviation = rng.standard_normal((motif_len, dev_dim))
        deviation /= np.linalg.norm(deviation, axis=1, keepdims=True)
        motif = carrier + motif_contrast * (deviation @ dev_basis.T)
        motif /= np.linalg.norm(motif, axis=1, keepdims=True)
        samples = []
        for j in range(per_class):
            offset = int(rng.integers(0, frames_per_video - motif_len + 1))
            frames = np.zeros((frames_per_video, d_raw))
            frames[offset : offset + motif_len] = motif
            background = _smooth_walk(rng, frames_per_video, background_dim)
            frames += background_gain * noise_sigma * (background @ background_basis.T)
            frames += noise_sigma * rng.standard_normal((frames_per_video, d_raw))
            samples.append(
                VideoSample(
                    id=f"{label}_v{j:03d}",
                    label=label,
                    frames=frames.astype(np.float32),
                )
            )
        split.part(part)[label] = samples
    split.validate_disjoint()
    return split
