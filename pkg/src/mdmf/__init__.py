"""Few-shot video action recognition with multi-view distillation.

Episodic meta-learning over prompt-fused temporal features: a probability
prompt selector assigns each query a support-class prompt, local and global
temporal-context views are fused with the prompts through cross-attention,
queries are matched to class prototypes with a soft temporal-alignment
distance, and the two views teach each other through reliability-gated
mutual distillation.
"""

from .config import RunConfig, load_config
from .episodes import (
    DatasetSplit,
    Episode,
    VideoSample,
    load_manifest,
    sample_episode,
    sample_frames,
    synth_generate,
)
from .harness import (
    FewShotModel,
    ablate,
    build_dataset,
    build_model,
    evaluate,
    export_embeddings,
    forward_episode,
    load_checkpoint,
    save_checkpoint,
    train,
)

__version__ = "0.1.0"

__all__ = [
    "RunConfig",
    "load_config",
    "DatasetSplit",
    "Episode",
    "VideoSample",
    "load_manifest",
    "sample_episode",
    "sample_frames",
    "synth_generate",
    "FewShotModel",
    "ablate",
    "build_dataset",
    "build_model",
    "evaluate",
    "export_embeddings",
    "forward_episode",
    "load_checkpoint",
    "save_checkpoint",
    "train",
    "__version__",
]
