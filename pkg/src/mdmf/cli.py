"""Command-line interface: train / eval / ablate / export-embeddings / synth.

Metrics go to stdout as JSON lines unless ``--metrics`` routes them to a
file. The ``MDMF_SEED`` environment variable overrides the config seed.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

from .config import RunConfig, apply_overrides, load_config
from .episodes import save_manifest, synth_generate
from .harness import ablate, build_dataset, evaluate, export_embeddings, load_checkpoint, train


def _resolve_config(args) -> RunConfig:
    cfg = load_config(args.config) if getattr(args, "config", None) else RunConfig()
    overrides = {}
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise SystemExit(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        overrides[key.strip()] = value
    if overrides:
        cfg = apply_overrides(cfg, overrides)
    if getattr(args, "seed", None) is not None:
        cfg = apply_overrides(cfg, {"seed": str(args.seed)})
    env_seed = os.environ.get("MDMF_SEED")
    if env_seed is not None:
        cfg = apply_overrides(cfg, {"seed": env_seed})
    return cfg


def _metrics_sink(path: str | None):
    if path:
        handle = open(path, "w", encoding="utf-8")
    else:
        handle = sys.stdout

    def sink(record: dict):
        handle.write(json.dumps(record) + "\n")
        handle.flush()

    return sink, (handle if path else None)


def _cmd_train(args) -> int:
    cfg = _resolve_config(args)
    sink, handle = _metrics_sink(args.metrics)
    try:
        result = train(cfg, metrics_sink=sink)
    finally:
        if handle:
            handle.close()
    if args.ckpt:
        from .harness import save_checkpoint

        save_checkpoint(args.ckpt, result.model, result.optimizer, cfg.train_episodes)
        print(f"checkpoint written to {args.ckpt}", file=sys.stderr)
    return 0


def _cmd_eval(args) -> int:
    model, _, cfg = load_checkpoint(args.ckpt)
    if args.episodes is not None:
        cfg = apply_overrides(cfg, {"eval.episodes": str(args.episodes)})
    if args.seed is not None:
        cfg = apply_overrides(cfg, {"seed": str(args.seed)})
    env_seed = os.environ.get("MDMF_SEED")
    if env_seed is not None:
        cfg = apply_overrides(cfg, {"seed": env_seed})
    split = build_dataset(cfg)
    scored = evaluate(model, cfg, split)
    print(
        json.dumps(
            {
                "accuracy": scored.accuracy,
                "ci95": scored.ci95,
                "episodes": len(scored.per_episode),
            }
        )
    )
    return 0


def _cmd_ablate(args) -> int:
    cfg = _resolve_config(args)
    with open(args.grid, "r", encoding="utf-8") as fh:
        grid = json.load(fh)
    if not isinstance(grid, list) or not all(isinstance(row, dict) for row in grid):
        raise SystemExit("grid file must hold a JSON list of {dotted.key: value} objects")
    rows = ablate(cfg, grid)
    out = open(args.out, "w", encoding="utf-8") if args.out else sys.stdout
    try:
        for row in rows:
            out.write(json.dumps(row) + "\n")
    finally:
        if args.out:
            out.close()
    return 0


def _cmd_export(args) -> int:
    model, _, cfg = load_checkpoint(args.ckpt)
    env_seed = os.environ.get("MDMF_SEED")
    if env_seed is not None:
        cfg = apply_overrides(cfg, {"seed": env_seed})
    split = build_dataset(cfg)
    rows = export_embeddings(model, cfg, split, args.episodes, args.out)
    print(f"wrote {rows} rows to {args.out}", file=sys.stderr)
    return 0


def _cmd_synth(args) -> int:
    split_counts = None
    if args.split_counts:
        split_counts = tuple(int(x) for x in args.split_counts.split(","))
    split = synth_generate(
        num_classes=args.classes,
        per_class=args.per_class,
        d_raw=args.d_raw,
        motif_len=args.motif_len,
        noise_sigma=args.noise_sigma,
        seed=args.seed,
        frames_per_video=args.frames,
        split_counts=split_counts,
    )
    manifest = save_manifest(split, Path(args.out))
    print(f"manifest written to {manifest}", file=sys.stderr)
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="mdmf")
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="run episodic training")
    p_train.add_argument("--config", help="flat key=value config file")
    p_train.add_argument("--seed", type=int)
    p_train.add_argument("--set", action="append", metavar="KEY=VALUE")
    p_train.add_argument("--metrics", help="write JSONL metrics here instead of stdout")
    p_train.add_argument("--ckpt", help="write the final checkpoint here")
    p_train.set_defaults(func=_cmd_train)

    p_eval = sub.add_parser("eval", help="evaluate a checkpoint")
    p_eval.add_argument("--ckpt", required=True)
    p_eval.add_argument("--episodes", type=int)
    p_eval.add_argument("--seed", type=int)
    p_eval.set_defaults(func=_cmd_eval)

    p_ablate = sub.add_parser("ablate", help="train/evaluate a grid of config deltas")
    p_ablate.add_argument("--grid", required=True, help="JSON list of dotted-key deltas")
    p_ablate.add_argument("--config")
    p_ablate.add_argument("--seed", type=int)
    p_ablate.add_argument("--set", action="append", metavar="KEY=VALUE")
    p_ablate.add_argument("--out", help="write JSONL rows here instead of stdout")
    p_ablate.set_defaults(func=_cmd_ablate)

    p_export = sub.add_parser("export-embeddings", help="dump fused features as CSV")
    p_export.add_argument("--ckpt", required=True)
    p_export.add_argument("--out", required=True)
    p_export.add_argument("--episodes", type=int, default=10)
    p_export.set_defaults(func=_cmd_export)

    p_synth = sub.add_parser("synth", help="generate a synthetic dataset on disk")
    p_synth.add_argument("--out", required=True)
    p_synth.add_argument("--classes", type=int, required=True)
    p_synth.add_argument("--per-class", type=int, required=True, dest="per_class")
    p_synth.add_argument("--d-raw", type=int, default=32, dest="d_raw")
    p_synth.add_argument("--motif-len", type=int, default=7, dest="motif_len")
    p_synth.add_argument("--noise-sigma", type=float, default=0.05, dest="noise_sigma")
    p_synth.add_argument("--frames", type=int, default=8)
    p_synth.add_argument("--seed", type=int, default=0)
    p_synth.add_argument("--split-counts", dest="split_counts",
                         help="train,val,test class counts, e.g. 5,0,5")
    p_synth.set_defaults(func=_cmd_synth)

    args = parser.parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    raise SystemExit(main())
