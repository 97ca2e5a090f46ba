"""Command-line entry point: gen-synth, train, eval, explain, metrics.

The run configuration is one JSON document with optional sections
("head", "train", "loss", "align", "synth", "augment", "metrics"); missing
fields take their defaults and unknown keys are rejected.

Exit codes: 0 ok, 2 configuration error, 3 I/O error, 4 numeric failure.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys

import numpy as np

from .dataio import load_checkpoint, read_bundle, write_bundle
from .errors import (
    BadMagic,
    ConfigError,
    IoFailure,
    NonFiniteLoss,
    ProtoHeadError,
    TruncatedFile,
    VersionMismatch,
)
from .head import HeadConfig, infer_batch
from .interpret import emit_heatmap, metric_report, score_sheet
from .losses import AlignmentConfig, LossWeights
from .synth import AugmentConfig, SynthConfig, generate_dataset
from .train import TrainConfig, evaluate, fit, params_from_checkpoint

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_NUMERIC = 4

_SECTIONS = {
    "head": HeadConfig,
    "train": TrainConfig,
    "loss": LossWeights,
    "align": AlignmentConfig,
    "synth": SynthConfig,
    "augment": AugmentConfig,
    "metrics": None,  # plain dict: sigma_stab, max_samples, seed, branch
}

_METRIC_KEYS = {"sigma_stab", "max_samples", "seed", "branch"}


def _from_dict(cls, payload: dict):
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(payload) - names
    if unknown:
        raise ConfigError(f"unknown keys for {cls.__name__}: {sorted(unknown)}")
    return cls(**payload)


@dataclasses.dataclass
class RunConfig:
    head: HeadConfig
    train: TrainConfig
    loss: LossWeights
    align: AlignmentConfig
    synth: SynthConfig
    augment: AugmentConfig
    metrics: dict


def load_run_config(path: str | None) -> RunConfig:
    payload = {}
    if path is not None:
        try:
            with open(path) as fh:
                payload = json.load(fh)
        except OSError as exc:
            raise IoFailure(f"cannot read config {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    if not isinstance(payload, dict):
        raise ConfigError("config root must be a JSON object")
    unknown = set(payload) - set(_SECTIONS)
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")
    sections = {}
    for name, cls in _SECTIONS.items():
        body = payload.get(name, {})
        if not isinstance(body, dict):
            raise ConfigError(f"section {name!r} must be an object")
        if cls is None:
            bad = set(body) - _METRIC_KEYS
            if bad:
                raise ConfigError(f"unknown keys for metrics: {sorted(bad)}")
            sections[name] = body
        else:
            sections[name] = _from_dict(cls, body)
    return RunConfig(**sections)


def _load_model(ckpt_path: str):
    ckpt = load_checkpoint(ckpt_path)
    params, cfg = params_from_checkpoint(ckpt)
    return ckpt, params, cfg


def cmd_gen_synth(args) -> int:
    run = load_run_config(args.config)
    cfg = run.synth
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    bundle = generate_dataset(cfg)
    write_bundle(bundle, args.out)
    print(
        f"wrote {bundle.num_samples} samples "
        f"({bundle.num_classes} classes, {bundle.grid_h}x{bundle.grid_w} grid, "
        f"dim {bundle.embed_dim}) to {args.out}"
    )
    return EXIT_OK


def cmd_train(args) -> int:
    run = load_run_config(args.config)
    bundle = read_bundle(args.data)
    head_cfg = dataclasses.replace(
        run.head, embed_dim=bundle.embed_dim, num_classes=bundle.num_classes
    )
    result = fit(
        bundle,
        head_cfg,
        run.train,
        run.loss,
        aug=run.augment,
        align_cfg=run.align,
        out_dir=args.out,
    )
    last = result.log[-1]
    print(
        f"best val acc {result.best_val_acc:.4f} (epoch {result.best_epoch}); "
        f"final local size {last['local_size']:.2f}, "
        f"global size {last['global_size']}"
    )
    print(f"checkpoint and log written to {args.out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    _, params, cfg = _load_model(args.ckpt)
    bundle = read_bundle(args.data)
    acc, local = evaluate(params, cfg, bundle, branch=args.branch)
    print(f"accuracy {acc:.4f} on {bundle.num_samples} samples (local size {local:.2f})")
    return EXIT_OK


def cmd_explain(args) -> int:
    _, params, cfg = _load_model(args.ckpt)
    bundle = read_bundle(args.data)
    os.makedirs(args.out, exist_ok=True)
    count = min(args.samples, bundle.num_samples)
    for row in range(count):
        feats = bundle.embeddings[row, 0].astype(np.float64)
        out = infer_batch(feats[None], params, cfg, args.branch)
        sheet = score_sheet(row, out, 0, bundle.grid_w, top_k=args.top_k)
        with open(os.path.join(args.out, f"sheet_{row:05d}.json"), "w") as fh:
            json.dump(sheet.to_dict(), fh, indent=2)
        for proto in sheet.prototypes:
            n = proto["prototype"]
            emit_heatmap(
                out.a[0, :, n],
                bundle.grid_h,
                bundle.grid_w,
                os.path.join(args.out, f"sheet_{row:05d}_proto_{n:04d}.pgm"),
            )
    print(f"wrote {count} score sheets to {args.out}")
    return EXIT_OK


def cmd_metrics(args) -> int:
    run = load_run_config(args.config)
    _, params, cfg = _load_model(args.ckpt)
    bundle = read_bundle(args.data)
    opts = run.metrics
    report = metric_report(
        params,
        cfg,
        bundle,
        seed=int(opts.get("seed", 0)),
        sigma_stab=float(opts.get("sigma_stab", 0.05)),
        max_samples=int(opts.get("max_samples", 100)),
        branch=opts.get("branch"),
    )
    with open(args.out, "w") as fh:
        json.dump(report, fh, indent=2)
    print(
        f"accuracy {report['accuracy']:.4f}, mX {report['mean_explainability']:.4f}, "
        f"consistency {report['consistency']:.4f}, stability {report['stability']:.4f}"
    )
    print(f"report written to {args.out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="protohead",
        description="prototypical classification head on frozen patch embeddings",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-synth", help="generate a synthetic bundle")
    p.add_argument("--out", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(fn=cmd_gen_synth)

    p = sub.add_parser("train", help="train the head on a bundle")
    p.add_argument("--data", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="report accuracy of a checkpoint")
    p.add_argument("--data", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--branch", default=None, choices=["student", "teacher"])
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("explain", help="write score sheets and heatmaps")
    p.add_argument("--data", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--top-k", type=int, default=4)
    p.add_argument("--samples", type=int, default=16)
    p.add_argument("--out", required=True)
    p.add_argument("--branch", default=None, choices=["student", "teacher"])
    p.set_defaults(fn=cmd_explain)

    p = sub.add_parser("metrics", help="run the interpretability benchmark")
    p.add_argument("--data", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--suite", default="all", choices=["all"])
    p.add_argument("--config", default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_metrics)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except NonFiniteLoss as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (
        IoFailure,
        FileNotFoundError,
        BadMagic,
        VersionMismatch,
        TruncatedFile,
    ) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ProtoHeadError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
