"""Optimization loop: AdamW, warmup + cosine decay, EMA teacher, checkpoints.

Everything is deterministic under the run seed: data shuffling, view
augmentation, and negative-partner draws all derive their streams from it.
"""
from __future__ import annotations

import json
import math
import os
from dataclasses import asdict, dataclass, field

import numpy as np

from . import losses as L
from .dataio import Checkpoint, EmbeddingBundle, save_checkpoint
from .errors import ConfigError, NonFiniteLoss, ShapeMismatch
from .geometry import ViewGeometry
from .head import (
    DECAYED,
    PARAM_NAMES,
    ForwardOutputs,
    HeadConfig,
    HeadParams,
    VarParams,
    forward_train,
    infer_batch,
    init_params,
)
from .synth import AugmentConfig, make_views, rng_for


@dataclass
class TrainConfig:
    batch_size: int = 128
    base_lr: float = 0.01
    weight_decay: float = 0.01
    warmup_epochs: int = 5
    epochs: int = 50
    head_lr_multiplier: float = 10.0
    seed: int = 0
    val_fraction: float = 0.1
    early_stop_val_acc: float | None = None

    def validate(self) -> "TrainConfig":
        if self.batch_size < 2:
            raise ConfigError("batch_size must be >= 2 (inter-sample loss)")
        if self.epochs <= self.warmup_epochs:
            raise ConfigError("epochs must exceed warmup_epochs")
        if self.base_lr <= 0:
            raise ConfigError("base_lr must be > 0")
        if not 0.0 < self.val_fraction < 1.0:
            raise ConfigError("val_fraction must lie in (0, 1)")
        return self


def lr_schedule(step: int, total_steps: int, warmup_steps: int, base_lr: float) -> float:
    """Linear 0 -> base_lr over warmup, then cosine decay to 0."""
    if not 0 <= step <= total_steps:
        raise ConfigError(f"step {step} outside [0, {total_steps}]")
    if warmup_steps > 0 and step < warmup_steps:
        return base_lr * step / warmup_steps
    span = max(total_steps - warmup_steps, 1)
    progress = (step - warmup_steps) / span
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


def adamw_step(
    param: np.ndarray,
    grad: np.ndarray,
    m: np.ndarray,
    v: np.ndarray,
    t: int,
    lr: float,
    wd: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
):
    """One decoupled-weight-decay Adam update; returns (param, m, v)."""
    if param.shape != grad.shape or param.shape != m.shape or param.shape != v.shape:
        raise ShapeMismatch("adamw_step shapes disagree")
    m = beta1 * m + (1.0 - beta1) * grad
    v = beta2 * v + (1.0 - beta2) * grad * grad
    m_hat = m / (1.0 - beta1**t)
    v_hat = v / (1.0 - beta2**t)
    param = param - lr * wd * param - lr * m_hat / (np.sqrt(v_hat) + eps)
    return param, m, v


def ema_update(teacher: np.ndarray, student: np.ndarray, momentum: float) -> np.ndarray:
    if teacher.shape != student.shape:
        raise ShapeMismatch("ema_update shapes disagree")
    return momentum * teacher + (1.0 - momentum) * student


class AdamW:
    """Per-tensor moment state keyed by parameter name."""

    def __init__(self, shapes: dict[str, tuple], wd: float):
        self.m = {k: np.zeros(s) for k, s in shapes.items()}
        self.v = {k: np.zeros(s) for k, s in shapes.items()}
        self.wd = wd
        self.t = 0

    def step(self, params: dict[str, np.ndarray], grads, lr_map: dict[str, float]):
        self.t += 1
        for name, p in params.items():
            g = grads[name]
            wd = self.wd if name in DECAYED else 0.0
            params[name], self.m[name], self.v[name] = adamw_step(
                p, g, self.m[name], self.v[name], self.t, lr_map[name], wd
            )
        return params


def split_train_val(
    labels: np.ndarray, val_fraction: float, seed: int
) -> tuple[np.ndarray, np.ndarray]:
    """Stratified split; at least one validation sample per class."""
    train_idx, val_idx = [], []
    rng = rng_for(seed, 808)
    for cls in np.unique(labels):
        idx = np.flatnonzero(labels == cls)
        idx = idx[rng.permutation(idx.size)]
        n_val = max(1, int(round(idx.size * val_fraction)))
        val_idx.extend(idx[:n_val])
        train_idx.extend(idx[n_val:])
    return np.sort(np.asarray(train_idx)), np.sort(np.asarray(val_idx))


def sample_views(
    bundle: EmbeddingBundle, idx: int, aug: AugmentConfig, seed_keys
):
    """Two training views for one sample: stored if V >= 2, else synthesized."""
    if bundle.num_views >= 2:
        ga = ViewGeometry(tuple(bundle.rects[idx, 0]), bundle.grid_h, bundle.grid_w)
        gb = ViewGeometry(tuple(bundle.rects[idx, 1]), bundle.grid_h, bundle.grid_w)
        return (
            bundle.embeddings[idx, 0].astype(np.float64),
            bundle.embeddings[idx, 1].astype(np.float64),
            ga,
            gb,
        )
    grid = bundle.embeddings[idx, 0].astype(np.float64)
    return make_views(grid, aug, seed_keys, bundle.grid_h, bundle.grid_w)


def batch_objective(
    bundle: EmbeddingBundle,
    batch_idx: np.ndarray,
    vp: VarParams,
    cfg: HeadConfig,
    weights: L.LossWeights,
    align_cfg: L.AlignmentConfig,
    aug: AugmentConfig,
    seed: int,
    epoch: int,
    batch_no: int,
):
    """Build the weighted batch loss graph. Returns (total Var, report, correct)."""
    views_a, views_b, geoms_a, geoms_b = [], [], [], []
    for idx in batch_idx:
        f_a, f_b, ga, gb = sample_views(
            bundle, int(idx), aug, (seed, 606, epoch, int(idx))
        )
        views_a.append(f_a)
        views_b.append(f_b)
        geoms_a.append(ga)
        geoms_b.append(gb)
    f_a = np.stack(views_a)
    f_b = np.stack(views_b)
    fwd: ForwardOutputs = forward_train(f_a, f_b, geoms_a, geoms_b, vp, cfg)
    labels = bundle.labels[batch_idx].astype(np.int64)

    terms = {
        "assign": L.assignment_loss(
            fwd.a_s_aligned, fwd.a_t_aligned, weights.eps_log
        ),
        "align": L.alignment_loss(
            f_b,
            fwd.a_t,
            align_cfg,
            weights.num_negatives,
            rng_for(seed, 505, epoch, batch_no),
        ),
        "contrast": L.contrastive_loss(
            fwd.s_s, fwd.q_t, fwd.dom_s, fwd.dom_t, cfg.temperature
        ),
        "sparsity": L.sparsity_loss(
            fwd.r_s, weights.hoyer_alpha, weights.hoyer_gamma
        ),
        "classify": L.classification_loss(
            fwd.y_s, fwd.y_t, labels, cfg.num_classes
        ),
    }
    total, report = L.total_loss(terms, weights)
    correct = int((np.argmax(fwd.y_s.value, axis=1) == labels).sum())
    return total, report, correct


def evaluate(
    params: HeadParams,
    cfg: HeadConfig,
    bundle: EmbeddingBundle,
    indices: np.ndarray | None = None,
    branch: str | None = None,
    chunk: int = 256,
):
    """Accuracy and mean local size on the canonical (first) view."""
    if indices is None:
        indices = np.arange(bundle.num_samples)
    correct = 0
    local_sizes = []
    for lo in range(0, indices.size, chunk):
        sel = indices[lo : lo + chunk]
        out = infer_batch(
            bundle.embeddings[sel, 0].astype(np.float64), params, cfg, branch
        )
        preds = out.predictions
        correct += int((preds == bundle.labels[sel]).sum())
        r_pred = out.r[np.arange(sel.size), preds]
        local_sizes.append((r_pred > 0).sum(axis=1))
    accuracy = correct / max(indices.size, 1)
    local_size = float(np.concatenate(local_sizes).mean()) if local_sizes else 0.0
    return accuracy, local_size


def global_size(params: HeadParams) -> int:
    return int((np.maximum(params.cls_w, 0.0).max(axis=0) > 0).sum())


@dataclass
class FitResult:
    params: HeadParams
    best_params: HeadParams
    log: list[dict] = field(default_factory=list)
    best_val_acc: float = 0.0
    best_epoch: int = -1


def make_checkpoint(
    params: HeadParams,
    opt: AdamW | None,
    head_cfg: HeadConfig,
    train_cfg: TrainConfig,
    weights: L.LossWeights,
    epoch: int,
    extra: dict | None = None,
) -> Checkpoint:
    arrays = {name: getattr(params, name) for name in PARAM_NAMES}
    arrays["proto_t"] = params.proto_t
    if opt is not None:
        for name in PARAM_NAMES:
            arrays[f"adam_m.{name}"] = opt.m[name]
            arrays[f"adam_v.{name}"] = opt.v[name]
    return Checkpoint(
        config={
            "head": asdict(head_cfg),
            "train": asdict(train_cfg),
            "loss": asdict(weights),
        },
        arrays=arrays,
        epoch=epoch,
        step=opt.t if opt is not None else 0,
        seed=train_cfg.seed,
        extra=extra or {},
    )


def params_from_checkpoint(ckpt: Checkpoint) -> tuple[HeadParams, HeadConfig]:
    cfg = HeadConfig(**ckpt.config["head"])
    fields = {
        name: ckpt.arrays[name].astype(np.float64)
        for name in PARAM_NAMES + ("proto_t",)
    }
    return HeadParams(**fields), cfg


def fit(
    bundle: EmbeddingBundle,
    head_cfg: HeadConfig,
    train_cfg: TrainConfig,
    weights: L.LossWeights,
    aug: AugmentConfig | None = None,
    align_cfg: L.AlignmentConfig | None = None,
    out_dir: str | None = None,
) -> FitResult:
    """Train the head on a bundle; saves the best-by-validation checkpoint."""
    head_cfg.validate(bundle.patches)
    train_cfg.validate()
    weights.validate()
    if head_cfg.embed_dim != bundle.embed_dim:
        raise ConfigError(
            f"head embed_dim {head_cfg.embed_dim} != bundle {bundle.embed_dim}"
        )
    if head_cfg.num_classes != bundle.num_classes:
        raise ConfigError("head num_classes disagrees with bundle")
    aug = aug or AugmentConfig()
    align_cfg = align_cfg or L.AlignmentConfig()
    seed = train_cfg.seed

    train_idx, val_idx = split_train_val(
        bundle.labels, train_cfg.val_fraction, seed
    )
    params = init_params(head_cfg, seed)
    opt = AdamW({n: getattr(params, n).shape for n in PARAM_NAMES}, train_cfg.weight_decay)

    batches_per_epoch = max(train_idx.size // train_cfg.batch_size, 1)
    total_steps = train_cfg.epochs * batches_per_epoch
    warmup_steps = train_cfg.warmup_epochs * batches_per_epoch

    log_fh = None
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        log_fh = open(os.path.join(out_dir, "train_log.jsonl"), "w")

    result = FitResult(params=params, best_params=params.copy())
    step = 0
    try:
        for epoch in range(train_cfg.epochs):
            order = rng_for(seed, 707, epoch).permutation(train_idx.size)
            epoch_terms = {name: 0.0 for name in L.TERM_NAMES}
            epoch_total = 0.0
            seen = correct = 0
            lr = 0.0
            for batch_no in range(batches_per_epoch):
                sel = order[
                    batch_no * train_cfg.batch_size : (batch_no + 1)
                    * train_cfg.batch_size
                ]
                if sel.size < 2:
                    continue
                batch_idx = train_idx[sel]
                vp = VarParams.wrap(params)
                total, report, batch_correct = batch_objective(
                    bundle,
                    batch_idx,
                    vp,
                    head_cfg,
                    weights,
                    align_cfg,
                    aug,
                    seed,
                    epoch,
                    batch_no,
                )
                if not np.isfinite(report.total):
                    raise NonFiniteLoss(f"total loss {report.total} at step {step}")
                total.backward()
                grads = {}
                for name, leaf in vp.leaves().items():
                    grads[name] = (
                        leaf.grad if leaf.grad is not None else np.zeros_like(leaf.value)
                    )
                    if not np.all(np.isfinite(grads[name])):
                        raise NonFiniteLoss(f"non-finite gradient for {name}")
                lr = lr_schedule(step + 1, total_steps, warmup_steps, train_cfg.base_lr)
                lr_map = {
                    name: lr * (train_cfg.head_lr_multiplier if name == "cls_w" else 1.0)
                    for name in PARAM_NAMES
                }
                new_vals = opt.step(
                    {n: getattr(params, n) for n in PARAM_NAMES}, grads, lr_map
                )
                for name, val in new_vals.items():
                    setattr(params, name, val)
                params.proto_t = ema_update(
                    params.proto_t, params.proto_s, head_cfg.teacher_momentum
                )
                step += 1
                for name in L.TERM_NAMES:
                    epoch_terms[name] += report.terms[name]
                epoch_total += report.total
                seen += sel.size
                correct += batch_correct

            val_acc, val_local = evaluate(params, head_cfg, bundle, val_idx)
            entry = {
                "epoch": epoch,
                "lr": lr,
                "loss_total": epoch_total / batches_per_epoch,
                **{
                    f"loss_{n}": epoch_terms[n] / batches_per_epoch
                    for n in L.TERM_NAMES
                },
                "train_acc": correct / max(seen, 1),
                "val_acc": val_acc,
                "local_size": val_local,
                "global_size": global_size(params),
            }
            result.log.append(entry)
            if log_fh is not None:
                log_fh.write(json.dumps(entry) + "\n")
                log_fh.flush()
            if val_acc >= result.best_val_acc:
                result.best_val_acc = val_acc
                result.best_epoch = epoch
                result.best_params = params.copy()
            if (
                train_cfg.early_stop_val_acc is not None
                and val_acc >= train_cfg.early_stop_val_acc
            ):
                break
    except NonFiniteLoss:
        if out_dir is not None:
            save_checkpoint(
                make_checkpoint(
                    result.best_params, opt, head_cfg, train_cfg, weights,
                    result.best_epoch, {"aborted": True},
                ),
                os.path.join(out_dir, "checkpoint.phc"),
            )
        raise
    finally:
        if log_fh is not None:
            log_fh.close()

    result.params = params
    if out_dir is not None:
        save_checkpoint(
            make_checkpoint(
                result.best_params,
                opt,
                head_cfg,
                train_cfg,
                weights,
                result.best_epoch,
                {"best_val_acc": result.best_val_acc},
            ),
            os.path.join(out_dir, "checkpoint.phc"),
        )
    return result
