"""Explanations and the interpretability benchmark.

Covers: additive part importance, score sheets with the fraction of the
prediction they explain, compactness (local/global size), part-category
consistency and stability of prototype attributions, and a deletion-based
correctness / completeness / contrastivity suite on annotated bundles.

Deletions never zero out patches; they resample in-distribution background
patches from the bundle so the evaluated inputs stay on-manifold.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from .dataio import EmbeddingBundle
from .errors import InvariantViolation, IoFailure, NoActivePrototypes
from .head import HeadConfig, HeadParams, InferenceOutputs, effective_weights, infer_batch
from .synth import perturb, rng_for

O_THRESHOLD = 0.1


def part_importance(a: np.ndarray, w: np.ndarray, h: np.ndarray) -> np.ndarray:
    """Redistribute each class score over patches.

    PI[i, d] = sum_n A[i, n] * W[d, n] * h[n] / colsum_n, which makes
    sum_i PI[i, d] equal the class score exactly.
    """
    a = np.asarray(a, dtype=np.float64)
    colsum = a.sum(axis=0)
    r = np.maximum(w, 0.0) * h  # importance matrix for every class
    dead = colsum <= 1e-12
    if np.any(dead & (np.abs(r).max(axis=0) > 0)):
        warnings.warn("prototype with empty assignment column contributes 0 to PI")
    a_norm = np.where(dead[None, :], 0.0, a / np.where(dead, 1.0, colsum)[None, :])
    return a_norm @ r.T


def o_vectors(
    a: np.ndarray,
    r_row: np.ndarray,
    part_ids: np.ndarray,
    num_categories: int,
    threshold: float = O_THRESHOLD,
) -> np.ndarray:
    """Binary [N x U] category attribution: entry (n, u-1) is set when the
    importance-weighted assignment of prototype n exceeds the threshold
    somewhere inside category u's mask (strict inequality)."""
    out = np.zeros((a.shape[1], num_categories), dtype=bool)
    for u in range(1, num_categories + 1):
        mask = part_ids == u
        if not np.any(mask):
            continue
        peak = a[mask].max(axis=0) * r_row
        out[:, u - 1] = peak > threshold
    return out


def o_vector(
    a_col: np.ndarray,
    r_value: float,
    part_ids: np.ndarray,
    num_categories: int,
    threshold: float = O_THRESHOLD,
) -> np.ndarray:
    """Single-prototype variant of o_vectors."""
    return o_vectors(
        np.asarray(a_col)[:, None], np.asarray([r_value]), part_ids,
        num_categories, threshold,
    )[0]


@dataclass
class ScoreSheet:
    sample_id: int
    predicted_class: int
    total_score: float
    sec: float
    prototypes: list[dict] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "sample_id": self.sample_id,
            "predicted_class": self.predicted_class,
            "total_score": self.total_score,
            "sec": self.sec,
            "prototypes": self.prototypes,
        }


def score_sheet(
    sample_id: int,
    out: InferenceOutputs,
    row: int,
    grid_w: int,
    top_k: int = 4,
) -> ScoreSheet:
    """Top prototypes for one sample plus the share of the prediction they explain."""
    pred = int(out.predictions[row])
    r = out.r[row, pred]
    order = np.argsort(-r, kind="stable")[:top_k]
    pos = np.maximum(r, 0.0)
    total_pos = float(pos.sum())
    shown_pos = float(pos[order].sum())
    sec = 1.0 if total_pos <= 0 else shown_pos / total_pos
    protos = []
    for n in order:
        col = out.a[row, :, n]
        top_patch = int(np.argmax(col))
        protos.append(
            {
                "prototype": int(n),
                "importance": float(r[n]),
                "presence": float(out.h[row, n]),
                "top_patch": [top_patch // grid_w, top_patch % grid_w],
                "activation": [float(v) for v in col],
            }
        )
    return ScoreSheet(
        sample_id=sample_id,
        predicted_class=pred,
        total_score=float(out.y[row, pred]),
        sec=sec,
        prototypes=protos,
    )


def compactness(
    outputs: InferenceOutputs, cls_w: np.ndarray, theta_use: float = 0.0
):
    """(mean local size, global size): prototypes used per prediction and
    prototype columns with any positive classifier weight."""
    preds = outputs.predictions
    r_pred = outputs.r[np.arange(preds.size), preds]
    local = float((r_pred > theta_use).sum(axis=1).mean()) if preds.size else 0.0
    glob = int((effective_weights(cls_w).max(axis=0) > 0).sum())
    return local, glob


def _chunked_infer(params, cfg, bundle, branch=None, chunk=256):
    outs = []
    for lo in range(0, bundle.num_samples, chunk):
        feats = bundle.embeddings[lo : lo + chunk, 0].astype(np.float64)
        outs.append(infer_batch(feats, params, cfg, branch))
    return InferenceOutputs(
        z=np.concatenate([o.z for o in outs]),
        m=np.concatenate([o.m for o in outs]),
        a=np.concatenate([o.a for o in outs]),
        h=np.concatenate([o.h for o in outs]),
        r=np.concatenate([o.r for o in outs]),
        y=np.concatenate([o.y for o in outs]),
    )


def _active_prototypes(out: InferenceOutputs, row: int, part_ids, num_categories):
    """Prototypes with positive importance toward the prediction and a
    nonzero category attribution; returns (pred, list of (n, r, o))."""
    pred = int(out.predictions[row])
    r_row = out.r[row, pred]
    ovecs = o_vectors(out.a[row], r_row, part_ids, num_categories)
    active = []
    for n in np.flatnonzero(r_row > 0):
        if ovecs[n].any():
            active.append((int(n), float(r_row[n]), ovecs[n]))
    return pred, active


def consistency(
    params: HeadParams, cfg: HeadConfig, bundle: EmbeddingBundle, branch=None
) -> float:
    """Is a prototype attributed to one part category?

    Per class and prototype, every active sample contributes the prototype's
    attributed category set; the score is the share of those attributions
    claimed by the most frequent category, so firing on several categories
    at once counts against consistency just like drifting across samples.
    Prototype scores are averaged weighted by total contribution, then
    equally over classes.
    """
    out = _chunked_infer(params, cfg, bundle, branch)
    u = bundle.num_part_categories
    cat_counts: dict[tuple, np.ndarray] = {}
    weight: dict[tuple, float] = {}
    for row in range(bundle.num_samples):
        pred, active = _active_prototypes(
            out, row, bundle.part_ids[row], u
        )
        for n, r_val, ovec in active:
            key = (pred, n)
            cat_counts.setdefault(key, np.zeros(u))
            cat_counts[key] += ovec
            weight[key] = weight.get(key, 0.0) + r_val
    if not cat_counts:
        raise NoActivePrototypes("no prototype is active on any sample")
    per_class: dict[int, list[tuple[float, float]]] = {}
    for (pred, n), counts in cat_counts.items():
        score = counts.max() / counts.sum()
        per_class.setdefault(pred, []).append((score, weight[(pred, n)]))
    class_scores = []
    for pred, pairs in per_class.items():
        scores = np.asarray([s for s, _ in pairs])
        ws = np.asarray([w for _, w in pairs])
        class_scores.append(float((scores * ws).sum() / ws.sum()))
    return float(np.mean(class_scores))


def stability(
    params: HeadParams,
    cfg: HeadConfig,
    bundle: EmbeddingBundle,
    sigma_stab: float = 0.05,
    seed: int = 0,
    branch=None,
) -> float:
    """Fraction of (sample, active prototype) pairs whose category attribution
    is unchanged under bundle-scaled Gaussian noise. The clean prediction
    stays the explanation target on the perturbed pass."""
    clean = _chunked_infer(params, cfg, bundle, branch)
    noisy_bundle = perturb(bundle, sigma_stab, seed)
    noisy = _chunked_infer(params, cfg, noisy_bundle, branch)
    u = bundle.num_part_categories
    agree = total = 0
    for row in range(bundle.num_samples):
        pred, active = _active_prototypes(clean, row, bundle.part_ids[row], u)
        if not active:
            continue
        r_noisy = noisy.r[row, pred]
        o_noisy = o_vectors(noisy.a[row], r_noisy, bundle.part_ids[row], u)
        for n, _, ovec in active:
            total += 1
            agree += int(np.array_equal(ovec, o_noisy[n]))
    if total == 0:
        raise NoActivePrototypes("no prototype is active on any sample")
    return agree / total


def background_pool(bundle: EmbeddingBundle) -> np.ndarray:
    """All background patch embeddings of the bundle, [n_bg x c_f]."""
    mask = bundle.part_ids == 0
    pool = bundle.embeddings[:, 0][mask]
    if pool.shape[0] == 0:
        # degenerate bundles without background: fall back to every patch
        pool = bundle.embeddings[:, 0].reshape(-1, bundle.embed_dim)
    return pool.astype(np.float64)


def deletion_intervention(
    embeddings: np.ndarray,
    part_ids: np.ndarray,
    category: int,
    pool: np.ndarray,
    rng: np.random.Generator,
):
    """Replace every patch of a category with a fresh background draw.

    Returns (new embeddings, number of replaced patches); a missing category
    is a flagged no-op rather than an error.
    """
    emb = np.array(embeddings, dtype=np.float64)
    idx = np.flatnonzero(part_ids == category)
    if idx.size == 0:
        return emb, 0
    draws = rng.integers(0, pool.shape[0], size=idx.size)
    emb[idx] = pool[draws]
    return emb, idx.size


def _class_category_means(bundle: EmbeddingBundle) -> dict[tuple, np.ndarray]:
    sums: dict[tuple, np.ndarray] = {}
    counts: dict[tuple, int] = {}
    for row in range(bundle.num_samples):
        label = int(bundle.labels[row])
        emb = bundle.embeddings[row, 0].astype(np.float64)
        for u in np.unique(bundle.part_ids[row]):
            if u == 0:
                continue
            mask = bundle.part_ids[row] == u
            key = (label, int(u))
            sums[key] = sums.get(key, 0.0) + emb[mask].sum(axis=0)
            counts[key] = counts.get(key, 0) + int(mask.sum())
    return {k: sums[k] / counts[k] for k in sums}


def _donor_patches(bundle, label: int, category: int) -> np.ndarray | None:
    for row in range(bundle.num_samples):
        if int(bundle.labels[row]) != label:
            continue
        mask = bundle.part_ids[row] == category
        if np.any(mask):
            return bundle.embeddings[row, 0].astype(np.float64)[mask]
    return None


@dataclass
class DeletionScores:
    sd: float
    csdc: float
    pc: float
    dc: float
    distractibility: float
    ts: float
    bi: float

    def mean_explainability(self) -> float:
        return float(
            np.mean(
                [self.csdc, self.pc, self.dc, self.distractibility, self.sd, self.ts, self.bi]
            )
        )


def correctness_completeness_contrastivity(
    params: HeadParams,
    cfg: HeadConfig,
    bundle: EmbeddingBundle,
    seed: int = 0,
    max_samples: int = 100,
    num_chimeras: int = 40,
    branch=None,
) -> DeletionScores:
    """Deletion-based benchmark over an annotated bundle.

    Per sample: rank-correlate per-category importance with the score drop
    under that category's deletion (SD); delete categories in descending
    importance until the prediction flips (CSDC area, DC for the weakest
    category); check that the top category is decisive on minimal-evidence
    variants (PC); measure importance mass on background (distractibility)
    and prediction invariance to background redraws (BI). Chimera samples
    mixing the discriminative parts of two classes probe target sensitivity.
    """
    rng = rng_for(seed, 909)
    pool = background_pool(bundle)
    u_max = bundle.num_part_categories
    w_eff = effective_weights(params.cls_w)

    def single(emb: np.ndarray) -> InferenceOutputs:
        return infer_batch(emb[None], params, cfg, branch)

    take = min(bundle.num_samples, max_samples)
    rows = rng.choice(bundle.num_samples, size=take, replace=False)

    sd_vals, csdc_vals, pc_vals, dc_vals, d_vals, bi_vals = [], [], [], [], [], []
    for row in rows:
        row = int(row)
        emb = bundle.embeddings[row, 0].astype(np.float64)
        ids = bundle.part_ids[row]
        out = single(emb)
        pred = int(out.predictions[0])
        pi = part_importance(out.a[0], params.cls_w, out.h[0])

        present = [int(u) for u in np.unique(ids) if u != 0]
        if len(present) < 2:
            continue
        pi_cat = np.asarray([pi[ids == u, pred].sum() for u in present])

        drops = []
        for u in present:
            mod, _ = deletion_intervention(emb, ids, u, pool, rng)
            drops.append(float(out.y[0, pred] - single(mod).y[0, pred]))
        drops = np.asarray(drops)
        if np.ptp(pi_cat) > 0 and np.ptp(drops) > 0:
            rho = stats.spearmanr(pi_cat, drops).statistic
            sd_vals.append((rho + 1.0) / 2.0)

        # cumulative deletion in descending importance
        order = [present[j] for j in np.argsort(-pi_cat, kind="stable")]
        preserved = []
        mod = emb.copy()
        for u in order:
            mod, _ = deletion_intervention(mod, ids, u, pool, rng)
            preserved.append(int(single(mod).predictions[0] == pred))
        csdc_vals.append(float(np.mean(preserved)))

        # deleting the least important category should not flip
        mod, _ = deletion_intervention(emb, ids, order[-1], pool, rng)
        dc_vals.append(int(single(mod).predictions[0] == pred))

        # minimal evidence: only the top category on background
        minimal = emb.copy()
        for u in order[1:]:
            minimal, _ = deletion_intervention(minimal, ids, u, pool, rng)
        pred_min = int(single(minimal).predictions[0])
        wiped, _ = deletion_intervention(minimal, ids, order[0], pool, rng)
        pc_vals.append(int(single(wiped).predictions[0] != pred_min))

        pos = np.maximum(pi[:, pred], 0.0)
        total_pos = pos.sum()
        bg_mass = pos[ids == 0].sum() / total_pos if total_pos > 0 else 0.0
        d_vals.append(1.0 - bg_mass)

        redraw = emb.copy()
        bg_idx = np.flatnonzero(ids == 0)
        if bg_idx.size:
            redraw[bg_idx] = pool[rng.integers(0, pool.shape[0], size=bg_idx.size)]
        bi_vals.append(int(single(redraw).predictions[0] == pred))

    ts_vals = _target_sensitivity(
        params, cfg, bundle, pool, rng, num_chimeras, branch
    )

    def agg(vals):
        return float(np.mean(vals)) if vals else 0.0

    return DeletionScores(
        sd=agg(sd_vals),
        csdc=agg(csdc_vals),
        pc=agg(pc_vals),
        dc=agg(dc_vals),
        distractibility=agg(d_vals),
        ts=agg(ts_vals),
        bi=agg(bi_vals),
    )


def _target_sensitivity(
    params, cfg, bundle, pool, rng, num_chimeras, branch
) -> list[float]:
    """Chimeras keep half of the categories on which two classes disagree and
    graft donor patches of the other class onto the rest; importance for each
    class should concentrate on its own parts."""
    means = _class_category_means(bundle)
    labels = np.unique(bundle.labels).astype(int)
    if labels.size < 2:
        return []
    vals: list[float] = []
    for _ in range(num_chimeras):
        d1, d2 = rng.choice(labels, size=2, replace=False)
        d1, d2 = int(d1), int(d2)
        differing = [
            u
            for u in range(1, bundle.num_part_categories + 1)
            if (d1, u) in means
            and (d2, u) in means
            and np.linalg.norm(means[(d1, u)] - means[(d2, u)]) > 0.5
        ]
        if len(differing) < 2:
            continue
        keep = differing[: len(differing) // 2]
        graft = differing[len(differing) // 2 :]
        host_rows = np.flatnonzero(bundle.labels == d1)
        row = int(host_rows[rng.integers(0, host_rows.size)])
        emb = bundle.embeddings[row, 0].astype(np.float64)
        ids = bundle.part_ids[row]
        chim = emb.copy()
        ok = True
        for u in graft:
            donor = _donor_patches(bundle, d2, u)
            idx = np.flatnonzero(ids == u)
            if donor is None or idx.size == 0:
                ok = False
                break
            chim[idx] = donor[rng.integers(0, donor.shape[0], size=idx.size)]
        if not ok:
            continue
        out = infer_batch(chim[None], params, cfg, branch)
        pi = part_importance(out.a[0], params.cls_w, out.h[0])
        keep_mask = np.isin(ids, keep)
        graft_mask = np.isin(ids, graft)
        pi1 = np.maximum(pi[:, d1], 0.0)
        pi2 = np.maximum(pi[:, d2], 0.0)
        cond_keep = pi1[keep_mask].sum() > pi2[keep_mask].sum()
        cond_graft = pi2[graft_mask].sum() > pi1[graft_mask].sum()
        vals.append(float(cond_keep and cond_graft))
    return vals


def metric_report(
    params: HeadParams,
    cfg: HeadConfig,
    bundle: EmbeddingBundle,
    seed: int = 0,
    sigma_stab: float = 0.05,
    max_samples: int = 100,
    branch=None,
) -> dict:
    """Full benchmark as a JSON-ready dictionary."""
    out = _chunked_infer(params, cfg, bundle, branch)
    accuracy = float((out.predictions == bundle.labels).mean())
    local, glob = compactness(out, params.cls_w)
    scores = correctness_completeness_contrastivity(
        params, cfg, bundle, seed=seed, max_samples=max_samples, branch=branch
    )
    try:
        cons = consistency(params, cfg, bundle, branch)
    except NoActivePrototypes:
        cons = float("nan")
    try:
        stab = stability(params, cfg, bundle, sigma_stab, seed, branch)
    except NoActivePrototypes:
        stab = float("nan")
    return {
        "accuracy": accuracy,
        "csdc": scores.csdc,
        "pc": scores.pc,
        "dc": scores.dc,
        "distractibility": scores.distractibility,
        "sd": scores.sd,
        "ts": scores.ts,
        "bi": scores.bi,
        "mean_explainability": scores.mean_explainability(),
        "consistency": cons,
        "stability": stab,
        "local_size": local,
        "global_size": glob,
        "config": {
            "head": cfg.__dict__.copy(),
            "sigma_stab": sigma_stab,
            "max_samples": max_samples,
            "seed": seed,
        },
        "notes": [
            "deletion metrics run at patch-embedding level with in-distribution background resampling",
            "mean_explainability is the unweighted mean of csdc, pc, dc, distractibility, sd, ts, bi",
            "consistency weights prototypes by total contribution and classes equally",
        ],
    }


def emit_heatmap(values: np.ndarray, grid_h: int, grid_w: int, path) -> None:
    """Write a min-max normalized grayscale PGM (P5) of a patch-grid field."""
    values = np.asarray(values, dtype=np.float64).reshape(grid_h, grid_w)
    if not np.all(np.isfinite(values)):
        raise InvariantViolation("heatmap values must be finite")
    lo, hi = float(values.min()), float(values.max())
    if hi > lo:
        pixels = np.rint((values - lo) / (hi - lo) * 255.0).astype(np.uint8)
    else:
        pixels = np.full((grid_h, grid_w), 128, dtype=np.uint8)
    header = f"P5\n{grid_w} {grid_h}\n255\n".encode("ascii")
    try:
        with open(path, "wb") as fh:
            fh.write(header)
            fh.write(pixels.tobytes())
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc
