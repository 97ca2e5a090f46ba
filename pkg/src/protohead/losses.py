"""The five training objectives and their weighted total.

All terms are built on the autodiff graph so one backward pass per batch
yields every parameter gradient. Each loss accepts a single sample (2-D
tensors) or a stacked batch (leading sample axis); batched calls return the
batch mean. Scalar values are exposed through a LossReport for logging.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .errors import (
    BatchTooSmall,
    ConfigError,
    LabelOutOfRange,
    NonFiniteTerm,
    ShapeMismatch,
)

TERM_NAMES = ("assign", "align", "contrast", "sparsity", "classify")


@dataclass
class LossWeights:
    lambda_assign: float = 2.0
    lambda_align: float = 5.0
    lambda_contrast: float = 1.0
    lambda_sparsity: float = 0.1
    lambda_classify: float = 2.0
    hoyer_alpha: float = 0.1
    hoyer_gamma: float = 0.1
    num_negatives: int = 1
    eps_log: float = 1e-8

    def validate(self) -> "LossWeights":
        lams = self.as_tuple()
        if any(l < 0 for l in lams):
            raise ConfigError("loss weights must be >= 0")
        if all(l == 0 for l in lams):
            raise ConfigError("at least one loss weight must be positive")
        if self.num_negatives < 1:
            raise ConfigError("num_negatives must be >= 1")
        return self

    def as_tuple(self):
        return (
            self.lambda_assign,
            self.lambda_align,
            self.lambda_contrast,
            self.lambda_sparsity,
            self.lambda_classify,
        )


@dataclass
class AlignmentConfig:
    k_shift: float = 0.1
    v_shift: float = 3.0


@dataclass
class LossReport:
    terms: dict[str, float] = field(default_factory=dict)
    total: float = 0.0


def assignment_loss(a_s: ad.Var, a_t: ad.Var, eps_log: float = 1e-8) -> ad.Var:
    """Cross-view agreement of aligned assignments:
    -mean_g log(max(eps, sum_n s[g, n] * t[g, n]))."""
    a_s, a_t = ad.as_var(a_s), ad.as_var(a_t)
    if a_s.value.shape != a_t.value.shape:
        raise ShapeMismatch(
            f"aligned assignments disagree: {a_s.value.shape} vs {a_t.value.shape}"
        )
    agree = ad.vsum(ad.mul(a_s, a_t), axis=-1)
    return -ad.vmean(ad.log(ad.clamp_min(agree, eps_log)))


def correlation_matrix(x) -> ad.Var:
    """Intra-sample cosine correlation of the rows of x."""
    x = ad.as_var(x)
    return ad.cosine_rows(x, x)


def adaptive_shift(corr_f, corr_a, cfg: AlignmentConfig, mode: str) -> ad.Var:
    """Shift applied to the feature correlation before distillation.

    intra: |mean(F) - mean(A) - k_shift|
    inter: (mean(F) + mean(A) - k_shift) * v_shift
    """
    corr_f, corr_a = ad.as_var(corr_f), ad.as_var(corr_a)
    if corr_f.value.shape != corr_a.value.shape:
        raise ShapeMismatch("correlation matrices must share a shape")
    mf, ma = ad.vmean(corr_f), ad.vmean(corr_a)
    if mode == "intra":
        return ad.absolute(ad.sub(ad.sub(mf, ma), cfg.k_shift))
    if mode == "inter":
        return ad.mul(ad.sub(ad.add(mf, ma), cfg.k_shift), cfg.v_shift)
    raise ConfigError(f"unknown shift mode {mode!r}")


def corr_distill(corr_f, corr_a, b) -> ad.Var:
    """-mean((F - b) * A): reward assignment correlation where features
    correlate above the shift, penalize it below."""
    corr_f, corr_a = ad.as_var(corr_f), ad.as_var(corr_a)
    return -ad.vmean(ad.mul(ad.sub(corr_f, b), corr_a))


def alignment_pair(corr_f, corr_a, cfg: AlignmentConfig, mode: str) -> ad.Var:
    return corr_distill(corr_f, corr_a, adaptive_shift(corr_f, corr_a, cfg, mode))


def draw_partners(
    batch: int, num_negatives: int, rng: np.random.Generator
) -> np.ndarray:
    """[m, S] partner indices: uniform, excluding self, distinct per sample."""
    if batch < 2:
        raise BatchTooSmall("inter-sample loss needs a batch of >= 2 samples")
    take = min(num_negatives, batch - 1)
    out = np.zeros((take, batch), dtype=np.intp)
    for i in range(batch):
        picks = rng.choice(batch - 1, size=take, replace=False)
        picks[picks >= i] += 1
        out[:, i] = picks
    return out


def alignment_loss_direct(
    feats: np.ndarray,
    a_t: ad.Var,
    cfg: AlignmentConfig,
    num_negatives: int,
    rng: np.random.Generator,
) -> ad.Var:
    """Reference form of the correspondence distillation loss.

    Materializes the [I x I] correlation matrices; kept as the oracle the
    optimized form is checked against.
    """
    feats = np.asarray(feats, dtype=np.float64)
    a_t = ad.as_var(a_t)
    s = feats.shape[0]
    norm_f = feats / np.linalg.norm(feats, axis=-1, keepdims=True)
    fhat = np.matmul(norm_f, norm_f.swapaxes(-1, -2))  # [S, I, I]
    norm_a = ad.l2_normalize_rows(a_t)
    ahat = ad.bmm(norm_a, ad.swap_last(norm_a))  # [S, I, I]

    def mean23(x):
        return ad.vmean(x, axis=(1, 2))

    k, v = cfg.k_shift, cfg.v_shift
    fhat_c = ad.constant(fhat)
    b_intra = ad.absolute(
        ad.sub(ad.sub(ad.vmean(fhat_c, axis=(1, 2)), mean23(ahat)), k)
    )
    intra = -mean23(ad.mul(ad.sub(fhat_c, ad.reshape(b_intra, (s, 1, 1))), ahat))

    partners = draw_partners(s, num_negatives, rng)
    inter_terms = []
    for row in partners:
        cross_f = np.matmul(norm_f, norm_f[row].swapaxes(-1, -2))
        cross_a = ad.bmm(norm_a, ad.swap_last(ad.take_rows(norm_a, row)))
        cf_c = ad.constant(cross_f)
        b = ad.mul(
            ad.sub(ad.add(ad.vmean(cf_c, axis=(1, 2)), mean23(cross_a)), k), v
        )
        inter_terms.append(
            -mean23(ad.mul(ad.sub(cf_c, ad.reshape(b, (s, 1, 1))), cross_a))
        )
    inter = inter_terms[0]
    for t in inter_terms[1:]:
        inter = ad.add(inter, t)
    per_sample = ad.add(intra, ad.mul(inter, 1.0 / len(inter_terms)))
    return ad.vmean(per_sample)


def alignment_loss(
    feats: np.ndarray,
    a_t: ad.Var,
    cfg: AlignmentConfig,
    num_negatives: int,
    rng: np.random.Generator,
) -> ad.Var:
    """Correspondence distillation over a stacked batch.

    feats [S, I, c_f] holds the (constant) backbone features of the teacher
    view; a_t the matching teacher assignments [S, I, N]. Each sample
    contributes an intra term plus the mean of `num_negatives` cross-sample
    terms with partners drawn uniformly, excluding self. Both shifts adapt
    to the correlations they compare.

    Uses the trace identity mean(FF' . AA') = |F'A|_F^2 / I^2 so the [I x I]
    correlation matrices are never materialized; agrees with
    alignment_loss_direct to floating-point accuracy.
    """
    feats = np.asarray(feats, dtype=np.float64)
    a_t = ad.as_var(a_t)
    s, i, _ = feats.shape
    inv_ii = 1.0 / (i * i)
    k, v = cfg.k_shift, cfg.v_shift

    norm_f = feats / np.linalg.norm(feats, axis=-1, keepdims=True)
    colsum_f = norm_f.sum(axis=1)  # [S, c_f]
    mean_fhat = (colsum_f**2).sum(axis=1) * inv_ii  # [S]

    norm_a = ad.l2_normalize_rows(a_t)
    proj = ad.bmm(ad.constant(norm_f.swapaxes(-1, -2)), norm_a)  # [S, c_f, N]
    colsum_a = ad.vsum(norm_a, axis=1)  # [S, N]
    mean_ahat = ad.mul(ad.vsum(ad.mul(colsum_a, colsum_a), axis=1), inv_ii)
    mean_cross_fa = ad.mul(ad.vsum(ad.mul(proj, proj), axis=(1, 2)), inv_ii)

    b_intra = ad.absolute(ad.sub(ad.sub(ad.constant(mean_fhat), mean_ahat), k))
    intra = -ad.sub(mean_cross_fa, ad.mul(b_intra, mean_ahat))

    partners = draw_partners(s, num_negatives, rng)
    inter_terms = []
    for row in partners:
        mean_fcheck = (colsum_f * colsum_f[row]).sum(axis=1) * inv_ii  # [S]
        proj_j = ad.take_rows(proj, row)
        cs_j = ad.take_rows(colsum_a, row)
        mean_a_cross = ad.mul(ad.vsum(ad.mul(colsum_a, cs_j), axis=1), inv_ii)
        mean_fa_cross = ad.mul(ad.vsum(ad.mul(proj, proj_j), axis=(1, 2)), inv_ii)
        b = ad.mul(
            ad.sub(ad.add(ad.constant(mean_fcheck), mean_a_cross), k), v
        )
        inter_terms.append(-ad.sub(mean_fa_cross, ad.mul(b, mean_a_cross)))
    inter = inter_terms[0]
    for t in inter_terms[1:]:
        inter = ad.add(inter, t)
    per_sample = ad.add(intra, ad.mul(inter, 1.0 / len(inter_terms)))
    return ad.vmean(per_sample)


def contrastive_loss(
    s_s: ad.Var,
    q_t: ad.Var,
    dom_s: np.ndarray,
    dom_t: np.ndarray,
    tau: float,
) -> ad.Var:
    """Slot-level InfoNCE across views, batch mean over samples.

    A prototype enters as an anchor only when dominant in both views; the
    denominator runs over every teacher-dominant prototype. Slots are
    l2-normalized before the dot products. Samples with no valid prototype
    contribute 0.
    """
    s_s, q_t = ad.as_var(s_s), ad.as_var(q_t)
    if s_s.value.ndim == 2:
        s_s = ad.reshape(s_s, (1, *s_s.value.shape))
        q_t = ad.reshape(q_t, (1, *q_t.value.shape))
        dom_s, dom_t = np.asarray(dom_s)[None], np.asarray(dom_t)[None]
    s, n, cz = s_s.value.shape
    s_flat = ad.reshape(s_s, (s * n, cz))
    q_flat = ad.reshape(q_t, (s * n, cz))
    terms = []
    for b in range(s):
        valid = np.flatnonzero((dom_s[b] > 0) & (dom_t[b] > 0))
        cand = np.flatnonzero(dom_t[b] > 0)
        if valid.size == 0:
            terms.append(ad.constant(0.0))
            continue
        pos_col = np.searchsorted(cand, valid)  # valid is a subset of cand
        s_rows = ad.l2_normalize_rows(ad.take_rows(s_flat, b * n + valid))
        q_rows = ad.l2_normalize_rows(ad.take_rows(q_flat, b * n + cand))
        logits = ad.mul(ad.matmul(s_rows, ad.transpose(q_rows)), 1.0 / tau)
        lse = ad.logsumexp_rows(logits)
        pos = ad.vsum(
            ad.mul(logits, ad.constant(_one_hot(pos_col, cand.size))), axis=1
        )
        terms.append(ad.vmean(ad.sub(lse, pos)))
    total = terms[0]
    for t in terms[1:]:
        total = ad.add(total, t)
    return ad.mul(total, 1.0 / s)


def _one_hot(cols: np.ndarray, width: int) -> np.ndarray:
    out = np.zeros((cols.size, width))
    out[np.arange(cols.size), cols] = 1.0
    return out


def sparsity_loss(r: ad.Var, alpha: float, gamma: float) -> ad.Var:
    """Hoyer-Square on the importance matrix:
    alpha * |R|_1^2 / |R|_2^2 + gamma * |R|_2, batch mean; 0 on a zero matrix."""
    r = ad.as_var(r)
    single = r.value.ndim == 2
    if single:
        r = ad.reshape(r, (1, *r.value.shape))
    l1 = ad.vsum(ad.absolute(r), axis=(1, 2))
    l2sq = ad.vsum(ad.mul(r, r), axis=(1, 2))
    live = (l2sq.value >= 1e-24).astype(np.float64)  # |R|_2 >= 1e-12 guard
    l2sq = ad.clamp_min(l2sq, 1e-24)
    hs = ad.div(ad.mul(l1, l1), l2sq)
    per_sample = ad.mul(
        ad.add(ad.mul(hs, alpha), ad.mul(ad.sqrt(l2sq), gamma)), ad.constant(live)
    )
    return ad.vmean(per_sample)


def classification_loss(y_s: ad.Var, y_t: ad.Var, labels, num_classes: int) -> ad.Var:
    """Softmax cross-entropy on both branches' scores, averaged over branches
    and over the batch."""
    y_s, y_t = ad.as_var(y_s), ad.as_var(y_t)
    single = y_s.value.ndim == 1
    if single:
        y_s = ad.reshape(y_s, (1, -1))
        y_t = ad.reshape(y_t, (1, -1))
    labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    if np.any(labels < 0) or np.any(labels >= num_classes):
        raise LabelOutOfRange(f"labels outside [0, {num_classes})")
    onehot = np.zeros((labels.size, num_classes))
    onehot[np.arange(labels.size), labels] = 1.0
    ce_s = ad.sub(ad.logsumexp_rows(y_s), ad.vsum(ad.mul(y_s, onehot), axis=1))
    ce_t = ad.sub(ad.logsumexp_rows(y_t), ad.vsum(ad.mul(y_t, onehot), axis=1))
    return ad.vmean(ad.mul(ad.add(ce_s, ce_t), 0.5))


def total_loss(terms: dict[str, ad.Var], weights: LossWeights):
    """Weighted sum of the five terms; returns (Var total, LossReport)."""
    lams = dict(zip(TERM_NAMES, weights.as_tuple()))
    report = LossReport()
    total = ad.constant(0.0)
    for name in TERM_NAMES:
        term = terms[name]
        val = float(term.value)
        if not np.isfinite(val):
            raise NonFiniteTerm(f"loss term {name} is {val}")
        report.terms[name] = val
        if lams[name] != 0.0:  # zero-weight terms stay out of the graph
            total = ad.add(total, ad.mul(term, lams[name]))
    report.total = float(total.value)
    return total, report
