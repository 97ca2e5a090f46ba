"""Prototypical head: projector, prototype banks, masks, assignments,
presence aggregation, positive-weight classifier, slots, and slot projection.

Two entry points:
  * forward_train: builds the differentiable two-view graph used by the losses.
  * infer / infer_batch: plain-numpy single-view evaluation.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import numerics
from .errors import ConfigError, ShapeMismatch
from .geometry import ViewGeometry, bilinear_weights, overlap_region
from .synth import rng_for


@dataclass
class HeadConfig:
    embed_dim: int = 64
    proj_dim: int = 128
    num_prototypes: int = 64
    num_classes: int = 10
    temperature: float = 0.1
    top_k: int = 5
    teacher_momentum: float = 0.995
    inference_branch: str = "student"
    align_grid: int = 7

    def validate(self, patches: int | None = None) -> "HeadConfig":
        if self.temperature <= 0:
            raise ConfigError("temperature must be > 0")
        if not 0.0 <= self.teacher_momentum <= 1.0:
            raise ConfigError("teacher_momentum must lie in [0, 1]")
        if self.inference_branch not in ("student", "teacher"):
            raise ConfigError("inference_branch must be 'student' or 'teacher'")
        if self.top_k < 1 or (patches is not None and self.top_k > patches):
            raise ConfigError(f"top_k={self.top_k} outside [1, {patches}]")
        if min(self.embed_dim, self.proj_dim, self.num_prototypes) < 1:
            raise ConfigError("dims must be >= 1")
        if self.num_classes < 2:
            raise ConfigError("need at least 2 classes")
        if self.align_grid < 1:
            raise ConfigError("align_grid must be >= 1")
        return self


# trainable tensors, in optimizer order; the teacher bank is EMA-only
PARAM_NAMES = (
    "proj_w",
    "proj_b",
    "proto_s",
    "cls_w",
    "q1_w",
    "q1_b",
    "q2_w",
    "q2_b",
)
DECAYED = ("proj_w", "proj_b", "cls_w", "q1_w", "q1_b", "q2_w", "q2_b")


@dataclass
class HeadParams:
    proj_w: np.ndarray  # [c_z x c_f]
    proj_b: np.ndarray  # [c_z]
    proto_s: np.ndarray  # [N x c_z]
    proto_t: np.ndarray  # [N x c_z]
    cls_w: np.ndarray  # [D x N], rectified on use
    q1_w: np.ndarray
    q1_b: np.ndarray
    q2_w: np.ndarray
    q2_b: np.ndarray

    def trainable(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in PARAM_NAMES}

    def copy(self) -> "HeadParams":
        return HeadParams(**{k: v.copy() for k, v in self.__dict__.items()})


def init_params(cfg: HeadConfig, seed: int) -> HeadParams:
    rng = rng_for(seed, 11)
    cf, cz, n, d = cfg.embed_dim, cfg.proj_dim, cfg.num_prototypes, cfg.num_classes
    proto = rng.normal(size=(n, cz))
    proto /= np.linalg.norm(proto, axis=1, keepdims=True)
    return HeadParams(
        proj_w=rng.normal(scale=1.0 / np.sqrt(cf), size=(cz, cf)),
        proj_b=np.zeros(cz),
        proto_s=proto,
        proto_t=proto.copy(),
        # start well inside the rectifier's live region: the Hoyer penalty
        # scales like 1/|R|, so a small init gets pruned before the presence
        # values carry any class signal
        cls_w=rng.uniform(0.5, 1.5, size=(d, n)),
        q1_w=rng.normal(scale=1.0 / np.sqrt(cz), size=(cz, cz)),
        q1_b=np.zeros(cz),
        q2_w=rng.normal(scale=1.0 / np.sqrt(cz), size=(cz, cz)),
        q2_b=np.zeros(cz),
    )


def project(f: np.ndarray, proj_w: np.ndarray, proj_b: np.ndarray) -> np.ndarray:
    """Affine map of each patch feature into the prototype space."""
    f = np.asarray(f, dtype=np.float64)
    if f.shape[-1] != proj_w.shape[1]:
        raise ShapeMismatch(f"feature dim {f.shape[-1]} vs weight {proj_w.shape}")
    return f @ proj_w.T + proj_b


def aggregate_presence(m: np.ndarray, k: int) -> np.ndarray:
    """Presence h_n: top-k mean of each prototype's mask column."""
    return numerics.topk_mean_columns(m, k)


def effective_weights(cls_w: np.ndarray) -> np.ndarray:
    return np.maximum(cls_w, 0.0)


def classify(h: np.ndarray, cls_w: np.ndarray):
    """Importance matrix R[d, n] = relu(W)[d, n] * h[n] and scores y = R.sum(1)."""
    r = effective_weights(cls_w) * h
    return r, r.sum(axis=-1)


def compute_slots(a: np.ndarray, z: np.ndarray) -> np.ndarray:
    """Assignment-weighted average of projections; zero slot if a column is empty."""
    colsum = a.sum(axis=0)
    safe = np.maximum(colsum, 1e-12)
    return (a.T @ z) / safe[:, None]


def dominance(a: np.ndarray) -> np.ndarray:
    """indicator[n] = 1 iff some patch's argmax assignment is prototype n."""
    winners = np.argmax(a, axis=-1)  # first index wins ties
    out = np.zeros(a.shape[-1], dtype=np.int64)
    out[np.unique(winners)] = 1
    return out


@dataclass
class ForwardOutputs:
    """Differentiable two-view forward pass over a stacked batch.

    Tensors are autodiff Vars with a leading sample axis: z [S, I, c_z],
    masks and assignments [S, I, N], aligned assignments [S, G^2, N],
    presence [S, N], importance [S, D, N], scores [S, D], slots and slot
    projections [S, N, c_z]. Dominance indicators are plain arrays [S, N].
    """

    z_s: ad.Var
    z_t: ad.Var
    m_s: ad.Var
    m_t: ad.Var
    a_s: ad.Var
    a_t: ad.Var
    a_s_aligned: ad.Var
    a_t_aligned: ad.Var
    h_s: ad.Var
    h_t: ad.Var
    r_s: ad.Var
    r_t: ad.Var
    y_s: ad.Var
    y_t: ad.Var
    s_s: ad.Var
    s_t: ad.Var
    q_t: ad.Var
    dom_s: np.ndarray
    dom_t: np.ndarray


@dataclass
class VarParams:
    """Autodiff leaves for one optimization step, shared across the batch."""

    proj_w: ad.Var
    proj_b: ad.Var
    proto_s: ad.Var
    cls_w: ad.Var
    q1_w: ad.Var
    q1_b: ad.Var
    q2_w: ad.Var
    q2_b: ad.Var
    proto_t: ad.Var  # constant: EMA-updated, never optimized

    @staticmethod
    def wrap(params: HeadParams) -> "VarParams":
        leaves = {name: ad.Var.param(getattr(params, name)) for name in PARAM_NAMES}
        return VarParams(proto_t=ad.constant(params.proto_t), **leaves)

    def leaves(self) -> dict[str, ad.Var]:
        return {name: getattr(self, name) for name in PARAM_NAMES}


def _flat_project(f: np.ndarray, vp: VarParams) -> ad.Var:
    """[S*I, c_f] constant features -> [S*I, c_z] projections."""
    return ad.add(ad.matmul(ad.constant(f), ad.transpose(vp.proj_w)), vp.proj_b)


def _ad_mlp(x: ad.Var, vp: VarParams) -> ad.Var:
    hidden = ad.relu(ad.add(ad.matmul(x, ad.transpose(vp.q1_w)), vp.q1_b))
    return ad.add(ad.matmul(hidden, ad.transpose(vp.q2_w)), vp.q2_b)


def _ad_slots(a: ad.Var, z: ad.Var) -> ad.Var:
    """[S, I, N] assignments x [S, I, c_z] projections -> [S, N, c_z] slots."""
    s, _, n = a.value.shape
    num = ad.bmm(ad.swap_last(a), z)
    colsum = ad.clamp_min(ad.vsum(a, axis=1), 1e-12)
    return ad.div(num, ad.reshape(colsum, (s, n, 1)))


def dominance_batch(a: np.ndarray) -> np.ndarray:
    """[S, I, N] -> [S, N] indicator of prototypes winning some patch."""
    winners = np.argmax(a, axis=-1)
    out = np.zeros((a.shape[0], a.shape[-1]), dtype=np.int64)
    rows = np.repeat(np.arange(a.shape[0]), a.shape[1])
    out[rows, winners.ravel()] = 1
    return out


def forward_train(
    f_a: np.ndarray,
    f_b: np.ndarray,
    geoms_a,
    geoms_b,
    vp: VarParams,
    cfg: HeadConfig,
) -> ForwardOutputs:
    """Two-view training pass over a stacked batch [S, I, c_f].

    Also accepts a single sample ([I, c_f] plus one geometry per view).
    Stop-gradients mirror the mask definitions: the student mask sees a
    detached projection (gradient reaches the student prototypes only) and
    the teacher mask sees detached teacher prototypes (gradient reaches the
    projector only).
    """
    f_a = numerics.require_finite("f_a", np.asarray(f_a, dtype=np.float64))
    f_b = numerics.require_finite("f_b", np.asarray(f_b, dtype=np.float64))
    if f_a.ndim == 2:
        f_a, f_b = f_a[None], f_b[None]
        geoms_a, geoms_b = [geoms_a], [geoms_b]
    s, i, cf = f_a.shape
    n, tau, g = cfg.num_prototypes, cfg.temperature, cfg.align_grid

    z_s_flat = _flat_project(f_a.reshape(s * i, cf), vp)
    z_t_flat = _flat_project(f_b.reshape(s * i, cf), vp)

    m_s = ad.reshape(ad.cosine_rows(ad.detach(z_s_flat), vp.proto_s), (s, i, n))
    m_t = ad.reshape(ad.cosine_rows(z_t_flat, vp.proto_t), (s, i, n))

    w_a = np.zeros((s, g * g, i))
    w_b = np.zeros((s, g * g, i))
    for idx, (ga, gb) in enumerate(zip(geoms_a, geoms_b)):
        roi = overlap_region(ga, gb)
        w_a[idx] = bilinear_weights(ga, roi, g, g)
        w_b[idx] = bilinear_weights(gb, roi, g, g)
    a_s_aligned = ad.softmax_rows(ad.bmm(ad.constant(w_a), m_s), tau)
    a_t_aligned = ad.softmax_rows(ad.bmm(ad.constant(w_b), m_t), tau)

    a_s = ad.softmax_rows(m_s, tau)
    a_t = ad.softmax_rows(m_t, tau)

    h_s = ad.topk_mean_axis(m_s, cfg.top_k, axis=1)
    h_t = ad.topk_mean_axis(m_t, cfg.top_k, axis=1)

    w_eff = ad.relu(vp.cls_w)
    r_s = ad.mul(w_eff, ad.reshape(h_s, (s, 1, n)))
    r_t = ad.mul(w_eff, ad.reshape(h_t, (s, 1, n)))
    y_s = ad.vsum(r_s, axis=2)
    y_t = ad.vsum(r_t, axis=2)

    z_s = ad.reshape(z_s_flat, (s, i, cfg.proj_dim))
    z_t = ad.reshape(z_t_flat, (s, i, cfg.proj_dim))
    s_s = _ad_slots(a_s, z_s)
    s_t = _ad_slots(a_t, z_t)
    q_t = ad.reshape(
        _ad_mlp(ad.reshape(s_t, (s * n, cfg.proj_dim)), vp), (s, n, cfg.proj_dim)
    )

    return ForwardOutputs(
        z_s=z_s,
        z_t=z_t,
        m_s=m_s,
        m_t=m_t,
        a_s=a_s,
        a_t=a_t,
        a_s_aligned=a_s_aligned,
        a_t_aligned=a_t_aligned,
        h_s=h_s,
        h_t=h_t,
        r_s=r_s,
        r_t=r_t,
        y_s=y_s,
        y_t=y_t,
        s_s=s_s,
        s_t=s_t,
        q_t=q_t,
        dom_s=dominance_batch(a_s.value),
        dom_t=dominance_batch(a_t.value),
    )


@dataclass
class InferenceOutputs:
    """Single-view numpy evaluation over a batch of samples."""

    z: np.ndarray  # [S, I, c_z]
    m: np.ndarray  # [S, I, N]
    a: np.ndarray  # [S, I, N]
    h: np.ndarray  # [S, N]
    r: np.ndarray  # [S, D, N]
    y: np.ndarray  # [S, D]

    @property
    def predictions(self) -> np.ndarray:
        return np.argmax(self.y, axis=-1)


def infer_batch(
    features: np.ndarray, params: HeadParams, cfg: HeadConfig, branch: str | None = None
) -> InferenceOutputs:
    """Vectorized inference on [S, I, c_f] features (one view per sample)."""
    branch = branch or cfg.inference_branch
    if branch not in ("student", "teacher"):
        raise ConfigError(f"unknown branch {branch!r}")
    features = numerics.require_finite("features", np.asarray(features, dtype=np.float64))
    if features.ndim == 2:
        features = features[None]
    z = project(features, params.proj_w, params.proj_b)
    protos = params.proto_s if branch == "student" else params.proto_t
    zn = z / np.linalg.norm(z, axis=-1, keepdims=True)
    pn = protos / np.linalg.norm(protos, axis=-1, keepdims=True)
    m = zn @ pn.T
    a = numerics.softmax_rows(m, cfg.temperature)
    h = numerics.topk_mean_columns(m, cfg.top_k)
    w_eff = effective_weights(params.cls_w)
    r = w_eff[None, :, :] * h[:, None, :]
    y = r.sum(axis=-1)
    return InferenceOutputs(z=z, m=m, a=a, h=h, r=r, y=y)


def infer(features, params, cfg, branch=None) -> InferenceOutputs:
    """Single-sample inference; features [I x c_f]."""
    return infer_batch(np.asarray(features)[None], params, cfg, branch)
