"""Spatiotemporal disentanglement and modality alignment.

Each group representation runs through three attention branches: a temporal
branch attending over time positions, a spatial branch attending over
channels (attention on the transposed feature map), and a cross-attention
common branch whose queries come from one independent branch and whose
keys/values come from the other. A norm-based loss shapes the relation
between the three feature sets, fused branches pass through grouped
normalization plus channel attention with a width-1 convolution residual.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .expansion import _init
from .tensor import Parameter, ShapeError, Tensor, scaled_dot_attention


@dataclass
class DisentangledFeatures:
    """Per-group triples: spatial, temporal and common branch outputs."""

    spatial: list[Tensor]
    temporal: list[Tensor]
    common: list[Tensor]

    def __post_init__(self):
        if not (len(self.spatial) == len(self.temporal) == len(self.common)):
            raise ValueError("branch lists must have equal length")

    @property
    def group_count(self) -> int:
        return len(self.spatial)


@dataclass(frozen=True)
class LossWeights:
    """Coefficients for the three norm terms of the disentanglement loss.

    ``independent`` weighs |spatial - temporal| and may be negative (pushing
    the independent branches apart); the two common-vs-branch weights must
    stay non-negative.
    """

    independent: float = 0.1
    common_spatial: float = 0.1
    common_temporal: float = 0.1

    def __post_init__(self):
        if self.common_spatial < 0 or self.common_temporal < 0:
            raise ValueError("common-branch loss weights must be >= 0")


class AttentionBranch:
    """Single-head self-attention with its own Q/K/V projections."""

    def __init__(self, prefix: str, width: int, rng: np.random.Generator):
        self.width = width
        self.w_q = Parameter(f"{prefix}.w_q", _init(rng, (width, width), width))
        self.w_k = Parameter(f"{prefix}.w_k", _init(rng, (width, width), width))
        self.w_v = Parameter(f"{prefix}.w_v", _init(rng, (width, width), width))

    def attend(self, query_src: Tensor, kv_src: Tensor) -> Tensor:
        q = T.matmul(query_src, self.w_q)
        k = T.matmul(kv_src, self.w_k)
        v = T.matmul(kv_src, self.w_v)
        return scaled_dot_attention(q, k, v)

    def __call__(self, f: Tensor) -> Tensor:
        return self.attend(f, f)

    def parameters(self) -> list[Parameter]:
        return [self.w_q, self.w_k, self.w_v]


def temporal_branch(f: Tensor, branch: AttentionBranch) -> Tensor:
    """Self-attention across the S time positions of f: (..., S, D)."""
    if f.shape[-2] == 0:
        raise ShapeError("temporal_branch: empty time axis")
    return branch(f)


def spatial_branch(f: Tensor, branch: AttentionBranch) -> Tensor:
    """Self-attention across the D channels: runs on f^T, transposed back."""
    if f.shape[-1] == 0:
        raise ShapeError("spatial_branch: empty channel axis")
    return T.transpose(branch(T.transpose(f)))


def common_branch(f: Tensor, f_spatial: Tensor, f_temporal: Tensor,
                  branch: AttentionBranch, direction: str = "temporal_queries") -> Tensor:
    """Cross-attention producing the shared feature.

    Default direction sends temporal queries to spatial keys/values; the
    reverse is available via ``direction="spatial_queries"``.
    """
    if f_spatial.shape != f_temporal.shape or f.shape != f_spatial.shape:
        raise ShapeError(
            f"common_branch: mismatched shapes {f.shape}, {f_spatial.shape}, "
            f"{f_temporal.shape}")
    if direction == "temporal_queries":
        return branch.attend(f_temporal, f_spatial)
    if direction == "spatial_queries":
        return branch.attend(f_spatial, f_temporal)
    raise ValueError(f"unknown cross-attention direction {direction!r}")


def disentangle_loss(feats: DisentangledFeatures, weights: LossWeights) -> Tensor:
    """Weighted sum of Frobenius norms between the three feature sets.

    Each norm runs over the concatenation of the per-group tensors, so the
    sets are compared as wholes.
    """
    if feats.group_count == 0:
        raise ValueError("disentangle_loss: empty feature lists")
    f_s = T.concat(feats.spatial, axis=-1)
    f_t = T.concat(feats.temporal, axis=-1)
    f_p = T.concat(feats.common, axis=-1)
    loss = T.mul(T.l2_norm(T.sub(f_s, f_t)), weights.independent)
    loss = T.add(loss, T.mul(T.l2_norm(T.sub(f_p, f_s)), weights.common_spatial))
    loss = T.add(loss, T.mul(T.l2_norm(T.sub(f_p, f_t)), weights.common_temporal))
    return loss


def fuse_branches(feats: DisentangledFeatures, fusion_w: Tensor) -> Tensor:
    """Per-group weighted branch sum, groups concatenated along channels.

    ``fusion_w`` holds (w_spatial, w_temporal, w_common); it is a learnable
    length-3 tensor initialized to 1/3 each.
    """
    if fusion_w.shape != (3,):
        raise ShapeError(f"fuse_branches: fusion weights must be shape (3,), "
                         f"got {fusion_w.shape}")
    w_s = T.slice_axis(fusion_w, 0, 0, 1)
    w_t = T.slice_axis(fusion_w, 0, 1, 2)
    w_p = T.slice_axis(fusion_w, 0, 2, 3)
    fused = []
    for f_s, f_t, f_p in zip(feats.spatial, feats.temporal, feats.common):
        fused.append(T.add(T.add(T.mul(f_s, w_s), T.mul(f_t, w_t)), T.mul(f_p, w_p)))
    return T.concat(fused, axis=-1)


# ---------------------------------------------------------------------------
# Modality alignment


def grouped_normalize(f: Tensor, group_count: int, gamma: Tensor, beta: Tensor,
                      eps: float) -> Tensor:
    """Normalize each contiguous channel group by its own mean/variance.

    Statistics run over all time and channel entries of the group (per
    batch element); gamma/beta are per-group scale and shift scalars.
    """
    c = f.shape[-1]
    if c % group_count != 0:
        raise ShapeError(
            f"grouped_normalize: {c} channels not divisible by {group_count} groups")
    if c == 0:
        raise ShapeError("grouped_normalize: empty channel axis")
    width = c // group_count
    stat_axes = (-2, -1)
    out = []
    for g in range(group_count):
        fg = T.slice_axis(f, -1, g * width, (g + 1) * width)
        mu = T.mean_(fg, axis=stat_axes, keepdims=True)
        centered = T.sub(fg, mu)
        var = T.mean_(T.mul(centered, centered), axis=stat_axes, keepdims=True)
        normed = T.div(centered, T.sqrt(T.add(var, eps)))
        g_scale = T.slice_axis(gamma, 0, g, g + 1)
        g_shift = T.slice_axis(beta, 0, g, g + 1)
        out.append(T.add(T.mul(normed, g_scale), g_shift))
    return T.concat(out, axis=-1)


def pool_positions(f: Tensor) -> Tensor:
    """Average pool plus max pool over all time positions, per channel."""
    return T.add(T.mean_(f, axis=-2), T.max_(f, axis=-2))


class ModalityAlign:
    """Grouped normalization, channel attention and a width-1 conv residual.

    Forward: (1) normalize channels in M modality groups; (2) pool the
    normalized map over positions; (3) squeeze-excite the pooled vector
    through a two-layer bottleneck into per-channel sigmoid weights;
    (4) add the re-weighted normalized features to a width-1 convolution
    of the raw input.
    """

    def __init__(self, prefix: str, channels: int, modality_groups: int,
                 rng: np.random.Generator, reduction: int = 4, eps: float = 1e-5):
        if eps <= 0:
            raise ValueError("eps must be positive")
        if reduction < 1:
            raise ValueError("reduction ratio must be >= 1")
        if channels % modality_groups != 0:
            raise ValueError(
                f"channels {channels} not divisible by modality groups {modality_groups}")
        self.channels = channels
        self.modality_groups = modality_groups
        self.eps = eps
        hidden = max(1, channels // reduction)
        self.gamma = Parameter(f"{prefix}.gamma", np.ones(modality_groups))
        self.beta = Parameter(f"{prefix}.beta", np.zeros(modality_groups))
        self.w1 = Parameter(f"{prefix}.w1", _init(rng, (channels, hidden), channels))
        self.b1 = Parameter(f"{prefix}.b1", _init(rng, (hidden,), channels))
        self.w2 = Parameter(f"{prefix}.w2", _init(rng, (hidden, channels), hidden))
        self.b2 = Parameter(f"{prefix}.b2", _init(rng, (channels,), hidden))
        self.w_res = Parameter(f"{prefix}.res.w", _init(rng, (channels, channels), channels))
        self.b_res = Parameter(f"{prefix}.res.b", _init(rng, (channels,), channels))

    def channel_attention(self, pooled: Tensor) -> Tensor:
        squeeze = pooled.ndim == 1
        if squeeze:
            pooled = pooled.reshape(1, self.channels)
        h = T.relu(T.add(T.matmul(pooled, self.w1), self.b1))
        a = T.sigmoid(T.add(T.matmul(h, self.w2), self.b2))
        if squeeze:
            a = a.reshape(self.channels)
        return a

    def __call__(self, f: Tensor) -> Tensor:
        if f.shape[-1] != self.channels:
            raise ShapeError(
                f"modality_align: expected {self.channels} channels, got {f.shape[-1]}")
        normed = grouped_normalize(f, self.modality_groups, self.gamma, self.beta,
                                   self.eps)
        pooled = pool_positions(normed)
        attn = self.channel_attention(pooled)
        if attn.ndim == f.ndim - 1:  # give the broadcast a time axis
            attn = attn.reshape(attn.shape[:-1] + (1, self.channels))
        residual = T.add(T.matmul(f, self.w_res), self.b_res)
        return T.add(residual, T.mul(attn, normed))

    def parameters(self) -> list[Parameter]:
        return [self.gamma, self.beta, self.w1, self.b1, self.w2, self.b2,
                self.w_res, self.b_res]


class DisentangleBlock:
    """Branch trio shared across groups, plus learnable fusion weights."""

    def __init__(self, prefix: str, width: int, time_steps: int,
                 rng: np.random.Generator, cross_direction: str = "temporal_queries"):
        self.temporal = AttentionBranch(f"{prefix}.temporal", width, rng)
        self.spatial = AttentionBranch(f"{prefix}.spatial", time_steps, rng)
        self.cross = AttentionBranch(f"{prefix}.cross", width, rng)
        self.fusion_w = Parameter(f"{prefix}.fusion_w", np.full(3, 1.0 / 3.0))
        self.cross_direction = cross_direction

    def disentangle(self, groups: list[Tensor]) -> DisentangledFeatures:
        spatial, temporal, common = [], [], []
        for f in groups:
            f_t = temporal_branch(f, self.temporal)
            f_s = spatial_branch(f, self.spatial)
            f_p = common_branch(f, f_s, f_t, self.cross, self.cross_direction)
            spatial.append(f_s)
            temporal.append(f_t)
            common.append(f_p)
        return DisentangledFeatures(spatial=spatial, temporal=temporal, common=common)

    def __call__(self, groups: list[Tensor]) -> tuple[Tensor, DisentangledFeatures]:
        feats = self.disentangle(groups)
        return fuse_branches(feats, self.fusion_w), feats

    def parameters(self) -> list[Parameter]:
        return [*self.temporal.parameters(), *self.spatial.parameters(),
                *self.cross.parameters(), self.fusion_w]
