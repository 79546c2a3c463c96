"""Cardinality/radix channel grouping with radix-aware split attention.

Feature channels are organized as K cardinality groups of width D = C/K,
each expanded into R sub-group blocks. A per-group gating network turns the
time-pooled group descriptor into per-split, per-channel logits; softmax
over splits (sigmoid when R = 1) yields the soft weights that fuse the
splits back into one group representation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Parameter, ShapeError, Tensor


@dataclass(frozen=True)
class CardinalityConfig:
    """Grouping geometry: C channels, K groups, R splits per group."""

    channels: int          # C, unified feature channel count
    groups: int            # K
    radix: int             # R
    gating_hidden: int = 0  # 0 picks the default width

    def __post_init__(self):
        problems = []
        if self.channels < 1 or self.groups < 1:
            problems.append("channels and groups must be positive")
        if self.radix < 1:
            problems.append(f"radix must be >= 1, got {self.radix}")
        if self.groups >= 1 and self.channels % self.groups != 0:
            problems.append(
                f"channels {self.channels} not divisible by groups {self.groups}")
        if problems:
            raise ValueError("; ".join(problems))
        if self.gating_hidden == 0:
            object.__setattr__(self, "gating_hidden",
                               max(8, self.channels // (4 * self.groups)))

    @property
    def group_width(self) -> int:
        return self.channels // self.groups

    @property
    def subgroups(self) -> int:
        return self.groups * self.radix


def group_sum(x: Tensor, cfg: CardinalityConfig) -> list[Tensor]:
    """Sum each group's R consecutive sub-group blocks.

    ``x`` is (..., S, G*D) laid out as G = K*R contiguous blocks of D
    channels, group-major; output k is the elementwise sum of blocks
    k*R .. k*R + R - 1, shaped (..., S, D).
    """
    d = cfg.group_width
    expected = cfg.subgroups * d
    if x.shape[-1] != expected:
        raise ShapeError(
            f"group_sum: expected {expected} channels (K={cfg.groups} R={cfg.radix} "
            f"D={d}), got {x.shape[-1]}")
    out = []
    for k in range(cfg.groups):
        acc = T.slice_axis(x, -1, k * cfg.radix * d, (k * cfg.radix + 1) * d)
        for i in range(1, cfg.radix):
            start = (k * cfg.radix + i) * d
            acc = T.add(acc, T.slice_axis(x, -1, start, start + d))
        out.append(acc)
    return out


def gating_logits(s: Tensor, w1: Tensor, b1: Tensor, w2: Tensor, b2: Tensor,
                  cfg: CardinalityConfig) -> Tensor:
    """Two-layer gating network: descriptor (..., D) -> logits (..., R, D)."""
    d = cfg.group_width
    if s.shape[-1] != d:
        raise ShapeError(f"gating_logits: descriptor width {s.shape[-1]} != {d}")
    squeeze = s.ndim == 1
    if squeeze:
        s = s.reshape(1, d)
    h = T.relu(T.add(T.matmul(s, w1), b1))
    flat = T.add(T.matmul(h, w2), b2)
    shape = flat.shape[:-1] + (cfg.radix, d)
    out = flat.reshape(shape)
    if squeeze:
        out = out.reshape(cfg.radix, d)
    return out


def split_weights(logits: Tensor, radix: int) -> Tensor:
    """Per-split soft weights from logits shaped (..., R, D).

    R > 1: softmax over the split axis, so weights per channel sum to 1.
    R = 1: sigmoid, each weight in (0, 1).
    """
    if radix < 1:
        raise ValueError(f"radix must be >= 1, got {radix}")
    if logits.shape[-2] != radix:
        raise ShapeError(
            f"split_weights: logits shaped {logits.shape} do not carry {radix} splits")
    if radix > 1:
        w = T.softmax(logits, axis=-2)
        _assert_weight_sums(w.data)
        return w
    return T.sigmoid(logits)


def _assert_weight_sums(w: np.ndarray) -> None:
    sums = w.sum(axis=-2)
    if not np.all(np.abs(sums - 1.0) < 1e-6):
        raise AssertionError("split-attention weights do not sum to 1 per channel")


def split_attention(x_splits: list[Tensor], logits: Tensor, radix: int) -> Tensor:
    """Fuse R split tensors (..., S, D) with per-channel soft weights."""
    if len(x_splits) != radix:
        raise ShapeError(
            f"split_attention: got {len(x_splits)} splits for radix {radix}")
    w = split_weights(logits, radix)
    out = None
    for i, xs in enumerate(x_splits):
        wi = T.slice_axis(w, -2, i, i + 1)  # (..., 1, D), broadcasts over time
        term = T.mul(xs, wi)
        out = term if out is None else T.add(out, term)
    return out


class GatingNetwork:
    """Owns one group's gating parameters."""

    def __init__(self, prefix: str, cfg: CardinalityConfig, rng: np.random.Generator):
        d, h = cfg.group_width, cfg.gating_hidden
        self.cfg = cfg
        self.w1 = Parameter(f"{prefix}.w1", _init(rng, (d, h), d))
        self.b1 = Parameter(f"{prefix}.b1", _init(rng, (h,), d))
        self.w2 = Parameter(f"{prefix}.w2", _init(rng, (h, cfg.radix * d), h))
        self.b2 = Parameter(f"{prefix}.b2", _init(rng, (cfg.radix * d,), h))

    def __call__(self, s: Tensor) -> Tensor:
        return gating_logits(s, self.w1, self.b1, self.w2, self.b2, self.cfg)

    def parameters(self) -> list[Parameter]:
        return [self.w1, self.b1, self.w2, self.b2]


class GroupExpansion:
    """One cardinality group: R learned projections of its raw channels,
    radix sum for the gating descriptor, then split-attention fusion."""

    def __init__(self, prefix: str, in_channels: int, cfg: CardinalityConfig,
                 rng: np.random.Generator):
        self.cfg = cfg
        d = cfg.group_width
        self.proj_w = [Parameter(f"{prefix}.split{i}.w", _init(rng, (in_channels, d), in_channels))
                       for i in range(cfg.radix)]
        self.proj_b = [Parameter(f"{prefix}.split{i}.b", _init(rng, (d,), in_channels))
                       for i in range(cfg.radix)]
        self.gating = GatingNetwork(f"{prefix}.gating", cfg, rng)

    def __call__(self, x: Tensor) -> Tensor:
        """x: (..., S, in_channels) -> fused group features (..., S, D)."""
        splits = [T.add(T.matmul(x, w), b)
                  for w, b in zip(self.proj_w, self.proj_b)]
        acc = splits[0]
        for s in splits[1:]:
            acc = T.add(acc, s)
        descriptor = T.mean_(acc, axis=-2)  # time-pooled group descriptor
        logits = self.gating(descriptor)
        return split_attention(splits, logits, self.cfg.radix)

    def parameters(self) -> list[Parameter]:
        return [*self.proj_w, *self.proj_b, *self.gating.parameters()]


def _init(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(max(fan_in, 1))
    draw = rng.uniform(-bound, bound, size=shape)
    # quantize to f32 so checkpoints round-trip bit-exactly
    return draw.astype(np.float32).astype(np.float64)
