"""Adaptive modulation gradient balancing on top of Adam.

Each modality's gradient norm is compared against the mean of the others;
dominant modalities (ratio above 1) get their first-moment contribution
scaled down by a smooth tanh factor while the second moment keeps the raw
gradient, preserving Adam's variance estimate. Cosine-annealed Gaussian
noise is added to the updated parameters for early-training exploration.

With every ratio at or below 1 and zero noise the step is exactly Adam.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .tensor import Parameter

RATIO_FLOOR = 1e-12


class GradientError(ValueError):
    """A parameter arrived with a non-finite gradient."""


@dataclass(frozen=True)
class AmgbConfig:
    """Optimizer hyperparameters.

    ``modality_count`` of 1 degenerates to plain Adam (no ratios to
    balance); ``total_steps`` bounds the schedule and the step budget.
    """

    alpha: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    beta_mod: float = 1.0
    sigma_max_sq: float = 1e-4
    sigma_min_sq: float = 0.0
    total_steps: int = 1
    modality_count: int = 1
    noise_on_shared: bool = True

    def __post_init__(self):
        problems = []
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            problems.append("beta1/beta2 must lie in [0, 1)")
        if self.alpha <= 0:
            problems.append("alpha must be positive")
        if self.beta_mod <= 0:
            problems.append("beta_mod must be positive")
        if not (self.sigma_max_sq >= self.sigma_min_sq >= 0.0):
            problems.append("need sigma_max_sq >= sigma_min_sq >= 0")
        if self.total_steps < 1:
            problems.append("total_steps must be >= 1")
        if self.modality_count < 1:
            problems.append("modality_count must be >= 1")
        if problems:
            raise ValueError("; ".join(problems))


def gradient_ratio(norms) -> np.ndarray:
    """Each modality's norm over the mean of the other modalities' norms.

    The denominator is floored at 1e-12; an all-zero norm vector maps to
    all-ones ratios (no modality dominates).
    """
    norms = np.asarray(norms, dtype=np.float64)
    m = len(norms)
    if m < 2:
        raise ValueError(f"gradient_ratio needs at least 2 modalities, got {m}")
    if np.any(norms < 0):
        raise ValueError("gradient norms must be non-negative")
    if not norms.any():
        return np.ones(m)
    total = norms.sum()
    others_mean = (total - norms) / (m - 1)
    return norms / np.maximum(others_mean, RATIO_FLOOR)


def modulation(rho: float, beta_mod: float = 1.0) -> float:
    """Suppression factor in (0, 1]: 1 below the dominance threshold,
    1 - tanh(beta * (rho - 1)) above it."""
    if rho < 0:
        raise ValueError("rho must be non-negative")
    if beta_mod <= 0:
        raise ValueError("beta_mod must be positive")
    if rho <= 1.0:
        return 1.0
    return 1.0 - math.tanh(beta_mod * max(rho - 1.0, 0.0))


def noise_variance(t: int, cfg: AmgbConfig) -> float:
    """Cosine-annealed noise variance at step t of the schedule."""
    if not (0 <= t <= cfg.total_steps):
        raise ValueError(f"step {t} outside schedule [0, {cfg.total_steps}]")
    cosine = 0.5 * math.cos(math.pi * t / cfg.total_steps) + 0.5
    return cfg.sigma_max_sq * cosine + cfg.sigma_min_sq


@dataclass
class ModalityGradState:
    """Per-modality monitor values from the most recent step."""

    grad_norm: np.ndarray
    rho: np.ndarray
    gamma: np.ndarray
    sigma_sq: float
    step: int


class AmgbOptimizer:
    """Owns moment buffers for a parameter list partitioned by modality.

    ``partition`` maps parameter name to a modality index; parameters left
    out of the mapping are shared trunk weights and always update with
    modulation factor 1.
    """

    def __init__(self, params: list[Parameter], cfg: AmgbConfig,
                 partition: dict[str, int] | None = None, seed: int = 0,
                 modulate: bool = True):
        names = [p.name for p in params]
        if len(set(names)) != len(names):
            raise ValueError("parameter names must be unique")
        self.params = list(params)
        self.cfg = cfg
        self.partition = dict(partition or {})
        for name, m in self.partition.items():
            if not (0 <= m < cfg.modality_count):
                raise ValueError(f"parameter {name!r} mapped to bad modality {m}")
        self.seed = seed
        self.modulate = modulate
        self.t = 0
        self.m_buf = {p.name: np.zeros_like(p.data) for p in params}
        self.v_buf = {p.name: np.zeros_like(p.data) for p in params}
        self.last_state: ModalityGradState | None = None
        self.history: list[dict] = []

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def step(self, modality_norms=None, force_gamma=None) -> list[dict]:
        """Apply one update from the gradients currently on the parameters.

        ``modality_norms`` carries the per-modality gradient norms measured
        by the caller; ``force_gamma`` overrides the modulation factors
        (diagnostics only). Returns the per-modality report rows.
        """
        cfg = self.cfg
        if self.t >= cfg.total_steps:
            raise RuntimeError(
                f"optimizer schedule exhausted at step {self.t} of {cfg.total_steps}")

        m_count = cfg.modality_count
        if modality_norms is None:
            norms = np.zeros(m_count)
        else:
            norms = np.asarray(modality_norms, dtype=np.float64)
            if len(norms) != m_count:
                raise ValueError(f"expected {m_count} modality norms, got {len(norms)}")

        if force_gamma is not None:
            gamma = np.asarray(force_gamma, dtype=np.float64)
            rho = np.full(m_count, np.nan)
        elif not self.modulate or m_count < 2:
            rho = np.ones(m_count)
            gamma = np.ones(m_count)
        else:
            rho = gradient_ratio(norms)
            gamma = np.array([modulation(r, cfg.beta_mod) for r in rho])

        sigma_sq = noise_variance(self.t, cfg)
        t_next = self.t + 1
        bias1 = 1.0 - cfg.beta1 ** t_next
        bias2 = 1.0 - cfg.beta2 ** t_next

        for p in self.params:
            g = p.grad
            if g is None:
                g = np.zeros_like(p.data)
            if not np.isfinite(g).all():
                raise GradientError(f"non-finite gradient on parameter {p.name!r}")
            modality = self.partition.get(p.name)
            g_mod = g if modality is None else gamma[modality] * g
            m = self.m_buf[p.name]
            v = self.v_buf[p.name]
            m = cfg.beta1 * m + (1.0 - cfg.beta1) * g_mod
            v = cfg.beta2 * v + (1.0 - cfg.beta2) * (g * g)
            self.m_buf[p.name] = m
            self.v_buf[p.name] = v
            m_hat = m / bias1
            v_hat = v / bias2
            p.data = p.data - cfg.alpha * m_hat / (np.sqrt(v_hat) + cfg.eps)

        if sigma_sq > 0.0:
            rng = np.random.default_rng([self.seed, self.t])
            sigma = math.sqrt(sigma_sq)
            for p in self.params:
                modality = self.partition.get(p.name)
                if modality is None and not cfg.noise_on_shared:
                    continue
                p.data = p.data + rng.normal(0.0, sigma, size=p.data.shape)

        self.last_state = ModalityGradState(
            grad_norm=norms.copy(), rho=rho.copy(), gamma=gamma.copy(),
            sigma_sq=sigma_sq, step=self.t)
        rows = [{
            "step": self.t,
            "modality": m,
            "grad_norm": float(norms[m]),
            "rho": float(rho[m]),
            "gamma": float(gamma[m]),
            "sigma_sq": float(sigma_sq),
        } for m in range(m_count)]
        self.history.extend(rows)
        self.t = t_next
        return rows


def gradient_report(opt: AmgbOptimizer) -> list[dict]:
    """All per-step per-modality monitor rows logged so far."""
    if opt.t == 0:
        raise RuntimeError("gradient_report: no steps taken yet")
    return list(opt.history)
