"""Spike noise on stable firing rates and the perturbation-consistency loss."""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from . import autograd as ag
from .autograd import DTYPE, ShapeError, Tensor


class NoiseKind(str, Enum):
    AMPLITUDE_AWARE = "AMPLITUDE_AWARE"
    FIXED_P = "FIXED_P"
    GAUSSIAN = "GAUSSIAN"


@dataclass(frozen=True)
class NoiseSpec:
    kind: NoiseKind = NoiseKind.AMPLITUDE_AWARE
    p: float = 0.5
    std: float = 0.5

    def __post_init__(self):
        object.__setattr__(self, "kind", NoiseKind(self.kind))
        if self.kind is NoiseKind.FIXED_P and not 0.0 <= self.p <= 1.0:
            raise ValueError(f"fixed noise probability must lie in [0, 1], got {self.p}")
        if self.kind is NoiseKind.GAUSSIAN and not self.std >= 0.0:
            raise ValueError(f"gaussian std must be >= 0, got {self.std}")

    @property
    def label(self) -> str:
        if self.kind is NoiseKind.FIXED_P:
            return f"fixed_p={self.p:g}"
        if self.kind is NoiseKind.GAUSSIAN:
            return f"gaussian_std={self.std:g}"
        return "amplitude_aware"

    @classmethod
    def parse(cls, text: str) -> "NoiseSpec":
        """Parse ``aware``, ``fixed:0.4`` or ``gaussian:0.5``."""
        name, _, arg = text.strip().partition(":")
        name = name.lower()
        if name in ("aware", "amplitude_aware"):
            return cls(NoiseKind.AMPLITUDE_AWARE)
        if name in ("fixed", "fixed_p"):
            return cls(NoiseKind.FIXED_P, p=float(arg))
        if name == "gaussian":
            return cls(NoiseKind.GAUSSIAN, std=float(arg))
        raise ValueError(f"unknown noise setting {text!r}")

    def __str__(self) -> str:
        if self.kind is NoiseKind.FIXED_P:
            return f"fixed:{self.p:g}"
        if self.kind is NoiseKind.GAUSSIAN:
            return f"gaussian:{self.std:g}"
        return "aware"


def sample_noise(stable_rate, spec: NoiseSpec, rng: np.random.Generator) -> np.ndarray:
    """Draw one noise value per element of ``stable_rate``.

    Spike kinds draw ``u`` uniformly from (0, 1] and fire iff ``u <= prob``,
    so probability 0 never fires and probability 1 always does.
    """
    rate = stable_rate.data if isinstance(stable_rate, Tensor) else np.asarray(stable_rate, DTYPE)
    if spec.kind is NoiseKind.GAUSSIAN:
        return rng.normal(0.0, spec.std, size=rate.shape)
    if spec.kind is NoiseKind.AMPLITUDE_AWARE:
        if rate.size and (rate.min() < 0.0 or rate.max() > 1.0):
            raise ValueError(
                f"stable firing rate outside [0, 1]: range [{rate.min()}, {rate.max()}]")
        prob = rate
    else:
        prob = spec.p
    u = 1.0 - rng.random(rate.shape)
    return (u <= prob).astype(DTYPE)


def perturb(stable_rate: Tensor, eps) -> Tensor:
    """``stable_rate + eps``; the noise carries no gradient."""
    eps = eps.data if isinstance(eps, Tensor) else np.asarray(eps, DTYPE)
    if eps.shape != stable_rate.shape:
        raise ShapeError(f"perturb: rate {stable_rate.shape} vs noise {eps.shape}")
    return ag.add(stable_rate, Tensor(eps))


def lattice(steps: int) -> np.ndarray:
    """Every value a spike-perturbed stable rate can take for ``steps`` timesteps."""
    k = np.arange(0, 2 * (steps - 1) + 1, dtype=DTYPE)
    return k / (steps - 1)


def on_lattice(values: np.ndarray, steps: int, tol: float = 1e-12) -> bool:
    scaled = np.asarray(values, DTYPE) * (steps - 1)
    return bool(np.all(np.abs(scaled - np.round(scaled)) <= tol * (steps - 1))
                and np.all(scaled >= -tol) and np.all(scaled <= 2 * (steps - 1) + tol))


def soften(logits: Tensor, alpha: float = 2.0) -> Tensor:
    """Temperature softmax over the class axis."""
    return ag.softmax(logits, alpha)


def perturbation_loss(logits: Tensor, noisy_logits: Tensor, alpha: float = 2.0,
                      detach_clean: bool = True) -> Tensor:
    """``alpha**2 * KL(p || p_noise)`` of the softened predictions, batch-averaged."""
    if logits.shape != noisy_logits.shape:
        raise ShapeError(f"perturbation loss: clean {logits.shape} vs noisy {noisy_logits.shape}")
    clean = ag.detach(logits) if detach_clean else logits
    p = soften(clean, alpha)
    log_p = ag.log_softmax(clean, alpha)
    log_q = ag.log_softmax(noisy_logits, alpha)
    kl = ag.sum_all(ag.mul(p, ag.sub(log_p, log_q)))
    return ag.scale(kl, alpha * alpha / logits.shape[0])
