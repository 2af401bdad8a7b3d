"""Leaky integrate-and-fire neurons with soft reset and a boxcar surrogate."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autograd import DTYPE, ShapeError, Tensor, _record


@dataclass(frozen=True)
class LifParams:
    tau: float = 2.0
    theta: float = 1.0
    surrogate_width: float = 1.0
    # drop the -theta*S path from backward (a common truncation); off = full BPTT
    detach_reset: bool = False

    def __post_init__(self):
        if not self.tau > 1.0:
            raise ValueError(f"tau must exceed 1, got {self.tau}")
        if not self.theta > 0.0:
            raise ValueError(f"theta must be positive, got {self.theta}")
        if not self.surrogate_width > 0.0:
            raise ValueError(f"surrogate_width must be positive, got {self.surrogate_width}")

    @property
    def decay(self) -> float:
        return 1.0 - 1.0 / self.tau


def lif_step(h_prev: np.ndarray, current: np.ndarray, p: LifParams):
    """One charge/fire/reset step.

    Returns ``(spikes, h_new, h_charge)``; ``h_charge`` is the pre-reset
    potential the surrogate is evaluated at.
    """
    h_prev = np.asarray(h_prev, dtype=DTYPE)
    current = np.asarray(current, dtype=DTYPE)
    if h_prev.shape != current.shape:
        raise ShapeError(f"lif_step: membrane {h_prev.shape} vs input {current.shape}")
    h_charge = p.decay * h_prev + current
    spikes = (h_charge >= p.theta).astype(DTYPE)
    return spikes, h_charge - spikes * p.theta, h_charge


def surrogate_grad(h_charge, p: LifParams) -> np.ndarray:
    """Rectangular window: 1/a inside |H - theta| < a/2, zero outside."""
    h_charge = np.asarray(h_charge, dtype=DTYPE)
    a = p.surrogate_width
    return (np.abs(h_charge - p.theta) < a / 2).astype(DTYPE) / a


def ramp(h_charge, p: LifParams) -> np.ndarray:
    """Antiderivative of the surrogate: a continuous stand-in for the step."""
    a = p.surrogate_width
    return np.clip((np.asarray(h_charge, dtype=DTYPE) - p.theta) / a + 0.5, 0.0, 1.0)


def lif_sequence(current: Tensor, p: LifParams, smooth: bool = False,
                 return_trace: bool = False):
    """Run LIF dynamics over the leading time axis of ``current``.

    Membrane state starts at zero for every call.  Backward is full BPTT
    including the reset path, with :func:`surrogate_grad` standing in for
    the step derivative.  ``smooth=True`` swaps the forward step for
    :func:`ramp`, whose true derivative is the surrogate; it exists so the
    backward pass can be checked against finite differences.
    """
    x = current.data
    if x.ndim < 1 or x.shape[0] < 1:
        raise ValueError("lif_sequence needs at least one timestep")
    steps = x.shape[0]
    h = np.zeros(x.shape[1:], dtype=DTYPE)
    spikes = np.empty_like(x)
    charges = np.empty_like(x)
    for t in range(steps):
        hc = p.decay * h + x[t]
        s = ramp(hc, p) if smooth else (hc >= p.theta).astype(DTYPE)
        charges[t] = hc
        spikes[t] = s
        h = hc - s * p.theta

    def bw(g):
        grad_in = np.empty_like(g)
        sg = surrogate_grad(charges, p)
        reset_coef = 0.0 if p.detach_reset else p.theta
        g_h = np.zeros(x.shape[1:], dtype=DTYPE)  # dL/dH_t from the future
        for t in range(steps - 1, -1, -1):
            g_hc = g_h + (g[t] - reset_coef * g_h) * sg[t]
            grad_in[t] = g_hc
            g_h = p.decay * g_hc
        return (grad_in,)

    out = _record(spikes, (current,), bw, "lif")
    if return_trace:
        return out, charges
    return out
