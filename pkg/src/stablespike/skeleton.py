"""Stable spike skeletons and the spike-map consistency loss.

Spike tensors are time-major: ``S[t, batch, ...]``.  Bit operations on
adjacent timesteps are evaluated in their multilinear form (AND = a*b,
OR = a+b-ab, XOR = a+b-2ab), which agrees with the truth table on binary
inputs and stays differentiable through the surrogate chain.
"""

from __future__ import annotations

from enum import Enum

import numpy as np

from . import autograd as ag
from .autograd import DTYPE, ShapeError, Tensor

KL_EPS = 1e-8


class BitOp(str, Enum):
    AND = "AND"
    OR = "OR"
    XOR = "XOR"


class ConsistencyFn(str, Enum):
    MSE = "MSE"
    KL = "KL"
    COSINE = "COSINE"


def _pairs(spikes: Tensor) -> tuple[Tensor, Tensor]:
    steps = spikes.shape[0]
    if steps < 2:
        raise ValueError(f"need T >= 2 for adjacent pairs, got T={steps}")
    return ag.take(spikes, 0, steps - 1), ag.take(spikes, 1, steps)


def stable_and(spikes: Tensor) -> Tensor:
    """``S[t] & S[t+1]`` for t = 0..T-2, as a product."""
    early, late = _pairs(spikes)
    return ag.mul(early, late)


def bit_combine(spikes: Tensor, mode: BitOp | str) -> Tensor:
    mode = BitOp(mode)
    if mode is BitOp.AND:
        return stable_and(spikes)
    early, late = _pairs(spikes)
    both = ag.mul(early, late)
    either = ag.add(early, late)
    if mode is BitOp.OR:
        return ag.sub(either, both)
    return ag.sub(either, ag.scale(both, 2.0))


def bit_combine_bits(spikes: np.ndarray, mode: BitOp | str) -> np.ndarray:
    """Bitwise reference on boolean/integer arrays (no gradient)."""
    s = np.asarray(spikes).astype(bool)
    if s.shape[0] < 2:
        raise ValueError(f"need T >= 2 for adjacent pairs, got T={s.shape[0]}")
    ops = {BitOp.AND: np.logical_and, BitOp.OR: np.logical_or, BitOp.XOR: np.logical_xor}
    return ops[BitOp(mode)](s[:-1], s[1:]).astype(np.uint8)


def firing_rate(spikes: Tensor) -> Tensor:
    """Mean over the time axis."""
    return ag.mean(spikes, axis=0)


def stable_firing_rate(skeleton: Tensor) -> Tensor:
    """Mean over the T-1 skeleton slices."""
    return ag.mean(skeleton, axis=0)


# ---------------------------------------------------------------------------
# consistency losses


def _flat(t: np.ndarray) -> np.ndarray:
    return t.reshape(t.shape[0], -1)


def _kl_loss(anchor: Tensor, rates: Tensor) -> Tensor:
    a_raw = _flat(anchor.data) + KL_EPS
    r_raw = _flat(rates.data) + KL_EPS
    za = a_raw.sum(axis=1, keepdims=True)
    zr = r_raw.sum(axis=1, keepdims=True)
    a, q = a_raw / za, r_raw / zr
    batch = a.shape[0]
    per = (a * (np.log(a) - np.log(q))).sum(axis=1)

    def bw(g):
        g = float(g) / batch
        g_r = g * (-a / r_raw + 1.0 / zr)
        d_a = np.log(a) + 1.0 - np.log(q)
        g_a = g * (d_a - (a * d_a).sum(axis=1, keepdims=True)) / za
        return g_a.reshape(anchor.shape), g_r.reshape(rates.shape)

    return ag._record(np.asarray(per.mean()), (anchor, rates), bw, "kl_rates")


def _cosine_loss(anchor: Tensor, rates: Tensor) -> Tensor:
    a, r = _flat(anchor.data), _flat(rates.data)
    na = np.linalg.norm(a, axis=1, keepdims=True)
    nr = np.linalg.norm(r, axis=1, keepdims=True)
    live = (na > 0) & (nr > 0)
    safe_na = np.where(live, na, 1.0)
    safe_nr = np.where(live, nr, 1.0)
    dot = (a * r).sum(axis=1, keepdims=True)
    cos = np.where(live, dot / (safe_na * safe_nr), 1.0)
    batch = a.shape[0]
    per = 1.0 - cos[:, 0]

    def bw(g):
        g = float(g) / batch
        g_r = -g * (a / (safe_na * safe_nr) - cos * r / safe_nr ** 2) * live
        g_a = -g * (r / (safe_na * safe_nr) - cos * a / safe_na ** 2) * live
        return g_a.reshape(anchor.shape), g_r.reshape(rates.shape)

    return ag._record(np.asarray(per.mean()), (anchor, rates), bw, "cosine_rates")


def spike_consistency_loss(anchor: Tensor, rates: Tensor, fn: ConsistencyFn | str = "MSE",
                           detach_anchor: bool = True) -> Tensor:
    """Pull the firing rate ``rates`` toward the stable rate ``anchor``.

    MSE averages over batch and all feature elements.  KL compares the
    per-sample normalized rate maps as KL(anchor || rates); COSINE is one
    minus the per-sample cosine similarity (0 for an all-silent sample).
    Both are batch-averaged.
    """
    if anchor.shape != rates.shape:
        raise ShapeError(f"consistency loss: anchor {anchor.shape} vs rates {rates.shape}")
    fn = ConsistencyFn(fn)
    if detach_anchor:
        anchor = ag.detach(anchor)
    if fn is ConsistencyFn.MSE:
        return ag.mean(ag.square(ag.sub(anchor, rates)))
    if fn is ConsistencyFn.KL:
        return _kl_loss(anchor, rates)
    return _cosine_loss(anchor, rates)

