"""Toy restoration operator modulated by the policy's actions.

Per channel ``c`` and action ``(r_h, r_l, g_f, g_o)``::

    low, high = split(fft2(x_c), r_h, r_l)
    O_c = w_low[c] * ifft2(low) + w_high[c] * ifft2(high)    # real part
    y_c = s[c] * x_c + b[c]
    out_c = g_f * y_c + g_o * O_c

The output is linear in every backbone parameter once the action is fixed,
so the gradients below are exact.  The training path is left unclamped;
rewards and files see ``clamp(out, 0, 1)``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .imgcore import as_image, clamp01, fft2, ifft2, lowfreq_mask
from .policy import deterministic_action, policy_forward
from .rewards import RewardBreakdown

STAGES = 1
PARAM_NAMES = ("w_low", "w_high", "s", "b")
L1_DELTA = 1e-8

BackboneParams = dict  # name -> (C,) array


def init_params(channels: int = 3) -> BackboneParams:
    return {
        "w_low": np.ones(channels),
        "w_high": np.full(channels, 0.5),
        "s": np.ones(channels),
        "b": np.zeros(channels),
    }


def bands(x, r_h: float, r_l: float) -> tuple[np.ndarray, np.ndarray]:
    """Spatial-domain low and high frequency bands of ``x``; they sum to ``x``."""
    low, high = lowfreq_mask(fft2(x), r_h, r_l)
    return ifft2(low), ifft2(high)


def _check(x: np.ndarray, p: BackboneParams) -> None:
    c = x.shape[2]
    for name in PARAM_NAMES:
        if np.shape(p[name]) != (c,):
            raise ValueError(f"backbone parameter {name!r} has shape {np.shape(p[name])}, image has {c} channels")


def restore(x, a, p: BackboneParams, split=None) -> np.ndarray:
    """Unclamped restoration of ``x`` under action ``a``.

    ``split`` may carry precomputed ``bands(x, a[0], a[1])``.
    """
    x = as_image(x)
    _check(x, p)
    r_h, r_l, g_f, g_o = (float(v) for v in a)
    low, high = split if split is not None else bands(x, r_h, r_l)
    inter = p["w_low"] * low + p["w_high"] * high
    latent = p["s"] * x + p["b"]
    return g_f * latent + g_o * inter


def restore_deterministic(x, params: BackboneParams, policy_params) -> np.ndarray:
    return restore(x, deterministic_action(policy_forward(policy_params, x)), params)


def backbone_grads(x, a, p: BackboneParams, upstream, split=None) -> BackboneParams:
    """Gradients of ``sum(upstream * restore(x, a, p))`` w.r.t. each parameter."""
    x = as_image(x)
    _check(x, p)
    upstream = np.asarray(upstream, dtype=np.float64)
    if upstream.shape != x.shape:
        raise ValueError(f"upstream shape {upstream.shape} does not match output {x.shape}")
    r_h, r_l, g_f, g_o = (float(v) for v in a)
    low, high = split if split is not None else bands(x, r_h, r_l)
    axes = (0, 1)
    return {
        "w_low": g_o * np.sum(upstream * low, axis=axes),
        "w_high": g_o * np.sum(upstream * high, axis=axes),
        "s": g_f * np.sum(upstream * x, axis=axes),
        "b": g_f * np.sum(upstream, axis=axes),
    }


def l1(u, v) -> float:
    return float(np.mean(np.abs(np.asarray(u) - np.asarray(v))))


def l1_grad(u, v) -> np.ndarray:
    """d/du of mean|u - v|; linear within ``L1_DELTA`` of zero, exact sign elsewhere."""
    d = np.asarray(u) - np.asarray(v)
    g = np.where(np.abs(d) > L1_DELTA, np.sign(d), d / L1_DELTA)
    return g / d.size


@dataclass
class Candidate:
    action: np.ndarray
    output: np.ndarray
    logprob_old: float
    reward: Optional[RewardBreakdown] = None

    @property
    def clamped(self) -> np.ndarray:
        return clamp01(self.output)
