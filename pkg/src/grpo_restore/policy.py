"""Stochastic Beta policy over the four restoration controls.

Two small heads read the same pooled feature vector of the degraded input:
the rate head emits Beta parameters for the mask ratios (r_h, r_l), the
fuse head for the fusion gains (g_f, g_o).  Each head is
``8 -> 16 (tanh) -> 4`` with a clamped softplus on the output, laid out as
``(alpha_1, beta_1, alpha_2, beta_2)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from types import MappingProxyType
from typing import Mapping

import numpy as np

from .imgcore import as_image, clamp01, fft2, lowfreq_mask, luminance, sobel
from .special import betaln, digamma, trigamma

ACTION_NAMES = ("r_h", "r_l", "g_f", "g_o")
HEADS = ("rate", "fuse")
N_FEATURES = 8
HIDDEN = 16
HEAD_OUT = 4

PARAM_FLOOR = 1e-2
PARAM_CAP = 50.0
ACTION_EPS = 1e-4
FEATURE_CAP = 4.0
FEATURE_LOWFREQ_RATIO = 0.25
INIT_CONCENTRATION = 2.0

PolicyParams = dict  # name -> ndarray, e.g. "rate.w1"


def softplus(z):
    return np.logaddexp(0.0, z)


def inv_softplus(v: float) -> float:
    return float(np.log(np.expm1(v)))


def sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def init_params(rng: np.random.Generator) -> PolicyParams:
    """Hidden layer uniform in +-1/sqrt(8); output layer zero with bias at Beta(2, 2)."""
    bound = 1.0 / np.sqrt(N_FEATURES)
    params = {}
    for head in HEADS:
        params[f"{head}.w1"] = rng.uniform(-bound, bound, size=(HIDDEN, N_FEATURES))
        params[f"{head}.b1"] = np.zeros(HIDDEN)
        params[f"{head}.w2"] = np.zeros((HEAD_OUT, HIDDEN))
        params[f"{head}.b2"] = np.full(HEAD_OUT, inv_softplus(INIT_CONCENTRATION))
    return params


def zeros_like_params(params: PolicyParams) -> PolicyParams:
    return {k: np.zeros_like(v) for k, v in params.items()}


@dataclass(frozen=True)
class PolicySnapshot:
    """Read-only copy of the policy parameters, tagged ``old`` or ``reference``."""

    params: Mapping[str, np.ndarray]
    role: str

    @classmethod
    def capture(cls, params: PolicyParams, role: str) -> "PolicySnapshot":
        if role not in ("old", "reference"):
            raise ValueError(f"unknown snapshot role {role!r}")
        frozen = {}
        for k, v in params.items():
            arr = np.array(v, dtype=np.float64, copy=True)
            arr.setflags(write=False)
            frozen[k] = arr
        return cls(MappingProxyType(frozen), role)


def extract_features(x) -> np.ndarray:
    """Pooled 8-vector describing the input image.

    mean/std luminance, mean |Gx|, mean |Gy|, mean gradient magnitude,
    low-frequency energy fraction, |mean R - mean B|, mean per-pixel
    saturation (max - min over channels).
    """
    img = clamp01(as_image(x))
    lum = luminance(img)
    g = sobel(lum)
    spec = fft2(lum)
    low, _ = lowfreq_mask(spec, FEATURE_LOWFREQ_RATIO, FEATURE_LOWFREQ_RATIO)
    total = float(np.sum(np.abs(spec) ** 2))
    ratio = float(np.sum(np.abs(low) ** 2)) / total if total > 0 else 1.0
    if img.shape[2] == 3:
        rb = abs(float(img[:, :, 0].mean()) - float(img[:, :, 2].mean()))
        sat = float((img.max(axis=2) - img.min(axis=2)).mean())
    else:
        rb = sat = 0.0
    feats = np.array(
        [
            lum.mean(),
            lum.std(),
            np.abs(g.gx).mean(),
            np.abs(g.gy).mean(),
            g.magnitude.mean(),
            ratio,
            rb,
            sat,
        ]
    )
    return np.clip(feats, 0.0, FEATURE_CAP)


@dataclass
class BetaHeadOutput:
    alpha: np.ndarray
    beta: np.ndarray
    cache: dict = field(default_factory=dict, repr=False)


def _head(params: Mapping[str, np.ndarray], head: str, f: np.ndarray):
    pre = params[f"{head}.w1"] @ f + params[f"{head}.b1"]
    h = np.tanh(pre)
    z = params[f"{head}.w2"] @ h + params[f"{head}.b2"]
    return h, z


def head_forward(params: Mapping[str, np.ndarray], f) -> BetaHeadOutput:
    """Beta parameters for all four actions from a feature vector."""
    f = np.asarray(f, dtype=np.float64)
    if f.shape != (N_FEATURES,) or not np.all(np.isfinite(f)):
        raise ValueError(f"features must be a finite {N_FEATURES}-vector")
    alpha = np.empty(4)
    beta = np.empty(4)
    cache = {"f": f}
    for i, head in enumerate(HEADS):
        h, z = _head(params, head, f)
        if not (np.all(np.isfinite(h)) and np.all(np.isfinite(z))):
            raise FloatingPointError(f"non-finite activation in {head} head")
        p = np.clip(softplus(z), PARAM_FLOOR, PARAM_CAP)
        alpha[2 * i : 2 * i + 2] = p[0::2]
        beta[2 * i : 2 * i + 2] = p[1::2]
        cache[head] = (h, z)
    return BetaHeadOutput(alpha, beta, cache)


def policy_forward(params, x) -> BetaHeadOutput:
    return head_forward(params, extract_features(x))


def head_backward(params: Mapping[str, np.ndarray], out: BetaHeadOutput, d_alpha, d_beta) -> PolicyParams:
    """Chain d(loss)/d(alpha, beta) back to the head weights.

    Clamp-saturated parameters pass no gradient.
    """
    d_alpha = np.asarray(d_alpha, dtype=np.float64)
    d_beta = np.asarray(d_beta, dtype=np.float64)
    f = out.cache["f"]
    grads = {}
    for i, head in enumerate(HEADS):
        h, z = out.cache[head]
        dp = np.empty(HEAD_OUT)
        dp[0::2] = d_alpha[2 * i : 2 * i + 2]
        dp[1::2] = d_beta[2 * i : 2 * i + 2]
        sp = softplus(z)
        live = (sp > PARAM_FLOOR) & (sp < PARAM_CAP)
        dz = np.where(live, dp * sigmoid(z), 0.0)
        grads[f"{head}.w2"] = np.outer(dz, h)
        grads[f"{head}.b2"] = dz
        dpre = (params[f"{head}.w2"].T @ dz) * (1.0 - h * h)
        grads[f"{head}.w1"] = np.outer(dpre, f)
        grads[f"{head}.b1"] = dpre
    return grads


def clamp_action(a) -> np.ndarray:
    return np.clip(np.asarray(a, dtype=np.float64), ACTION_EPS, 1.0 - ACTION_EPS)


def beta_sample(alpha, beta, rng: np.random.Generator) -> np.ndarray:
    """Draw Beta variates (numpy's Johnk / gamma-ratio sampler), clamped."""
    return clamp_action(rng.beta(alpha, beta))


def sample_action(out: BetaHeadOutput, rng: np.random.Generator) -> np.ndarray:
    return beta_sample(out.alpha, out.beta, rng)


def deterministic_action(out: BetaHeadOutput) -> np.ndarray:
    """Beta means."""
    return out.alpha / (out.alpha + out.beta)


def joint_logprob(out: BetaHeadOutput, a):
    """Log-density of one action (shape ``(4,)``, returns a float) or of a
    batch of actions (shape ``(n, 4)``, returns an ``(n,)`` array)."""
    a = np.asarray(a, dtype=np.float64)
    if a.shape[-1:] != (4,) or a.ndim > 2:
        raise ValueError(f"actions must have shape (4,) or (n, 4), got {a.shape}")
    if np.any(a <= 0) or np.any(a >= 1):
        raise ValueError("action components must lie strictly inside (0, 1)")
    al, be = out.alpha, out.beta
    lp = np.sum((al - 1.0) * np.log(a) + (be - 1.0) * np.log1p(-a), axis=-1) - np.sum(betaln(al, be))
    if not np.all(np.isfinite(lp)):
        raise FloatingPointError("non-finite log-probability")
    return float(lp) if lp.ndim == 0 else lp


def entropy(out: BetaHeadOutput) -> float:
    al, be = out.alpha, out.beta
    s = al + be
    return float(
        np.sum(betaln(al, be) - (al - 1.0) * digamma(al) - (be - 1.0) * digamma(be) + (s - 2.0) * digamma(s))
    )


def logprob_grads(out: BetaHeadOutput, a) -> tuple[np.ndarray, np.ndarray]:
    """d log pi / d alpha_k and d log pi / d beta_k."""
    a = np.asarray(a, dtype=np.float64)
    psi_s = digamma(out.alpha + out.beta)
    return np.log(a) - digamma(out.alpha) + psi_s, np.log1p(-a) - digamma(out.beta) + psi_s


def entropy_grads(out: BetaHeadOutput) -> tuple[np.ndarray, np.ndarray]:
    al, be = out.alpha, out.beta
    s = al + be
    common = (s - 2.0) * trigamma(s)
    return common - (al - 1.0) * trigamma(al), common - (be - 1.0) * trigamma(be)


def copy_params(params) -> PolicyParams:
    return {k: np.array(v, dtype=np.float64, copy=True) for k, v in params.items()}


def params_to_json(params) -> dict:
    return {k: {"shape": list(np.shape(v)), "data": np.asarray(v).ravel().tolist()} for k, v in params.items()}


def params_from_json(obj: dict, expected=None) -> PolicyParams:
    out = {}
    for k, entry in obj.items():
        arr = np.asarray(entry["data"], dtype=np.float64).reshape(entry["shape"])
        out[k] = arr
    if expected is not None:
        for k, v in expected.items():
            if k not in out or out[k].shape != np.shape(v):
                raise ValueError(f"parameter {k!r} missing or mis-shaped in checkpoint")
    return out

