"""Composite restoration reward: generic quality, expert judge and task shaping."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Callable, Mapping, Optional, Protocol

import numpy as np

from . import imgcore
from .imgcore import as_image, clamp01, luminance, sobel

EPS = 1e-6


class Kind(str, enum.Enum):
    DENOISE = "denoise"
    DERAIN = "derain"
    DEHAZE = "dehaze"
    DEBLUR = "deblur"
    LOWLIGHT = "lowlight"


NOISE_LEVELS = (15, 25, 50)


@dataclass(frozen=True)
class Degradation:
    """A degradation kind; ``sigma`` is the noise level (0-255 scale) for denoising."""

    kind: Kind
    sigma: Optional[int] = None

    def __post_init__(self):
        kind = Kind(self.kind)
        object.__setattr__(self, "kind", kind)
        if kind is Kind.DENOISE:
            if self.sigma not in NOISE_LEVELS:
                raise ValueError(f"denoise sigma must be one of {NOISE_LEVELS}, got {self.sigma}")
        elif self.sigma is not None:
            raise ValueError(f"{kind.value} takes no sigma")

    @property
    def label(self) -> int:
        """Category index used by the judge prompt (0-6)."""
        if self.kind is Kind.DENOISE:
            return NOISE_LEVELS.index(self.sigma)
        return {Kind.DERAIN: 3, Kind.DEHAZE: 4, Kind.DEBLUR: 5, Kind.LOWLIGHT: 6}[self.kind]


class PerceptualScorer(Protocol):
    """Pluggable learned metric (CLIP similarity, LPIPS, aesthetics).

    ``name`` must be one of the keys of ``RewardWeights.gen``; the call
    returns a score in [0, 1].  ``reference`` is None for no-reference
    scorers.
    """

    name: str

    def __call__(self, restored: np.ndarray, reference: Optional[np.ndarray]) -> float: ...


class ScorerError(RuntimeError):
    def __init__(self, name: str, cause: BaseException):
        super().__init__(f"perceptual scorer {name!r} failed: {cause}")
        self.name = name


NO_REFERENCE = frozenset({"aes"})


def _default_gen() -> dict[str, float]:
    return {"clip": 0.25, "lpips": 0.25, "aes": 0.15, "psnr": 0.20, "ssim": 0.15}


@dataclass(frozen=True)
class RewardWeights:
    lambda_gen: float = 0.6
    lambda_qwen: float = 0.1
    lambda_task: float = 0.3
    gen: Mapping[str, float] = field(default_factory=_default_gen)
    tau_min: float = 15.0
    tau_max: float = 40.0

    def __post_init__(self):
        total = self.lambda_gen + self.lambda_qwen + self.lambda_task
        if abs(total - 1.0) > 1e-9:
            raise ValueError(f"lambda weights must sum to 1, got {total}")
        if not self.tau_max > self.tau_min:
            raise ValueError("tau_max must exceed tau_min")

    def gen_weights(self, enabled) -> dict[str, float]:
        """Generic-blend weights restricted to ``enabled`` and renormalised."""
        names = [n for n in self.gen if n in enabled]
        total = sum(self.gen[n] for n in names)
        if total <= 0:
            raise ValueError("no enabled generic metric carries weight")
        return {n: self.gen[n] / total for n in names}


@dataclass
class RewardBreakdown:
    r_gen: float
    r_qwen: float
    r_task: float
    combined: float
    details: dict[str, float] = field(default_factory=dict)

    def as_dict(self) -> dict:
        return {"r_gen": self.r_gen, "r_qwen": self.r_qwen, "r_task": self.r_task, **self.details}


def _clip01(v: float) -> float:
    return float(min(max(v, 0.0), 1.0))


def psnr_score(value: float, w: RewardWeights) -> float:
    return _clip01((value - w.tau_min) / (w.tau_max - w.tau_min))


def generic_terms(y, t, scorers=(), w: RewardWeights = RewardWeights()) -> dict[str, float]:
    y = clamp01(as_image(y, "y"))
    t = clamp01(as_image(t, "t"))
    terms = {
        "psnr": psnr_score(imgcore.psnr(y, t), w),
        "ssim": _clip01(imgcore.ssim(y, t)),
    }
    for scorer in scorers:
        if scorer.name not in w.gen:
            raise ValueError(f"unknown scorer slot {scorer.name!r}")
        try:
            val = float(scorer(y, None if scorer.name in NO_REFERENCE else t))
        except Exception as exc:  # noqa: BLE001 - re-raised with the scorer name
            raise ScorerError(scorer.name, exc) from exc
        if not math.isfinite(val):
            raise ScorerError(scorer.name, ValueError(f"non-finite score {val}"))
        terms[scorer.name] = _clip01(val)
    return terms


def r_gen(y, t, scorers=(), w: RewardWeights = RewardWeights(), terms=None) -> float:
    if terms is None:
        terms = generic_terms(y, t, scorers, w)
    weights = w.gen_weights(terms)
    return _clip01(sum(weights[n] * terms[n] for n in weights))


def _lum(img) -> np.ndarray:
    return luminance(clamp01(as_image(img)))


def r_grad(y, t) -> float:
    """Gradient-magnitude consistency with the reference (denoising)."""
    my = sobel(_lum(y)).magnitude
    mt = sobel(_lum(t)).magnitude
    if my.shape != mt.shape:
        raise ValueError(f"dimension mismatch: {my.shape} vs {mt.shape}")
    base = float(mt.mean())
    dev = float(np.abs(my - mt).mean())
    return _clip01(1.0 - dev / (base + EPS))


def r_aniso(y) -> float:
    """Isotropy of the restored image's gradients (deraining)."""
    g = sobel(_lum(y))
    ex = float(np.abs(g.gx).mean())
    ey = float(np.abs(g.gy).mean())
    a = abs(ex - ey) / max(ex + ey, EPS)
    return 1.0 - _clip01(a)


def _closeness(a: float, b: float) -> float:
    return _clip01(min(a / (b + EPS), b / (a + EPS)))


def r_contrast(y, t) -> float:
    """Closeness of luminance standard deviations (dehazing)."""
    return _closeness(float(_lum(y).std()), float(_lum(t).std()))


def r_sharp(y, t) -> float:
    """Closeness of mean gradient magnitudes (deblurring)."""
    return _closeness(float(sobel(_lum(y)).magnitude.mean()), float(sobel(_lum(t)).magnitude.mean()))


def r_lowlight(y, t) -> tuple[float, float]:
    """(exposure, colour) consistency for low-light enhancement."""
    y = clamp01(as_image(y, "y"))
    t = clamp01(as_image(t, "t"))
    d = abs(float(luminance(y).mean()) - float(luminance(t).mean()))
    r_exp = _clip01(1.0 - d / 0.5)
    dc = float(np.abs(y.mean(axis=(0, 1)) - t.mean(axis=(0, 1))).sum())
    r_color = _clip01(1.0 - dc / 0.6)
    return r_exp, r_color


def task_terms(kind, y, t) -> dict[str, float]:
    kind = Kind(kind.kind if isinstance(kind, Degradation) else kind)
    if kind is Kind.DENOISE:
        terms = {"grad": r_grad(y, t)}
        terms["task"] = terms["grad"]
    elif kind is Kind.DERAIN:
        terms = {"aniso": r_aniso(y)}
        terms["task"] = terms["aniso"]
    elif kind is Kind.DEHAZE:
        terms = {"contrast": r_contrast(y, t)}
        terms["task"] = terms["contrast"]
    elif kind is Kind.DEBLUR:
        terms = {"sharp": r_sharp(y, t)}
        terms["task"] = terms["sharp"]
    else:
        r_exp, r_color = r_lowlight(y, t)
        # literal 0.2/0.1 blend, so a perfect low-light restoration tops out at 0.3
        terms = {"exp": r_exp, "color": r_color, "task": 0.2 * r_exp + 0.1 * r_color}
    return terms


def r_task(kind, y, t) -> float:
    return task_terms(kind, y, t)["task"]


def combine(gen: float, qwen: float, task: float, w: RewardWeights = RewardWeights(), details=None) -> RewardBreakdown:
    for label, v in (("r_gen", gen), ("r_qwen", qwen), ("r_task", task)):
        if not math.isfinite(v):
            raise ValueError(f"{label} is not finite: {v}")
    total = w.lambda_gen * gen + w.lambda_qwen * qwen + w.lambda_task * task
    return RewardBreakdown(float(gen), float(qwen), float(task), float(total), dict(details or {}))


JudgeFn = Callable[[np.ndarray, np.ndarray, np.ndarray], float]


class RewardModel:
    """Scores a restored image against its reference.

    ``judge`` maps (degraded, restored, reference) to a rescaled expert
    score in [0, 1].
    """

    def __init__(self, judge: JudgeFn, weights: RewardWeights = RewardWeights(), scorers=()):
        self.judge = judge
        self.weights = weights
        self.scorers = list(scorers)

    def __call__(self, kind, degraded, restored, reference) -> RewardBreakdown:
        y = clamp01(as_image(restored, "restored"))
        t = clamp01(as_image(reference, "reference"))
        gterms = generic_terms(y, t, self.scorers, self.weights)
        gen = r_gen(y, t, w=self.weights, terms=gterms)
        qwen = float(self.judge(degraded, y, t))
        tterms = task_terms(kind, y, t)
        details = {f"gen_{k}": v for k, v in gterms.items()}
        details.update({f"task_{k}": v for k, v in tterms.items() if k != "task"})
        return combine(gen, qwen, tterms["task"], self.weights, details)


def reward_report(sample_id: str, kind, breakdown: RewardBreakdown) -> dict:
    """JSON-ready reward record."""
    kind = kind.kind if isinstance(kind, Degradation) else Kind(kind)
    return {
        "sample_id": sample_id,
        "kind": kind.value,
        "components": breakdown.as_dict(),
        "combined": breakdown.combined,
    }
