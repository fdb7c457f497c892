"""Image mathematics shared by the rewards, the backbone and the policy features.

Images are plain ``float64`` arrays of shape ``(H, W, C)`` with ``C`` in
``{1, 3}``.  Spectra are complex arrays of the same shape with the DC bin
moved to the grid centre (``fftshift`` convention).
"""

from __future__ import annotations

from typing import NamedTuple

import numpy as np

MIN_SIDE = 8
PSNR_CAP = 60.0
SSIM_WINDOW = 8
SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2
MAG_FLOOR = 1e-12

LUMA = np.array([0.299, 0.587, 0.114])


class GradientField(NamedTuple):
    gx: np.ndarray
    gy: np.ndarray
    magnitude: np.ndarray


def as_image(img, name: str = "image") -> np.ndarray:
    """Validate and return ``img`` as a float64 ``(H, W, C)`` array.

    2-D arrays are promoted to a single channel.
    """
    arr = np.asarray(img, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    if arr.ndim != 3:
        raise ValueError(f"{name}: expected (H, W, C) array, got shape {arr.shape}")
    h, w, c = arr.shape
    if c not in (1, 3):
        raise ValueError(f"{name}: channel count must be 1 or 3, got {c}")
    if h < MIN_SIDE or w < MIN_SIDE:
        raise ValueError(f"{name}: image must be at least {MIN_SIDE}x{MIN_SIDE}, got {h}x{w}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name}: non-finite pixel values")
    return arr


def clamp01(img) -> np.ndarray:
    return np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0)


def _same_dims(y: np.ndarray, t: np.ndarray) -> None:
    if y.shape != t.shape:
        raise ValueError(f"dimension mismatch: {y.shape} vs {t.shape}")


def luminance(img) -> np.ndarray:
    """Rec.601 luma as a single-channel image; grayscale passes through."""
    arr = as_image(img)
    if arr.shape[2] == 1:
        return arr
    return (arr @ LUMA)[:, :, None]


def sobel(gray) -> GradientField:
    """3x3 Sobel responses with replicate padding.

    ``gx`` is positive when intensity rises to the right, ``gy`` when it
    rises downwards.
    """
    arr = as_image(gray)
    if arr.shape[2] != 1:
        raise ValueError("sobel expects a single-channel image")
    z = arr[:, :, 0]
    h, w = z.shape
    p = np.pad(z, 1, mode="edge")
    tl, tc, tr = p[0:h, 0:w], p[0:h, 1 : w + 1], p[0:h, 2 : w + 2]
    ml, mr = p[1 : h + 1, 0:w], p[1 : h + 1, 2 : w + 2]
    bl, bc, br = p[2 : h + 2, 0:w], p[2 : h + 2, 1 : w + 1], p[2 : h + 2, 2 : w + 2]
    gx = (tr + 2.0 * mr + br) - (tl + 2.0 * ml + bl)
    gy = (bl + 2.0 * bc + br) - (tl + 2.0 * tc + tr)
    mag = np.sqrt(gx * gx + gy * gy + MAG_FLOOR)
    return GradientField(gx, gy, mag)


def gradient_magnitude(img) -> np.ndarray:
    """Sobel magnitude of the luminance of ``img``."""
    return sobel(luminance(img)).magnitude


def mse(y, t) -> float:
    y = as_image(y, "y")
    t = as_image(t, "t")
    _same_dims(y, t)
    return float(np.mean((y - t) ** 2))


def psnr(y, t) -> float:
    """PSNR in dB for peak 1.0, capped at ``PSNR_CAP``."""
    err = mse(y, t)
    if err <= 0.0:
        return PSNR_CAP
    return float(min(PSNR_CAP, 10.0 * np.log10(1.0 / err)))


def _window_stats(z: np.ndarray, win: int) -> tuple[np.ndarray, np.ndarray]:
    h, w = z.shape
    nh, nw = h // win, w // win
    blocks = z[: nh * win, : nw * win].reshape(nh, win, nw, win).transpose(0, 2, 1, 3)
    blocks = blocks.reshape(nh, nw, win * win)
    return blocks, blocks.mean(axis=-1)


def ssim(y, t) -> float:
    """Mean SSIM over non-overlapping 8x8 windows of the luminance.

    Trailing rows/columns that do not fill a whole window are ignored.
    """
    y = as_image(y, "y")
    t = as_image(t, "t")
    _same_dims(y, t)
    a = luminance(y)[:, :, 0]
    b = luminance(t)[:, :, 0]
    if a.shape[0] < SSIM_WINDOW or a.shape[1] < SSIM_WINDOW:
        raise ValueError("image smaller than one SSIM window")
    ba, mu_a = _window_stats(a, SSIM_WINDOW)
    bb, mu_b = _window_stats(b, SSIM_WINDOW)
    da = ba - mu_a[..., None]
    db = bb - mu_b[..., None]
    var_a = np.mean(da * da, axis=-1)
    var_b = np.mean(db * db, axis=-1)
    cov = np.mean(da * db, axis=-1)
    num = (2.0 * mu_a * mu_b + SSIM_C1) * (2.0 * cov + SSIM_C2)
    den = (mu_a**2 + mu_b**2 + SSIM_C1) * (var_a + var_b + SSIM_C2)
    return float(np.mean(num / den))


def fft2(img) -> np.ndarray:
    """Unnormalised per-channel 2-D DFT with the DC bin centred."""
    arr = np.asarray(img)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    return np.fft.fftshift(np.fft.fft2(arr, axes=(0, 1)), axes=(0, 1))


def ifft2(spec, real: bool = True) -> np.ndarray:
    """Inverse of :func:`fft2` (carries the 1/(HW) factor)."""
    spec = np.asarray(spec)
    out = np.fft.ifft2(np.fft.ifftshift(spec, axes=(0, 1)), axes=(0, 1))
    return out.real if real else out


def _round_half_up(v: float) -> int:
    return int(np.floor(v + 0.5))


def mask_extent(n: int, ratio: float) -> tuple[int, int]:
    """Start/stop indices of the centred low-frequency band along one axis."""
    size = min(n, max(1, _round_half_up(ratio * n)))
    start = n // 2 - size // 2
    return start, start + size


def lowfreq_box(shape: tuple[int, int], r_h: float, r_l: float) -> np.ndarray:
    """Boolean (H, W) mask selecting the centred rectangle of low frequencies."""
    for label, r in (("r_h", r_h), ("r_l", r_l)):
        if not 0.0 < r < 1.0:
            raise ValueError(f"{label} must lie in (0, 1), got {r}")
    h, w = shape
    r0, r1 = mask_extent(h, r_h)
    c0, c1 = mask_extent(w, r_l)
    box = np.zeros((h, w), dtype=bool)
    box[r0:r1, c0:c1] = True
    return box


def lowfreq_mask(spec, r_h: float, r_l: float) -> tuple[np.ndarray, np.ndarray]:
    """Split a centred spectrum into (low, high) with ``low + high == spec``."""
    spec = np.asarray(spec)
    box = lowfreq_box(spec.shape[:2], r_h, r_l)
    if spec.ndim == 3:
        box = box[:, :, None]
    low = np.where(box, spec, 0)
    high = np.where(box, 0, spec)
    return low, high
