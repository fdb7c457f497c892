"""Synthetic corpus, degradations, image files and hard-sample curation."""

from __future__ import annotations

import dataclasses
import json
import logging
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from scipy import ndimage

from .imgcore import as_image, clamp01
from .rewards import NOISE_LEVELS, Degradation, Kind

log = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.json"
MANIFEST_VERSION = 1
MIN_CORPUS_SIZE = 32



@dataclass(frozen=True)
class DegradeParams:
    """Ranges the synthetic degradations draw from (uniform unless noted)."""

    rain_angle_deg: tuple = (70.0, 110.0)
    rain_length_px: tuple = (8, 24)
    rain_intensity: tuple = (0.2, 0.6)
    rain_density: float = 0.006  # streaks per pixel
    haze_airlight: tuple = (0.7, 0.95)
    haze_transmission: tuple = (0.3, 0.8)
    blur_sigma: tuple = (1.0, 2.5)
    lowlight_scale: tuple = (0.1, 0.4)
    lowlight_gamma: tuple = (1.5, 2.5)
    lowlight_noise: float = 5.0 / 255.0

    def __post_init__(self):
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if isinstance(v, (list, tuple)):
                if len(v) != 2 or not v[0] <= v[1]:
                    raise ValueError(f"{f.name} must be an ordered (low, high) pair, got {v!r}")
                object.__setattr__(self, f.name, (v[0], v[1]))
            elif v < 0:
                raise ValueError(f"{f.name} must be non-negative")

    @classmethod
    def from_dict(cls, obj: dict) -> "DegradeParams":
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in obj.items()})


DEFAULT_DEGRADE = DegradeParams()


class ImageFormatError(ValueError):
    pass


# --- clean scenes ------------------------------------------------------------


def _smooth_gradient(rng, size):
    yy, xx = np.mgrid[0:size, 0:size] / (size - 1)
    theta = rng.uniform(0, 2 * np.pi)
    t = np.cos(theta) * xx + np.sin(theta) * yy
    t = (t - t.min()) / max(t.max() - t.min(), 1e-9)
    c0 = rng.uniform(0.15, 0.85, 3)
    c1 = rng.uniform(0.15, 0.85, 3)
    return c0 + (c1 - c0) * t[:, :, None]


def _checkerboard(rng, size):
    period = int(rng.integers(3, 9))
    yy, xx = np.mgrid[0:size, 0:size]
    board = ((yy // period + xx // period) % 2).astype(np.float64)
    tint = rng.uniform(0.5, 1.0, 3)
    return (board - 0.5)[:, :, None] * tint


def _texture(rng, size):
    noise = rng.normal(size=(size, size, 3))
    sigma = rng.uniform(0.8, 2.5)
    tex = ndimage.gaussian_filter(noise, sigma=(sigma, sigma, 0), mode="wrap")
    return tex / max(tex.std(), 1e-9)


def gen_clean_one(rng: np.random.Generator, size: int) -> np.ndarray:
    img = _smooth_gradient(rng, size)
    if rng.random() < 0.6:
        img = img + rng.uniform(0.08, 0.25) * _checkerboard(rng, size)
    img = img + rng.uniform(0.04, 0.12) * _texture(rng, size)
    for _ in range(int(rng.integers(2, 6))):
        h, w = rng.integers(size // 8, size // 2, size=2)
        i, j = rng.integers(0, size - h), rng.integers(0, size - w)
        alpha = rng.uniform(0.5, 1.0)
        color = rng.uniform(0.05, 0.95, 3)
        img[i : i + h, j : j + w] = (1 - alpha) * img[i : i + h, j : j + w] + alpha * color
    return clamp01(img)


def gen_clean(n: int, size: int, seed: int) -> list:
    """``n`` procedural RGB scenes of ``size x size`` pixels."""
    if size < MIN_CORPUS_SIZE:
        raise ValueError(f"size must be >= {MIN_CORPUS_SIZE}, got {size}")
    rng = np.random.default_rng(seed)
    return [gen_clean_one(rng, size) for _ in range(n)]


# --- degradations ------------------------------------------------------------


def _rain_layer(rng, h, w, p: DegradeParams):
    layer = np.zeros((h, w))
    n = max(1, int(round(p.rain_density * h * w)))
    for _ in range(n):
        ang = np.deg2rad(rng.uniform(*p.rain_angle_deg))
        length = int(rng.integers(p.rain_length_px[0], p.rain_length_px[1] + 1))
        inten = rng.uniform(*p.rain_intensity)
        i0, j0 = rng.uniform(0, h), rng.uniform(0, w)
        # image rows grow downwards; the angle is measured from the horizontal
        steps = np.arange(length * 2) / 2.0
        ii = np.round(i0 + steps * np.sin(ang)).astype(int) % h
        jj = np.round(j0 + steps * np.cos(ang)).astype(int) % w
        layer[ii, jj] = np.maximum(layer[ii, jj], inten)
    return layer


def _smooth_field(rng, h, w, lo, hi):
    f = ndimage.gaussian_filter(rng.normal(size=(h, w)), sigma=max(h, w) / 6.0, mode="wrap")
    f = (f - f.min()) / max(f.max() - f.min(), 1e-12)
    return lo + (hi - lo) * f


def degrade(clean, degradation: Degradation, seed: int, params: DegradeParams = DEFAULT_DEGRADE) -> np.ndarray:
    """Apply one synthetic degradation; the result is clamped to [0, 1]."""
    img = clamp01(as_image(clean, "clean"))
    rng = np.random.default_rng(seed)
    h, w, _ = img.shape
    kind = degradation.kind
    if kind is Kind.DENOISE:
        out = img + rng.normal(0.0, degradation.sigma / 255.0, size=img.shape)
    elif kind is Kind.DERAIN:
        out = img + _rain_layer(rng, h, w, params)[:, :, None]
    elif kind is Kind.DEHAZE:
        airlight = rng.uniform(*params.haze_airlight)
        t = _smooth_field(rng, h, w, *params.haze_transmission)[:, :, None]
        out = img * t + airlight * (1.0 - t)
    elif kind is Kind.DEBLUR:
        s = rng.uniform(*params.blur_sigma)
        out = ndimage.gaussian_filter(img, sigma=(s, s, 0), mode="reflect")
    elif kind is Kind.LOWLIGHT:
        scale = rng.uniform(*params.lowlight_scale)
        gamma = rng.uniform(*params.lowlight_gamma)
        out = (img * scale) ** gamma + rng.normal(0.0, params.lowlight_noise, size=img.shape)
    else:  # pragma: no cover - Kind is exhaustive
        raise ValueError(f"unknown degradation {kind}")
    return clamp01(out)


# --- image files ---------------------------------------------------------------


def to_u8(img) -> np.ndarray:
    """Round half up to 8 bits."""
    return np.floor(np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def _read_ppm(data: bytes, path) -> np.ndarray:
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ImageFormatError(f"{path}: truncated PPM header")
        tokens.append(data[start:pos])
    magic, w, h, maxval = tokens
    if magic not in (b"P6", b"P5"):
        raise ImageFormatError(f"{path}: unsupported PNM magic {magic!r}")
    try:
        w, h, maxval = int(w), int(h), int(maxval)
    except ValueError as exc:
        raise ImageFormatError(f"{path}: malformed PPM header") from exc
    if maxval != 255:
        raise ImageFormatError(f"{path}: unsupported bit depth (maxval {maxval})")
    pos += 1  # single whitespace after maxval
    c = 3 if magic == b"P6" else 1
    need = w * h * c
    body = data[pos : pos + need]
    if len(body) != need:
        raise ImageFormatError(f"{path}: truncated PPM body ({len(body)} of {need} bytes)")
    return np.frombuffer(body, dtype=np.uint8).reshape(h, w, c)


def _write_ppm(path, u8: np.ndarray) -> None:
    c = u8.shape[2]
    magic = b"P6" if c == 3 else b"P5"
    header = magic + f"\n{u8.shape[1]} {u8.shape[0]}\n255\n".encode()
    Path(path).write_bytes(header + np.ascontiguousarray(u8).tobytes())


def load_image(path) -> np.ndarray:
    """Read an 8-bit PNG or binary PPM/PGM as a float image (v / 255)."""
    path = Path(path)
    data = path.read_bytes()
    if data[:2] in (b"P6", b"P5"):
        u8 = _read_ppm(data, path)
    else:
        from PIL import Image, UnidentifiedImageError
        import io

        try:
            with Image.open(io.BytesIO(data)) as im:
                if im.mode not in ("RGB", "L"):
                    raise ImageFormatError(f"{path}: unsupported image mode {im.mode!r} (need 8-bit RGB or L)")
                im.load()
                u8 = np.asarray(im, dtype=np.uint8)
        except ImageFormatError:
            raise
        except (UnidentifiedImageError, OSError, SyntaxError, ValueError) as exc:
            raise ImageFormatError(f"{path}: cannot decode image: {exc}") from exc
        if u8.ndim == 2:
            u8 = u8[:, :, None]
    return u8.astype(np.float64) / 255.0


def save_image(path, img) -> None:
    """Write ``img`` as 8-bit PNG, or PPM/PGM for ``.ppm``/``.pgm`` suffixes."""
    path = Path(path)
    u8 = to_u8(as_image(img))
    if path.suffix.lower() in (".ppm", ".pgm"):
        _write_ppm(path, u8)
        return
    from PIL import Image

    arr = u8[:, :, 0] if u8.shape[2] == 1 else u8
    Image.fromarray(arr).save(path, format="PNG")


# --- records and manifest -------------------------------------------------------


@dataclass
class SampleRecord:
    id: str
    kind: str
    sigma: Optional[int]
    degraded: str
    truth: str
    baseline_reward: Optional[float] = None
    selected: bool = False

    @property
    def degradation(self) -> Degradation:
        return Degradation(Kind(self.kind), self.sigma)


@dataclass
class CorpusManifest:
    version: int
    seed: int
    records: list
    counts: dict = field(default_factory=dict)
    ratio: Optional[float] = None

    def to_json(self) -> dict:
        return {
            "version": self.version,
            "seed": self.seed,
            "records": [dataclasses.asdict(r) for r in self.records],
            "counts": self.counts,
            "ratio": self.ratio,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "CorpusManifest":
        if obj.get("version") != MANIFEST_VERSION:
            raise ValueError(f"unsupported manifest version {obj.get('version')}")
        return cls(
            version=obj["version"],
            seed=obj["seed"],
            records=[SampleRecord(**r) for r in obj["records"]],
            counts=obj.get("counts", {}),
            ratio=obj.get("ratio"),
        )


def kind_counts(records) -> dict:
    counts = {k.value: {"total": 0, "selected": 0} for k in Kind}
    for r in records:
        counts[r.kind]["total"] += 1
        counts[r.kind]["selected"] += int(r.selected)
    return {k: v for k, v in counts.items() if v["total"]}


def write_manifest(root, manifest: CorpusManifest) -> Path:
    """Atomically (re)write ``root/manifest.json``."""
    root = Path(root)
    path = root / MANIFEST_NAME
    tmp = root / (MANIFEST_NAME + ".tmp")
    tmp.write_text(json.dumps(manifest.to_json(), indent=2, sort_keys=True) + "\n")
    os.replace(tmp, path)
    return path


def read_manifest(root) -> CorpusManifest:
    path = Path(root) / MANIFEST_NAME
    if not path.exists():
        raise FileNotFoundError(f"no manifest at {path}")
    return CorpusManifest.from_json(json.loads(path.read_text()))


def degradation_for(kind: Kind, index: int) -> Degradation:
    if kind is Kind.DENOISE:
        return Degradation(kind, NOISE_LEVELS[index % len(NOISE_LEVELS)])
    return Degradation(kind)


def synthesize(
    root, per_kind: int, size: int, seed: int, params: DegradeParams = DEFAULT_DEGRADE
) -> CorpusManifest:
    """Write clean/degraded pairs for every kind under ``root/{kind}/``."""
    if per_kind < 1:
        raise ValueError("per_kind must be >= 1")
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    records = []
    for ki, kind in enumerate(Kind):
        clean = gen_clean(per_kind, size, seed * 1000 + ki)
        (root / kind.value).mkdir(exist_ok=True)
        for i, img in enumerate(clean):
            deg = degradation_for(kind, i)
            sid = f"{kind.value}_{i:04d}"
            degraded = degrade(img, deg, seed * 1_000_003 + ki * 10_007 + i, params)
            dpath = f"{kind.value}/{sid}_deg.png"
            tpath = f"{kind.value}/{sid}_gt.png"
            save_image(root / dpath, degraded)
            save_image(root / tpath, img)
            records.append(SampleRecord(sid, kind.value, deg.sigma, dpath, tpath))
    manifest = CorpusManifest(MANIFEST_VERSION, seed, records, kind_counts(records))
    write_manifest(root, manifest)
    return manifest


def load_pair(root, rec: SampleRecord) -> tuple[np.ndarray, np.ndarray]:
    root = Path(root)
    return load_image(root / rec.degraded), load_image(root / rec.truth)


# --- curation --------------------------------------------------------------------


def evaluate_baseline(records, root, policy_params, backbone_params, reward_model) -> list:
    """Score each record by the combined reward of its deterministic restoration."""
    from .backbone import restore_deterministic

    out = []
    for rec in records:
        try:
            x, t = load_pair(root, rec)
            y = restore_deterministic(x, backbone_params, policy_params)
            score = reward_model(rec.degradation, x, clamp01(y), t).combined
        except Exception as exc:  # noqa: BLE001 - record is tagged, not fatal
            log.warning("baseline evaluation failed for %s: %s; scoring 0", rec.id, exc)
            score = 0.0
        out.append(dataclasses.replace(rec, baseline_reward=float(score)))
    return out


def mine_hard(manifest: CorpusManifest, ratio: float = 0.3, stratified: bool = True) -> CorpusManifest:
    """Flag the lowest-scoring ``ceil(ratio * count)`` records.

    Stratified mode selects per degradation kind; otherwise over the whole
    corpus.  Ties are broken by id.
    """
    if not 0.0 < ratio <= 1.0:
        raise ValueError(f"ratio must lie in (0, 1], got {ratio}")
    recs = manifest.records
    if any(r.baseline_reward is None for r in recs):
        raise ValueError("all records must be scored before mining")
    groups: dict = {}
    for r in recs:
        groups.setdefault(r.kind if stratified else "*", []).append(r)
    chosen = set()
    for members in groups.values():
        ranked = sorted(members, key=lambda r: (r.baseline_reward, r.id))
        # round first: 0.3 * 10 is 3.0000000000000004 in binary floating point
        k = math.ceil(round(ratio * len(ranked), 9))
        chosen.update(r.id for r in ranked[:k])
    new = [dataclasses.replace(r, selected=r.id in chosen) for r in recs]
    return CorpusManifest(manifest.version, manifest.seed, new, kind_counts(new), ratio)
