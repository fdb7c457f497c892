"""Expert-preference reward: prompt, verdict parsing, mock and HTTP judges.

Wire protocol of :class:`HttpJudge` (defined here, not by any upstream
service): ``POST <endpoint>`` with JSON body
``{"prompt": str, "images": [b64png(degraded), b64png(restored), b64png(reference)]}``.
The response body is treated as opaque text and fed to :func:`parse_verdict`.
A JSON response of the form ``{"text": ...}`` is unwrapped first.
"""

from __future__ import annotations

import base64
import io
import json
import logging
import re
import threading
import urllib.error
import urllib.request
from dataclasses import dataclass

import numpy as np

from .imgcore import clamp01, psnr

log = logging.getLogger(__name__)

ENDPOINT_ENV = "GRPO_RESTORE_JUDGE_URL"

PROMPT = """\
You are an image-restoration expert. You will be given three images:
1. The degraded input that suffers from a certain type of degradation.
2. The restored output generated by a model.
3. The clean ground-truth reference.

Task:
1. Identify the most plausible degradation type of the input image. Consider categories such as denoising (0/1/2, different noise levels), deraining (3), dehazing (4), deblurring (5), or low-light enhancement (6). Briefly justify your reasoning.
2. Compare the restored output against the ground truth with respect to the identified degradation type. Pay attention to:
   - Noise or streak removal quality for denoising/deraining.
   - Contrast and haze removal for dehazing.
   - Sharpness recovery for deblurring.
   - Exposure and color constancy for low-light enhancement.
3. Highlight specific improvements and any remaining artifacts.
4. Provide a final quality score from 1 to 5, where:
   - 1: severe artifacts or almost no improvement,
   - 2: minor improvement but significant issues remain,
   - 3: moderate improvement with noticeable gaps,
   - 4: strong restoration with only small flaws,
   - 5: near-perfect restoration indistinguishable from ground truth.
Respond in the following XML-style format:
<Assessment>
  <Degradation>
    [type and reasoning]
  </Degradation>
  <Analysis>
    [detailed comparison]
  </Analysis>
  <Score>X</Score>
</Assessment>
"""

MOCK_THRESHOLDS = (20.0, 25.0, 30.0, 35.0)


class ParseError(ValueError):
    pass


class RangeError(ValueError):
    pass


@dataclass(frozen=True)
class JudgeRequest:
    degraded: np.ndarray
    restored: np.ndarray
    reference: np.ndarray
    prompt: str = PROMPT


@dataclass(frozen=True)
class JudgeVerdict:
    degradation_label: int
    analysis: str
    score: int
    fallback: bool = False

    @property
    def rescaled(self) -> float:
        return (self.score - 1) / 4.0


def build_prompt() -> str:
    return PROMPT


_SCORE_RE = re.compile(r"<Score>\s*([+-]?\d+)\s*</Score>")
_SCORE_OPEN_RE = re.compile(r"<Score>")
_DEG_RE = re.compile(r"<Degradation>(.*?)</Degradation>", re.S)
_ANALYSIS_RE = re.compile(r"<Analysis>(.*?)</Analysis>", re.S)
_LABEL_RE = re.compile(r"(?<![\d.])([0-6])(?![\d.])")


def parse_verdict(response: str) -> JudgeVerdict:
    """Extract label, analysis and score from a judge reply.

    The first well-formed ``<Score>N</Score>`` wins.  A ``<Score>`` tag that
    is not closed around an integer, with no well-formed one before it, is
    a :class:`ParseError`.
    """
    m = _SCORE_RE.search(response)
    opener = _SCORE_OPEN_RE.search(response)
    if m is None or (opener is not None and opener.start() < m.start()):
        raise ParseError("no well-formed <Score> tag in judge response")
    score = int(m.group(1))
    if not 1 <= score <= 5:
        raise RangeError(f"judge score {score} outside 1..5")
    label = -1
    deg = _DEG_RE.search(response)
    if deg is not None:
        lm = _LABEL_RE.search(deg.group(1))
        if lm is not None:
            label = int(lm.group(1))
    am = _ANALYSIS_RE.search(response)
    analysis = am.group(1).strip() if am else ""
    return JudgeVerdict(label, analysis, score)


def format_verdict(label: int, score: int, analysis: str = "", reasoning: str = "") -> str:
    """Render a verdict in the reply schema the prompt asks for."""
    deg = f"{label} {reasoning}".strip() if label >= 0 else reasoning
    return (
        "<Assessment>\n"
        f"  <Degradation>\n    {deg}\n  </Degradation>\n"
        f"  <Analysis>\n    {analysis}\n  </Analysis>\n"
        f"  <Score>{score}</Score>\n"
        "</Assessment>\n"
    )


def mock_score(psnr_db: float) -> int:
    return 1 + sum(psnr_db >= th for th in MOCK_THRESHOLDS)


def mock_judge(y, t) -> JudgeVerdict:
    """Deterministic stand-in: one point per PSNR threshold cleared."""
    value = psnr(clamp01(y), clamp01(t))
    return JudgeVerdict(-1, f"mock judge: psnr {value:.3f} dB", mock_score(value))


def png_b64(img) -> str:
    from PIL import Image

    arr = np.asarray(img, dtype=np.float64)
    if arr.ndim == 3 and arr.shape[2] == 1:
        arr = arr[:, :, 0]
    u8 = np.floor(np.clip(arr, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)
    buf = io.BytesIO()
    Image.fromarray(u8).save(buf, format="PNG")
    return base64.b64encode(buf.getvalue()).decode("ascii")


def request_body(req: JudgeRequest) -> bytes:
    images = [png_b64(req.degraded), png_b64(req.restored), png_b64(req.reference)]
    return json.dumps({"prompt": req.prompt, "images": images}).encode("utf-8")


def _response_text(raw: bytes) -> str:
    text = raw.decode("utf-8", errors="replace")
    try:
        obj = json.loads(text)
    except ValueError:
        return text
    if isinstance(obj, dict) and isinstance(obj.get("text"), str):
        return obj["text"]
    return text


class HttpJudge:
    """Serialised HTTP client with mock fallback.

    One instance owns the connection; concurrent callers queue on a lock.
    """

    def __init__(self, endpoint: str, timeout: float = 10.0, retries: int = 2):
        if retries < 1:
            raise ValueError("retries must be >= 1")
        self.endpoint = endpoint
        self.timeout = timeout
        self.retries = retries
        self.fallbacks = 0
        self._lock = threading.Lock()

    def _post(self, body: bytes) -> str:
        req = urllib.request.Request(
            self.endpoint, data=body, headers={"Content-Type": "application/json"}, method="POST"
        )
        with urllib.request.urlopen(req, timeout=self.timeout) as resp:
            return _response_text(resp.read())

    def __call__(self, req: JudgeRequest) -> JudgeVerdict:
        body = request_body(req)
        last: Exception | None = None
        with self._lock:
            for attempt in range(self.retries):
                try:
                    return parse_verdict(self._post(body))
                except (OSError, urllib.error.URLError, ValueError, TimeoutError) as exc:
                    last = exc
                    log.debug("judge attempt %d failed: %s", attempt + 1, exc)
            self.fallbacks += 1
        log.warning("judge at %s unavailable after %d attempts (%s); using mock", self.endpoint, self.retries, last)
        v = mock_judge(req.restored, req.reference)
        return JudgeVerdict(v.degradation_label, v.analysis, v.score, fallback=True)


def http_judge(endpoint: str, req: JudgeRequest, timeout: float = 10.0, retries: int = 2) -> JudgeVerdict:
    return HttpJudge(endpoint, timeout, retries)(req)


class MockJudge:
    """Reward-model adapter around :func:`mock_judge`."""

    fallbacks = 0
    name = "mock"

    def __call__(self, degraded, restored, reference) -> float:
        return mock_judge(restored, reference).rescaled


class RemoteJudge:
    """Reward-model adapter around :class:`HttpJudge`."""

    name = "http"

    def __init__(self, client: HttpJudge):
        self.client = client

    @property
    def fallbacks(self) -> int:
        return self.client.fallbacks

    def __call__(self, degraded, restored, reference) -> float:
        return self.client(JudgeRequest(degraded, restored, reference)).rescaled

