"""Visual prompts for action captioning and the clients that send them.

Each segment is shown to a vision-language model as a handful of evenly
sampled frames, with the remaining palm trajectory drawn over each frame.
The model answers with one imperative caption or ``N/A``; accepted captions
are then expanded into a few rephrasings.
"""

from __future__ import annotations

import base64
import hashlib
import io
import json
import logging
import os
import re
import threading
import time
import urllib.error
import urllib.request
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Mapping, Protocol, Sequence

import numpy as np
from PIL import Image

from .geom import CameraIntrinsics, project_points
from .segment import Segment, normalize_caption
from .tracks import PALM_OFFSET, CameraTrackFrame, HandTrack, palm_positions, world_to_camera

log = logging.getLogger(__name__)

NA = "N/A"
PURPLE = np.array([68.0, 1.0, 84.0])
YELLOW = np.array([253.0, 231.0, 37.0])

# Paraphrase of the production prompt; the exact wording is not published.
SYSTEM_PROMPT = (
    "You will see frames sampled in order from a first-person video. A colored curve on each frame "
    "shows where the target hand's palm moves from that frame until the end of the clip, running from "
    "purple (now) to yellow (end). Describe the action performed by the target hand as one short "
    "imperative sentence, for example 'pick up the cup from the table'. Use the trajectory to decide "
    "the motion. If the hand performs no meaningful action, or the action cannot be told from the "
    "frames, answer exactly 'N/A'."
)
USER_PROMPT = "Describe the action of the target hand."
REPHRASE_PROMPT = (
    "Rewrite the instruction below in {n} different ways while preserving the original meaning. "
    "Keep each one a short imperative sentence. Answer with one rewrite per line."
)


# ---------------------------------------------------------------------------
# frames and overlays


def sample_frames(segment: Segment, n: int = 8) -> list[int]:
    """``n`` evenly spaced frame indices covering the first and last frame."""
    if n < 1:
        raise ValueError("n must be >= 1")
    length = len(segment)
    pos = np.floor(np.linspace(0.0, length - 1, n) + 0.5).astype(int)
    return [segment.start_frame + int(p) for p in pos]


@dataclass(frozen=True)
class OverlayFrame:
    frame_index: int
    image: np.ndarray  # (H, W, 3) uint8
    vertices: np.ndarray  # (m, 2) projected palm points in front of the camera
    times: np.ndarray  # (m,) in [0, 1], 0 at the current frame
    pieces: np.ndarray = field(default_factory=lambda: np.zeros((0, 2, 2)))  # clipped drawable segments
    piece_times: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))

    @property
    def empty(self) -> bool:
        return len(self.vertices) == 0


def clip_segment(p0, p1, lo, hi):
    """Liang-Barsky clip of ``p0 -> p1`` to the box ``[lo, hi]``.

    Returns ``(u0, u1)`` parameters of the visible part, or None.
    """
    p0, p1 = np.asarray(p0, float), np.asarray(p1, float)
    d = p1 - p0
    u0, u1 = 0.0, 1.0
    for axis in range(2):
        for p, q in ((-d[axis], p0[axis] - lo[axis]), (d[axis], hi[axis] - p0[axis])):
            if p == 0:
                if q < 0:
                    return None
                continue
            r = q / p
            if p < 0:
                u0 = max(u0, r)
            else:
                u1 = min(u1, r)
            if u0 > u1:
                return None
    return u0, u1


def ramp_color(t) -> np.ndarray:
    t = np.clip(np.asarray(t, float), 0.0, 1.0)[..., None]
    return PURPLE * (1 - t) + YELLOW * t


def _draw_segment(canvas: np.ndarray, a, b, ta: float, tb: float, width: float) -> None:
    """Anti-aliased thick segment with a linear color ramp, blended in place (float canvas)."""
    h, w = canvas.shape[:2]
    r = width / 2 + 1.0
    x0, x1 = int(max(np.floor(min(a[0], b[0]) - r), 0)), int(min(np.ceil(max(a[0], b[0]) + r), w - 1))
    y0, y1 = int(max(np.floor(min(a[1], b[1]) - r), 0)), int(min(np.ceil(max(a[1], b[1]) + r), h - 1))
    if x1 < x0 or y1 < y0:
        return
    ys, xs = np.mgrid[y0:y1 + 1, x0:x1 + 1]
    p = np.stack([xs, ys], axis=-1).astype(float)
    d = b - a
    dd = float(d @ d)
    u = np.zeros(xs.shape) if dd == 0 else np.clip(((p - a) @ d) / dd, 0.0, 1.0)
    dist = np.linalg.norm(p - (a + u[..., None] * d), axis=-1)
    alpha = np.clip(width / 2 + 0.5 - dist, 0.0, 1.0)[..., None]
    color = ramp_color(ta + (tb - ta) * u)
    region = canvas[y0:y1 + 1, x0:x1 + 1]
    region[:] = region * (1 - alpha) + color * alpha


def render_overlay(
    image: np.ndarray,
    track: HandTrack,
    camera: CameraTrackFrame,
    end_frame: int,
    palm_offset=PALM_OFFSET,
    width: float = 3.0,
) -> OverlayFrame:
    """Draw the palm path from ``camera.frame_index`` up to ``end_frame`` (exclusive).

    ``track`` is in world space. Invalid rows and points behind the camera
    are dropped; line pieces only join consecutive kept frames.
    """
    img = np.asarray(image)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError("image must be (H, W, 3)")
    h, w = img.shape[:2]
    current = camera.frame_index
    rows = np.flatnonzero((track.frames >= current) & (track.frames < end_frame) & track.valid)
    cam = world_to_camera(track, camera)
    palm = palm_positions(cam.translations[rows], cam.rotations[rows], palm_offset)
    px, ahead = project_points(camera.intrinsics, palm) if len(rows) else (np.zeros((0, 2)), np.zeros(0, bool))
    span = max(end_frame - 1 - current, 1)
    times_all = (track.frames[rows] - current) / span
    keep = np.flatnonzero(ahead)
    verts, times = px[keep], times_all[keep]

    lo, hi = np.array([-0.5, -0.5]), np.array([w - 0.5, h - 0.5])
    pieces, ptimes = [], []
    for i, j in zip(keep[:-1], keep[1:]):
        if j != i + 1 or track.frames[rows[j]] != track.frames[rows[i]] + 1:
            continue
        c = clip_segment(px[i], px[j], lo, hi)
        if c is None:
            continue
        u0, u1 = c
        d = px[j] - px[i]
        pieces.append([px[i] + u0 * d, px[i] + u1 * d])
        dt = times_all[j] - times_all[i]
        ptimes.append([times_all[i] + u0 * dt, times_all[i] + u1 * dt])
    pieces_a = np.array(pieces).reshape(-1, 2, 2)
    ptimes_a = np.array(ptimes).reshape(-1, 2)

    canvas = img.astype(float)
    static = len(verts) > 0 and np.all(np.abs(verts - verts[0]) < 1e-9)
    if static:
        if np.all(verts[0] >= lo) and np.all(verts[0] <= hi):
            _draw_segment(canvas, verts[0], verts[0], 0.0, 0.0, width)
    else:
        for (a, b), (ta, tb) in zip(pieces_a, ptimes_a):
            _draw_segment(canvas, a, b, ta, tb, width)
    out = np.clip(np.floor(canvas + 0.5), 0, 255).astype(np.uint8)
    return OverlayFrame(current, out, verts, times, pieces_a, ptimes_a)


def blank_frame(intrinsics: CameraIntrinsics, value: int = 128) -> np.ndarray:
    return np.full((intrinsics.height, intrinsics.width, 3), value, dtype=np.uint8)


# ---------------------------------------------------------------------------
# prompts


@dataclass(frozen=True)
class PromptConfig:
    model: str = "vlm-default"
    system_prompt: str = SYSTEM_PROMPT
    user_prompt: str = USER_PROMPT
    rephrase_prompt: str = REPHRASE_PROMPT
    n_frames: int = 8
    n_rephrasings: int = 5


def encode_png(image: np.ndarray) -> str:
    buf = io.BytesIO()
    Image.fromarray(np.asarray(image, dtype=np.uint8), "RGB").save(buf, format="PNG", optimize=False, compress_level=6)
    return base64.b64encode(buf.getvalue()).decode("ascii")


def decode_png(data: str) -> np.ndarray:
    return np.asarray(Image.open(io.BytesIO(base64.b64decode(data))).convert("RGB"))


def _canonical(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=True).encode("ascii")


def build_prompt(frames: Sequence[OverlayFrame], handedness: str, config: PromptConfig = PromptConfig()) -> bytes:
    """Deterministic request payload as canonical JSON bytes."""
    if not frames:
        raise ValueError("need at least one frame")
    if handedness not in ("left", "right"):
        raise ValueError(f"bad handedness {handedness!r}")
    payload = {
        "kind": "caption",
        "model": config.model,
        "system": config.system_prompt,
        "user": config.user_prompt,
        "target_hand": handedness,
        "images": [{"frame": int(f.frame_index), "png": encode_png(f.image)} for f in frames],
    }
    return _canonical(payload)


def build_rephrase_prompt(caption: str, config: PromptConfig = PromptConfig()) -> bytes:
    return _canonical({
        "kind": "rephrase",
        "model": config.model,
        "system": config.rephrase_prompt.replace("{n}", str(config.n_rephrasings)),
        "user": caption,
        "n": config.n_rephrasings,
    })


# ---------------------------------------------------------------------------
# clients


class CaptionError(RuntimeError):
    pass


class TransientCaptionError(CaptionError):
    """Transport or server failure worth retrying."""


class MalformedResponseError(CaptionError):
    pass


class CaptionClient(Protocol):
    def complete(self, payload: bytes) -> str: ...


class HttpCaptionClient:
    """Posts a chat-style request and returns the single text reply."""

    def __init__(self, endpoint: str, api_key_env: str | None = None, timeout: float = 60.0):
        self.endpoint = endpoint
        self.api_key_env = api_key_env
        self.timeout = timeout

    def _request_body(self, payload: bytes) -> bytes:
        p = json.loads(payload)
        if p["kind"] == "caption":
            content = [{"type": "text", "text": f"{p['user']} Target hand: {p['target_hand']}."}]
            content += [{"type": "image_url", "image_url": {"url": "data:image/png;base64," + im["png"]}} for im in p["images"]]
        else:
            content = p["user"]
        return _canonical({"model": p["model"], "messages": [{"role": "system", "content": p["system"]}, {"role": "user", "content": content}]})

    def complete(self, payload: bytes) -> str:
        headers = {"Content-Type": "application/json"}
        if self.api_key_env:
            key = os.environ.get(self.api_key_env)
            if not key:
                raise CaptionError(f"environment variable {self.api_key_env} is not set")
            headers["Authorization"] = f"Bearer {key}"
        req = urllib.request.Request(self.endpoint, data=self._request_body(payload), headers=headers, method="POST")
        try:
            with urllib.request.urlopen(req, timeout=self.timeout) as resp:
                body = json.loads(resp.read())
        except (urllib.error.URLError, TimeoutError, ConnectionError) as e:
            raise TransientCaptionError(str(e)) from e
        except json.JSONDecodeError as e:
            raise MalformedResponseError(f"response is not JSON: {e}") from e
        try:
            if "text" in body:
                return str(body["text"])
            return str(body["choices"][0]["message"]["content"])
        except (KeyError, IndexError, TypeError) as e:
            raise MalformedResponseError(f"unexpected response shape: {e}") from e


_MOCK_VERBS = ("pick up", "put down", "push", "open", "close", "grab", "move", "pour", "turn", "wipe")
_MOCK_OBJECTS = ("the cup", "the bottle", "the bowl", "the drawer", "the towel", "the lid", "the box", "the spoon")


class MockCaptionClient:
    """Offline client for tests and dry runs.

    Replies come from ``transcript`` in order. Each entry is either a string
    reply or ``{"error": "transient" | "malformed"}``. Once the transcript is
    used up, replies are derived from a hash of the payload, so a run is
    deterministic regardless of request order.
    """

    def __init__(self, transcript: Sequence | None = None, na_rate: int = 10):
        self._script = list(transcript or [])
        self._lock = threading.Lock()
        self.na_rate = na_rate
        self.calls: list[bytes] = []

    @classmethod
    def from_file(cls, path) -> "MockCaptionClient":
        with open(path, encoding="utf-8") as f:
            return cls(json.load(f))

    def complete(self, payload: bytes) -> str:
        with self._lock:
            self.calls.append(payload)
            entry = self._script.pop(0) if self._script else None
        if isinstance(entry, Mapping):
            kind = entry.get("error")
            if kind == "transient":
                raise TransientCaptionError("scripted transient failure")
            if kind == "malformed":
                raise MalformedResponseError("scripted malformed response")
            return str(entry.get("text", ""))
        if entry is not None:
            return str(entry)
        return self._fallback(payload)

    def _fallback(self, payload: bytes) -> str:
        digest = hashlib.sha256(payload).digest()
        p = json.loads(payload)
        if p["kind"] == "rephrase":
            base = p["user"]
            forms = [base, f"please {base}", f"{base} now", f"go ahead and {base}", f"{base} carefully", f"you should {base}"]
            return "\n".join(forms[1: 1 + int(p["n"])])
        if self.na_rate and digest[0] % self.na_rate == 0:
            return NA
        verb = _MOCK_VERBS[digest[1] % len(_MOCK_VERBS)]
        obj = _MOCK_OBJECTS[digest[2] % len(_MOCK_OBJECTS)]
        return f"{verb} {obj}"


class TokenBucket:
    """Bounds in-flight requests and, optionally, the request rate."""

    def __init__(self, max_inflight: int = 4, rate_per_s: float | None = None, clock: Callable[[], float] = time.monotonic):
        if max_inflight < 1:
            raise ValueError("max_inflight must be >= 1")
        self._sem = threading.BoundedSemaphore(max_inflight)
        self._rate = rate_per_s
        self._clock = clock
        self._lock = threading.Lock()
        self._tokens = float(max_inflight)
        self._cap = float(max_inflight)
        self._last = clock()
        self.max_inflight = max_inflight

    def _take(self) -> None:
        if self._rate is None:
            return
        while True:
            with self._lock:
                now = self._clock()
                self._tokens = min(self._cap, self._tokens + (now - self._last) * self._rate)
                self._last = now
                if self._tokens >= 1:
                    self._tokens -= 1
                    return
                wait = (1 - self._tokens) / self._rate
            time.sleep(wait)

    def __enter__(self):
        self._sem.acquire()
        self._take()
        return self

    def __exit__(self, *exc):
        self._sem.release()
        return False


# ---------------------------------------------------------------------------
# requests


@dataclass(frozen=True)
class CaptionResult:
    segment_id: str
    caption: str | None  # None when the model answered N/A or the request failed
    rephrasings: tuple[str, ...] = ()
    status: str = "ok"  # ok | na | failed
    attempts: int = 1
    error: str = ""

    def __post_init__(self):
        if self.status not in ("ok", "na", "failed"):
            raise ValueError(f"bad status {self.status!r}")
        if self.status == "ok" and not self.caption:
            raise ValueError("an accepted caption must be non-empty")
        if self.status != "ok" and self.rephrasings:
            raise ValueError("only accepted captions carry rephrasings")

    def to_record(self) -> dict:
        return {"segment": self.segment_id, "caption": self.caption, "rephrasings": list(self.rephrasings), "status": self.status, "attempts": self.attempts, "error": self.error}

    @classmethod
    def from_record(cls, d: Mapping) -> "CaptionResult":
        return cls(d["segment"], d["caption"], tuple(d.get("rephrasings", ())), d["status"], int(d.get("attempts", 1)), d.get("error", ""))


_NA_RE = re.compile(r"^\W*n\s*/?\s*a\W*$", re.IGNORECASE)
_LIST_PREFIX = re.compile(r"^\s*(?:[-*•]|\d+[.)]|\(\d+\))\s*")


def is_na(text: str) -> bool:
    return bool(_NA_RE.match(text.strip()))


def clean_caption(text: str) -> str:
    """First non-empty line, without list markers, quotes or surrounding blanks."""
    for line in str(text).splitlines():
        line = _LIST_PREFIX.sub("", line).strip().strip("\"'`").strip()
        if line:
            return " ".join(line.split())
    return ""


def _with_retries(payload: bytes, client: CaptionClient, retries: int, backoff_s: float, sleep, parse):
    """Call ``client`` until ``parse`` accepts the reply. Returns (value, attempts, error)."""
    last = ""
    for attempt in range(retries + 1):
        if attempt:
            sleep(backoff_s * 2 ** (attempt - 1))
        try:
            return parse(client.complete(payload)), attempt + 1, ""
        except (TransientCaptionError, MalformedResponseError) as e:
            last = f"{type(e).__name__}: {e}"
            log.debug("caption attempt %d failed: %s", attempt + 1, last)
    return None, retries + 1, last


def _parse_caption(text: str) -> str:
    if is_na(text):
        return NA
    c = clean_caption(text)
    if not c:
        raise MalformedResponseError("empty caption")
    if is_na(c):
        return NA
    return c


def request_caption(
    payload: bytes,
    client: CaptionClient,
    segment_id: str = "",
    retries: int = 5,
    backoff_s: float = 0.5,
    sleep: Callable[[float], None] = time.sleep,
) -> CaptionResult:
    value, attempts, err = _with_retries(payload, client, retries, backoff_s, sleep, _parse_caption)
    if value is None:
        log.warning("caption failed for %s after %d attempts: %s", segment_id, attempts, err)
        return CaptionResult(segment_id, None, (), "failed", attempts, err)
    if value == NA:
        return CaptionResult(segment_id, None, (), "na", attempts)
    return CaptionResult(segment_id, value, (), "ok", attempts)


def _parse_rephrasings(text: str) -> list[str]:
    lines = [clean_caption(line) for line in str(text).splitlines()]
    lines = [line for line in lines if line and not is_na(line)]
    if not lines:
        raise MalformedResponseError("no rephrasings")
    return lines


def request_rephrasings(
    caption: str,
    client: CaptionClient,
    config: PromptConfig = PromptConfig(),
    retries: int = 5,
    backoff_s: float = 0.5,
    sleep: Callable[[float], None] = time.sleep,
) -> tuple[str, ...]:
    """Up to ``config.n_rephrasings`` distinct rewrites; an empty tuple if the requests fail."""
    if not caption or is_na(caption):
        raise ValueError("cannot rephrase an N/A caption")
    lines, _, err = _with_retries(build_rephrase_prompt(caption, config), client, retries, backoff_s, sleep, _parse_rephrasings)
    if lines is None:
        log.warning("rephrasing failed for %r: %s", caption, err)
        return ()
    seen, out = set(), []
    for line in lines:
        key = normalize_caption(line)
        if key in seen:
            continue
        seen.add(key)
        out.append(line)
    return tuple(out[: config.n_rephrasings])


# ---------------------------------------------------------------------------
# per-segment driver


def segment_frames(
    segment: Segment,
    track: HandTrack,
    cameras: Callable[[int], CameraTrackFrame],
    image_source: Callable[[int], np.ndarray],
    config: PromptConfig = PromptConfig(),
    palm_offset=PALM_OFFSET,
) -> list[OverlayFrame]:
    return [
        render_overlay(image_source(f), track, cameras(f), segment.end_frame, palm_offset)
        for f in sample_frames(segment, config.n_frames)
    ]


def caption_segments(
    jobs: Sequence[tuple[str, bytes]],
    client: CaptionClient,
    config: PromptConfig = PromptConfig(),
    max_inflight: int = 4,
    rephrase: bool = True,
    sleep: Callable[[float], None] = time.sleep,
    backoff_s: float = 0.5,
    retries: int = 5,
) -> dict[str, CaptionResult]:
    """Caption ``(segment_id, payload)`` jobs concurrently. Results are keyed by segment id."""
    bucket = TokenBucket(max_inflight)

    def one(job):
        sid, payload = job
        with bucket:
            res = request_caption(payload, client, sid, retries, backoff_s, sleep)
        if res.status == "ok" and rephrase:
            with bucket:
                reps = request_rephrasings(res.caption, client, config, retries, backoff_s, sleep)
            res = CaptionResult(sid, res.caption, reps, "ok", res.attempts)
        return sid, res

    if max_inflight == 1 or len(jobs) <= 1:
        return dict(one(j) for j in jobs)
    with ThreadPoolExecutor(max_workers=max_inflight) as pool:
        return dict(pool.map(one, jobs))

