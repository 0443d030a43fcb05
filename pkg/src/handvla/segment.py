"""Atomic action segmentation at world-space wrist speed minima."""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.ndimage import gaussian_filter1d

from .tracks import HANDS, HandTrack


@dataclass(frozen=True)
class Segment:
    """Frames ``[start_frame, end_frame)`` of one hand in one video."""

    handedness: str
    start_frame: int
    end_frame: int
    source_video: str = ""

    def __post_init__(self):
        if self.end_frame <= self.start_frame:
            raise ValueError(f"empty segment [{self.start_frame}, {self.end_frame})")

    def __len__(self) -> int:
        return self.end_frame - self.start_frame

    @property
    def id(self) -> str:
        return f"{self.source_video}:{self.handedness}:{self.start_frame}-{self.end_frame}"


@dataclass(frozen=True)
class CaptionedSegment:
    segment: Segment
    caption: str


def smoothed_positions(track: HandTrack, sigma_s: float = 0.1) -> np.ndarray:
    """Gaussian-smoothed wrist positions, filtered inside each valid span only."""
    out = np.full_like(track.translations, np.nan)
    sigma = sigma_s * track.fps
    for s, e in track.valid_spans():
        p = track.translations[s:e]
        out[s:e] = gaussian_filter1d(p, sigma, axis=0, mode="nearest") if sigma > 0 else p
    return out


def wrist_speed(track: HandTrack, sigma_s: float = 0.1) -> np.ndarray:
    """Speed (m/s) between consecutive frames; NaN where either frame is invalid."""
    if len(track) < 2 or track.valid.sum() < 2:
        raise ValueError("need at least two valid frames")
    p = smoothed_positions(track, sigma_s)
    return np.linalg.norm(np.diff(p, axis=0), axis=1) * track.fps


def window_frames(window_s: float, fps: float) -> int:
    """Window length in frames, rounded to the nearest odd count."""
    w = window_s * fps
    if w < 3:
        raise ValueError(f"window of {window_s}s at {fps} fps spans fewer than 3 frames")
    return int(2 * np.floor((w - 1) / 2 + 0.5) + 1)


def detect_speed_minima(speed: np.ndarray, fps: float, window_s: float = 0.5) -> np.ndarray:
    """Indices that are the first strict minimum of their centered window.

    Windows are truncated at the series ends; the first and last samples are
    never reported. NaN samples are gaps: they are skipped as candidates and
    never win a window.
    """
    w = window_frames(window_s, fps)
    half = w // 2
    v = np.where(np.isnan(speed), np.inf, np.asarray(speed, dtype=float))
    n = len(v)
    if n < 3:
        return np.zeros(0, dtype=int)
    padded = np.concatenate([np.full(half, np.inf), v, np.full(half, np.inf)])
    first_arg = np.argmin(sliding_window_view(padded, w), axis=1)
    is_min = (first_arg == half) & np.isfinite(v)
    is_min[0] = is_min[-1] = False
    return np.flatnonzero(is_min)


def segment_track(
    track: HandTrack,
    video: str = "",
    sigma_s: float = 0.1,
    window_s: float = 0.5,
    min_len_s: float = 0.5,
) -> list[Segment]:
    """Cut one hand's track at speed minima inside each valid span."""
    if not track.valid.any():
        return []
    speed = wrist_speed(track, sigma_s) if track.valid.sum() >= 2 else np.full(max(len(track) - 1, 0), np.nan)
    min_len = int(np.ceil(min_len_s * track.fps - 1e-9))
    out = []
    for s, e in track.valid_spans():
        if e - s < 2:
            continue
        cuts = detect_speed_minima(speed[s:e - 1], track.fps, window_s) + s
        bounds = [s, *cuts.tolist(), e]
        for a, b in zip(bounds[:-1], bounds[1:]):
            if b - a >= max(min_len, 1):
                out.append(Segment(track.handedness, int(track.frames[a]), int(track.frames[b - 1]) + 1, video))
    return out


def segment_video(tracks: Mapping[str, HandTrack], video: str = "", **kwargs) -> list[Segment]:
    """Segment each hand independently, ignoring the other hand."""
    segs = []
    for side in HANDS:
        if side in tracks:
            segs.extend(segment_track(tracks[side], video, **kwargs))
    return segs


_PUNCT_TAIL = re.compile(r"[\s\.\!\?,;:]+$")


def normalize_caption(text: str) -> str:
    return _PUNCT_TAIL.sub("", " ".join(text.lower().split()))


def merge_segments(items: Sequence[CaptionedSegment], fps: float, merge_gap_s: float = 0.2) -> list[CaptionedSegment]:
    """Merge neighbouring same-hand segments whose captions normalize equal.

    The merged segment keeps the first caption.
    """
    out: list[CaptionedSegment] = []
    ordered = sorted(items, key=lambda c: (c.segment.source_video, HANDS.index(c.segment.handedness), c.segment.start_frame))
    for item in ordered:
        if out:
            prev = out[-1]
            a, b = prev.segment, item.segment
            gap = (b.start_frame - a.end_frame) / fps
            if (
                a.source_video == b.source_video
                and a.handedness == b.handedness
                and 0 <= gap < merge_gap_s
                and normalize_caption(prev.caption) == normalize_caption(item.caption)
            ):
                out[-1] = CaptionedSegment(replace(a, end_frame=b.end_frame), prev.caption)
                continue
        out.append(item)
    return out


# ---------------------------------------------------------------------------
# manifest


def segment_to_record(seg: Segment) -> dict:
    return {"video": seg.source_video, "hand": seg.handedness, "start_frame": seg.start_frame, "end_frame": seg.end_frame}


def segment_from_record(rec: dict) -> Segment:
    return Segment(rec["hand"], int(rec["start_frame"]), int(rec["end_frame"]), rec["video"])


def write_segment_manifest(path, segments: Iterable[Segment]) -> None:
    Path(path).write_text("".join(json.dumps(segment_to_record(s)) + "\n" for s in segments), encoding="utf-8")


def read_segment_manifest(path) -> list[Segment]:
    return [segment_from_record(json.loads(line)) for line in Path(path).read_text(encoding="utf-8").splitlines() if line.strip()]
