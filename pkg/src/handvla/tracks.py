"""Per-video track ingestion, world-space fusion, smoothing and cleanup.

A track file is line-delimited JSON. The first line is a header::

    {"fps": 30, "width": 640, "height": 480, "fx": ..., "fy": ..., "cx": ..., "cy": ...}

followed by one record per line::

    {"frame": 12, "kind": "cam",  "payload": {"translation": [3], "rotation": [9]}}
    {"frame": 12, "kind": "hand", "payload": {"handedness": "left", "translation": [3],
                                              "rotation": [9], "joint_angles": [45],
                                              "confidence": 0.93}}
    {"frame": 12, "kind": "flow", "payload": {"median_flow": 0.41}}

Rotations are row-major 3x3. Camera records carry ``world_from_cam``; hand
records carry the wrist pose in the camera frame of the same video frame.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy.interpolate import make_smoothing_spline
from scipy.ndimage import median_filter

from .geom import CameraIntrinsics, Pose, Rotation, matrix_to_quat, orthonormalize, quat_to_matrix

log = logging.getLogger(__name__)

HANDS = ("left", "right")
NUM_JOINT_ANGLES = 45
# palm center in the wrist frame (fingers extend along +z)
PALM_OFFSET = np.array([0.0, 0.0, 0.08])
_FLOAT_DIGITS = 9


class TrackFormatError(ValueError):
    """Base class for malformed track files."""


class TrackParseError(TrackFormatError):
    def __init__(self, line: int, message: str):
        super().__init__(f"line {line}: {message}")
        self.line = line


class DuplicateRecordError(TrackFormatError):
    pass


class SchemaError(TrackFormatError):
    pass


class AlignmentError(ValueError):
    def __init__(self, missing: Sequence[int]):
        super().__init__(f"no camera frame for hand frames {list(missing)}")
        self.missing = list(missing)


@dataclass(frozen=True)
class HandTrackFrame:
    frame_index: int
    handedness: str
    wrist_pose_cam: Pose
    joint_angles: np.ndarray
    valid: bool = True
    confidence: float = 1.0


@dataclass(frozen=True)
class CameraTrackFrame:
    frame_index: int
    world_from_cam: Pose
    intrinsics: CameraIntrinsics


@dataclass(frozen=True)
class FlowStats:
    frame_index: int
    median_background_flow: float


@dataclass(frozen=True)
class TrackFile:
    hands: list[HandTrackFrame]
    cameras: list[CameraTrackFrame]
    flows: list[FlowStats]
    fps: float
    intrinsics: CameraIntrinsics

    def __iter__(self):
        # unpack as (hands, cameras, flows, fps)
        return iter((self.hands, self.cameras, self.flows, self.fps))


@dataclass(frozen=True, eq=False)
class HandTrack:
    """One hand over a contiguous frame grid.

    Frames without a usable estimate keep ``valid=False``; their pose data is
    meaningless and never interpolated.
    """

    handedness: str
    fps: float
    frames: np.ndarray  # (n,) int
    translations: np.ndarray  # (n, 3)
    rotations: np.ndarray  # (n, 3, 3)
    joint_angles: np.ndarray  # (n, 45)
    valid: np.ndarray  # (n,) bool
    confidence: np.ndarray | None = None
    notes: tuple[str, ...] = ()

    def __post_init__(self):
        if not self.fps > 0:
            raise ValueError("fps must be positive")
        n = len(self.frames)
        if self.translations.shape != (n, 3) or self.rotations.shape != (n, 3, 3):
            raise ValueError("pose arrays do not match frame count")
        if self.joint_angles.shape != (n, NUM_JOINT_ANGLES) or self.valid.shape != (n,):
            raise ValueError("joint/valid arrays do not match frame count")

    def __len__(self) -> int:
        return len(self.frames)

    def pose(self, i: int) -> Pose:
        return Pose(Rotation(self.rotations[i]), self.translations[i])

    def valid_spans(self) -> list[tuple[int, int]]:
        """Maximal runs of valid rows as ``[start, end)`` row indices."""
        return _runs(self.valid)

    def slice(self, start: int, end: int) -> "HandTrack":
        """Rows ``[start, end)``."""
        conf = None if self.confidence is None else self.confidence[start:end]
        return replace(
            self,
            frames=self.frames[start:end],
            translations=self.translations[start:end],
            rotations=self.rotations[start:end],
            joint_angles=self.joint_angles[start:end],
            valid=self.valid[start:end],
            confidence=conf,
        )

    def row_of(self, frame_index: int) -> int:
        row = int(frame_index - self.frames[0])
        if not 0 <= row < len(self.frames) or self.frames[row] != frame_index:
            raise KeyError(frame_index)
        return row


def palm_positions(translations: np.ndarray, rotations: np.ndarray, offset=PALM_OFFSET) -> np.ndarray:
    """Palm centers for wrist poses given as ``(n, 3)`` translations and ``(n, 3, 3)`` rotations."""
    return np.asarray(translations, dtype=float) + np.asarray(rotations, dtype=float) @ np.asarray(offset, dtype=float)


# World-space tracks share the HandTrack layout.
WorldHandTrack = HandTrack


def _runs(mask: np.ndarray) -> list[tuple[int, int]]:
    m = np.concatenate([[False], np.asarray(mask, dtype=bool), [False]])
    d = np.diff(m.astype(np.int8))
    starts = np.flatnonzero(d == 1)
    ends = np.flatnonzero(d == -1)
    return [(int(s), int(e)) for s, e in zip(starts, ends)]


# ---------------------------------------------------------------------------
# file I/O


def _num(x: float) -> float:
    return float(f"{x:.{_FLOAT_DIGITS}g}")


def _floats(values: Iterable[float]) -> list[float]:
    return [_num(float(v)) for v in values]


def _vec(payload: dict, key: str, n: int, line: int) -> np.ndarray:
    if key not in payload:
        raise TrackParseError(line, f"missing field {key!r}")
    v = payload[key]
    if not isinstance(v, list) or len(v) != n:
        raise TrackParseError(line, f"field {key!r} must be a list of {n} numbers")
    try:
        a = np.array(v, dtype=float)
    except (TypeError, ValueError) as exc:
        raise TrackParseError(line, f"field {key!r} is not numeric") from exc
    if a.shape != (n,):
        raise TrackParseError(line, f"field {key!r} must be a flat list")
    if not np.all(np.isfinite(a)):
        raise TrackParseError(line, f"field {key!r} has non-finite values")
    return a


def _rotation(payload: dict, line: int) -> Rotation:
    m = _vec(payload, "rotation", 9, line).reshape(3, 3)
    if np.max(np.abs(m @ m.T - np.eye(3))) > 1e-3 or np.linalg.det(m) < 0:
        raise TrackParseError(line, "rotation is not a proper orthonormal matrix")
    return Rotation(orthonormalize(m))


def _intrinsics(header: dict) -> CameraIntrinsics:
    try:
        return CameraIntrinsics(
            float(header["fx"]),
            float(header["fy"]),
            float(header["cx"]),
            float(header["cy"]),
            int(header["width"]),
            int(header["height"]),
        )
    except KeyError as exc:
        raise SchemaError(f"header missing {exc.args[0]!r}") from exc
    except (TypeError, ValueError) as exc:
        raise SchemaError(f"bad header: {exc}") from exc


def parse_track(text: str) -> TrackFile:
    lines = text.split("\n")
    records = []
    for i, raw in enumerate(lines, start=1):
        if not raw.strip():
            continue
        try:
            rec = json.loads(raw)
        except json.JSONDecodeError as exc:
            raise TrackParseError(i, f"invalid JSON ({exc.msg})") from None
        if not isinstance(rec, dict):
            raise TrackParseError(i, "record is not an object")
        records.append((i, rec))
    if not records:
        raise SchemaError("empty track file")
    _, header = records[0]
    if "fps" not in header:
        raise SchemaError("header missing 'fps'")
    try:
        fps = float(header["fps"])
    except (TypeError, ValueError):
        raise SchemaError("fps is not numeric") from None
    if not (math.isfinite(fps) and fps > 0):
        raise SchemaError("fps must be positive")
    intr = _intrinsics(header)

    hands: dict[tuple[int, str], HandTrackFrame] = {}
    cams: dict[int, CameraTrackFrame] = {}
    flows: dict[int, FlowStats] = {}
    for line, rec in records[1:]:
        frame, kind, payload = rec.get("frame"), rec.get("kind"), rec.get("payload")
        if not isinstance(frame, int) or isinstance(frame, bool) or frame < 0:
            raise TrackParseError(line, "frame must be a non-negative integer")
        if not isinstance(payload, dict):
            raise TrackParseError(line, "payload must be an object")
        if kind == "cam":
            if frame in cams:
                raise DuplicateRecordError(f"line {line}: duplicate camera record for frame {frame}")
            pose = Pose(_rotation(payload, line), _vec(payload, "translation", 3, line))
            cams[frame] = CameraTrackFrame(frame, pose, intr)
        elif kind == "hand":
            side = payload.get("handedness")
            if side not in HANDS:
                raise TrackParseError(line, f"handedness must be one of {HANDS}")
            if (frame, side) in hands:
                raise DuplicateRecordError(f"line {line}: duplicate {side} hand record for frame {frame}")
            pose = Pose(_rotation(payload, line), _vec(payload, "translation", 3, line))
            angles = _vec(payload, "joint_angles", NUM_JOINT_ANGLES, line)
            conf = payload.get("confidence", 1.0)
            valid = payload.get("valid", True)
            if not isinstance(conf, (int, float)) or isinstance(conf, bool) or not 0.0 <= conf <= 1.0:
                raise TrackParseError(line, "confidence must be a number in [0, 1]")
            if not isinstance(valid, bool):
                raise TrackParseError(line, "valid must be a boolean")
            hands[(frame, side)] = HandTrackFrame(frame, side, pose, angles, valid, float(conf))
        elif kind == "flow":
            v = payload.get("median_flow")
            if not isinstance(v, (int, float)) or isinstance(v, bool) or not (math.isfinite(v) and v >= 0):
                raise TrackParseError(line, "median_flow must be a non-negative number")
            if frame in flows:
                raise DuplicateRecordError(f"line {line}: duplicate flow record for frame {frame}")
            flows[frame] = FlowStats(frame, float(v))
        else:
            raise TrackParseError(line, f"unknown record kind {kind!r}")

    return TrackFile(
        hands=[hands[k] for k in sorted(hands, key=lambda k: (k[0], HANDS.index(k[1])))],
        cameras=[cams[k] for k in sorted(cams)],
        flows=[flows[k] for k in sorted(flows)],
        fps=fps,
        intrinsics=intr,
    )


def load_track(path) -> TrackFile:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except UnicodeDecodeError as exc:
        raise TrackParseError(0, f"not UTF-8 text: {exc}") from None
    return parse_track(text)


def format_track(
    fps: float,
    intrinsics: CameraIntrinsics,
    cameras: Iterable[CameraTrackFrame],
    hands: Iterable[HandTrackFrame] = (),
    flows: Iterable[FlowStats] = (),
) -> str:
    header = {
        "fps": _num(fps),
        "width": intrinsics.width,
        "height": intrinsics.height,
        "fx": _num(intrinsics.focal_x),
        "fy": _num(intrinsics.focal_y),
        "cx": _num(intrinsics.principal_x),
        "cy": _num(intrinsics.principal_y),
    }
    out = [json.dumps(header)]
    recs = []
    for c in cameras:
        payload = {"translation": _floats(c.world_from_cam.translation), "rotation": _floats(c.world_from_cam.rotation.matrix.ravel())}
        recs.append((c.frame_index, 0, {"frame": c.frame_index, "kind": "cam", "payload": payload}))
    for h in hands:
        payload = {
            "handedness": h.handedness,
            "translation": _floats(h.wrist_pose_cam.translation),
            "rotation": _floats(h.wrist_pose_cam.rotation.matrix.ravel()),
            "joint_angles": _floats(h.joint_angles),
            "confidence": _num(h.confidence),
        }
        if not h.valid:
            payload["valid"] = False
        recs.append((h.frame_index, 1 + HANDS.index(h.handedness), {"frame": h.frame_index, "kind": "hand", "payload": payload}))
    for f in flows:
        recs.append((f.frame_index, 3, {"frame": f.frame_index, "kind": "flow", "payload": {"median_flow": _num(f.median_background_flow)}}))
    recs.sort(key=lambda r: (r[0], r[1]))
    out.extend(json.dumps(r[2]) for r in recs)
    return "\n".join(out) + "\n"


def write_track(path, *args, **kwargs) -> None:
    Path(path).write_text(format_track(*args, **kwargs), encoding="utf-8")


# ---------------------------------------------------------------------------
# camera motion


def classify_camera_motion(flows: Sequence[FlowStats], threshold_px: float = 1.0) -> str:
    """``"moving"`` iff the median per-frame background flow exceeds the threshold."""
    if len(flows) == 0:
        raise ValueError("need at least one flow record")
    med = float(np.median([f.median_background_flow for f in flows]))
    return "moving" if med > threshold_px else "static"


# ---------------------------------------------------------------------------
# fusion


@dataclass(frozen=True, eq=False)
class CameraTrack:
    frames: np.ndarray
    rotations: np.ndarray
    translations: np.ndarray
    intrinsics: CameraIntrinsics

    @classmethod
    def from_frames(cls, cameras: Sequence[CameraTrackFrame]) -> "CameraTrack":
        cams = sorted(cameras, key=lambda c: c.frame_index)
        if not cams:
            raise ValueError("no camera frames")
        return cls(
            np.array([c.frame_index for c in cams]),
            np.stack([c.world_from_cam.rotation.matrix for c in cams]),
            np.stack([c.world_from_cam.translation for c in cams]),
            cams[0].intrinsics,
        )

    def frame(self, frame_index: int) -> CameraTrackFrame:
        i = int(np.searchsorted(self.frames, frame_index))
        if i >= len(self.frames) or self.frames[i] != frame_index:
            raise KeyError(frame_index)
        return CameraTrackFrame(frame_index, Pose(Rotation(self.rotations[i]), self.translations[i]), self.intrinsics)


def fuse_to_world(
    hands: Sequence[HandTrackFrame], cameras: Sequence[CameraTrackFrame], fps: float = 30.0
) -> dict[str, HandTrack]:
    """Lift camera-space wrists into world space: ``world_from_cam @ wrist_pose_cam``.

    The output frame grid spans the camera frames; both hands are always
    present, with ``valid=False`` where no usable estimate exists.
    """
    cam_by_frame = {c.frame_index: c for c in cameras}
    missing = sorted({h.frame_index for h in hands if h.valid and h.frame_index not in cam_by_frame})
    if missing:
        raise AlignmentError(missing)
    if not cam_by_frame:
        raise ValueError("no camera frames")
    first, last = min(cam_by_frame), max(cam_by_frame)
    frames = np.arange(first, last + 1)
    n = len(frames)
    out = {}
    for side in HANDS:
        t = np.zeros((n, 3))
        r = np.tile(np.eye(3), (n, 1, 1))
        q = np.zeros((n, NUM_JOINT_ANGLES))
        v = np.zeros(n, dtype=bool)
        c = np.zeros(n)
        for h in hands:
            if h.handedness != side or h.frame_index not in cam_by_frame:
                continue
            i = h.frame_index - first
            w = cam_by_frame[h.frame_index].world_from_cam @ h.wrist_pose_cam
            t[i], r[i], q[i] = w.translation, w.rotation.matrix, h.joint_angles
            v[i] = h.valid
            c[i] = h.confidence
        out[side] = HandTrack(side, fps, frames, t, r, q, v, c)
    return out


def world_to_camera(track: HandTrack, camera: CameraTrackFrame) -> HandTrack:
    """Re-express every pose in the camera frame of one video frame."""
    inv = camera.world_from_cam.inv()
    r = inv.rotation.matrix
    return replace(
        track,
        translations=track.translations @ r.T + inv.translation,
        rotations=r @ track.rotations,
    )


# ---------------------------------------------------------------------------
# smoothing / outliers


def _limit_displacement(raw: np.ndarray, smooth: np.ndarray, half: int) -> np.ndarray:
    """Pull each smoothed point back inside the ball around its raw sample whose
    radius is the largest raw displacement within the ``+-half`` window."""
    out = smooth.copy()
    for i in range(len(raw)):
        w = raw[max(0, i - half): i + half + 1]
        radius = np.linalg.norm(w - raw[i], axis=1).max()
        d = smooth[i] - raw[i]
        dist = np.linalg.norm(d)
        if dist > radius:
            out[i] = raw[i] + d * (radius / dist)
    return out


def _average_rotations(rots: np.ndarray, half: int) -> np.ndarray:
    quats = np.array([matrix_to_quat(m) for m in rots])
    out = np.empty_like(rots)
    for i in range(len(rots)):
        w = quats[max(0, i - half): i + half + 1]
        signs = np.where(w @ quats[i] < 0, -1.0, 1.0)
        out[i] = quat_to_matrix((w * signs[:, None]).sum(axis=0))
    return out


def _spline_fit(x: np.ndarray, y: np.ndarray, lam: float) -> np.ndarray:
    if math.isinf(lam):
        # limit of infinite curvature penalty: least-squares line
        design = np.column_stack([x, np.ones_like(x)])
        coef, *_ = np.linalg.lstsq(design, y, rcond=None)
        return design @ coef
    return np.column_stack([make_smoothing_spline(x, y[:, k], lam=lam)(x) for k in range(y.shape[1])])


def smooth_track(track: HandTrack, spline_lambda: float = 1e-5, gaussian_sigma_s: float = 0.1) -> HandTrack:
    """Smooth each valid span of a world track.

    Wrist translations get a per-axis cubic smoothing spline (penalty
    ``spline_lambda`` on the integrated squared second derivative, time in
    seconds; ``inf`` gives the least-squares line). No point moves farther
    from its raw sample than the largest raw displacement inside a
    ``+-sigma`` window, which rules out spline ringing.
    Rotations are quaternion-averaged over the same window. Spans with fewer
    than 4 frames pass through and are reported in ``notes``.
    """
    half = max(1, int(round(gaussian_sigma_s * track.fps)))
    t = track.translations.copy()
    r = track.rotations.copy()
    notes = list(track.notes)
    for s, e in track.valid_spans():
        if e - s < 4:
            notes.append(f"span_too_short:{int(track.frames[s])}-{int(track.frames[e - 1])}")
            continue
        x = track.frames[s:e] / track.fps
        raw = track.translations[s:e]
        sm = _spline_fit(x, raw, spline_lambda)
        t[s:e] = _limit_displacement(raw, sm, half)
        r[s:e] = _average_rotations(track.rotations[s:e], half)
    if len(notes) > len(track.notes):
        log.warning("smooth_track: %d span(s) too short to smooth", len(notes) - len(track.notes))
    return replace(track, translations=t, rotations=r, notes=tuple(notes))


def _speed_outliers(pos: np.ndarray, frames: np.ndarray, fps: float, z: float, window: int, min_sigma: float) -> np.ndarray:
    m = len(pos)
    flagged = np.zeros(m, dtype=bool)
    if m < 3:
        return flagged
    speed = np.linalg.norm(np.diff(pos, axis=0), axis=1) * fps / np.diff(frames)
    med = median_filter(speed, size=window, mode="nearest")
    resid = np.abs(speed - med)
    sigma = max(1.4826 * float(np.median(resid)), min_sigma)
    out = resid > z * sigma
    # a displaced frame spoils both the speed into it and out of it
    flagged[1:-1] = out[:-1] & out[1:]
    flagged[0] = out[0] and not out[1]
    flagged[-1] = out[-1] and not out[-2]
    return flagged


def remove_outliers(
    track: HandTrack, z_thresh: float = 4.0, window: int = 9, min_sigma_mps: float = 0.02
) -> HandTrack:
    """Invalidate frames whose wrist speed departs from a rolling median.

    Residuals are scaled by a MAD-based robust sigma (floored at
    ``min_sigma_mps``). The rule is iterated to a fixed point, which makes
    the operation idempotent.
    """
    valid = track.valid.copy()
    while True:
        idx = np.flatnonzero(valid)
        flagged = _speed_outliers(track.translations[idx], track.frames[idx], track.fps, z_thresh, window, min_sigma_mps)
        if not flagged.any():
            break
        valid[idx[flagged]] = False
    return replace(track, valid=valid)


def chop_video(n_frames: int, fps: float, chunk_s: float = 20.0, overlap_s: float = 2.0) -> list[tuple[int, int]]:
    """Overlapping ``[start, end)`` frame spans covering ``n_frames``."""
    chunk = int(round(chunk_s * fps))
    overlap = int(round(overlap_s * fps))
    if not 0 <= overlap < chunk:
        raise ValueError("overlap must be non-negative and shorter than the chunk")
    if n_frames <= 0:
        return []
    spans = []
    start = 0
    while True:
        end = min(start + chunk, n_frames)
        spans.append((start, end))
        if end >= n_frames:
            return spans
        start += chunk - overlap


def recompose_spans(spans: Iterable[tuple[int, int]]) -> list[tuple[int, int]]:
    """Union of spans as sorted disjoint ``[start, end)`` intervals."""
    merged: list[list[int]] = []
    for s, e in sorted(spans):
        if merged and s <= merged[-1][1]:
            merged[-1][1] = max(merged[-1][1], e)
        else:
            merged.append([s, e])
    return [(s, e) for s, e in merged]


def stitch_chunks(tracks: Sequence[HandTrack], spans: Sequence[tuple[int, int]]) -> HandTrack:
    """Recompose per-chunk results; each overlap is split at its midpoint."""
    if len(tracks) != len(spans) or not tracks:
        raise ValueError("need one track per span")
    pieces = []
    for i, (tr, (s, e)) in enumerate(zip(tracks, spans)):
        lo = s if i == 0 else (s + spans[i - 1][1]) // 2
        hi = e if i == len(spans) - 1 else (spans[i + 1][0] + e) // 2
        pieces.append(tr.slice(lo - s, hi - s))
    cat = lambda name: np.concatenate([getattr(p, name) for p in pieces])  # noqa: E731
    conf = None if pieces[0].confidence is None else cat("confidence")
    return replace(
        tracks[0],
        frames=cat("frames"),
        translations=cat("translations"),
        rotations=cat("rotations"),
        joint_angles=cat("joint_angles"),
        valid=cat("valid"),
        confidence=conf,
        notes=tuple(n for t in tracks for n in t.notes),
    )
