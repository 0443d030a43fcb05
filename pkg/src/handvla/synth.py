"""Synthetic hand/camera tracks with known structure.

Used for fixtures, demos and the end-to-end pipeline checks. Reaches follow
minimum-jerk profiles, so wrist speed is exactly zero where two reaches meet.
"""

from __future__ import annotations

import math
from pathlib import Path

import numpy as np

from .geom import CameraIntrinsics, Pose, Rotation, euler_to_matrix, euler_to_matrix_batch
from .tracks import CameraTrackFrame, FlowStats, HandTrack, HandTrackFrame, format_track

DEFAULT_INTRINSICS = CameraIntrinsics.centered(math.radians(75.0), 320, 240)


def min_jerk(p0, p1, n: int) -> np.ndarray:
    """``n`` samples from p0 to p1 (both included) along a minimum-jerk profile."""
    tau = np.linspace(0.0, 1.0, n)
    s = 10 * tau**3 - 15 * tau**4 + 6 * tau**5
    return np.asarray(p0, dtype=float) + s[:, None] * (np.asarray(p1, dtype=float) - np.asarray(p0, dtype=float))


def reach_sequence(waypoints, durations_frames) -> tuple[np.ndarray, list[int]]:
    """Chain of min-jerk reaches; returns positions and the junction rows."""
    pts = [np.asarray(waypoints[0], dtype=float)[None]]
    junctions = []
    row = 0
    for p0, p1, n in zip(waypoints[:-1], waypoints[1:], durations_frames):
        seg = min_jerk(p0, p1, n + 1)[1:]
        pts.append(seg)
        row += n
        junctions.append(row)
    return np.concatenate(pts), junctions[:-1]


def _random_reach_points(rng, k: int, center, lo=0.12, hi=0.35) -> list[np.ndarray]:
    pts = [np.asarray(center, dtype=float) + rng.normal(scale=0.05, size=3)]
    for _ in range(k):
        d = rng.normal(size=3)
        d /= np.linalg.norm(d)
        pts.append(pts[-1] + d * rng.uniform(lo, hi))
    return pts


def make_track(positions: np.ndarray, fps: float = 30.0, handedness: str = "right", rotations=None, joint_angles=None, valid=None) -> HandTrack:
    n = len(positions)
    return HandTrack(
        handedness,
        fps,
        np.arange(n),
        np.asarray(positions, dtype=float),
        np.tile(np.eye(3), (n, 1, 1)) if rotations is None else np.asarray(rotations, dtype=float),
        np.zeros((n, 45)) if joint_angles is None else np.asarray(joint_angles, dtype=float),
        np.ones(n, dtype=bool) if valid is None else np.asarray(valid, dtype=bool),
        np.ones(n),
    )


def two_phase_track(rng: np.random.Generator, fps: float = 30.0, noise: float = 5e-4, handedness: str = "right"):
    """Reach, stop, reach again. Returns the track and the planted boundary row."""
    d1 = int(round(rng.uniform(1.0, 2.0) * fps))
    d2 = int(round(rng.uniform(1.0, 2.0) * fps))
    pts = _random_reach_points(rng, 2, [0.0, 0.0, 0.5], 0.2, 0.4)
    pos, junctions = reach_sequence(pts, [d1, d2])
    pos = pos + rng.normal(scale=noise, size=pos.shape)
    return make_track(pos, fps, handedness), junctions[0]


def smooth_random(rng, n: int, dims: int, scale: float, knots: int = 6) -> np.ndarray:
    """Smooth random curve of shape ``(n, dims)`` via cubic interpolation of knots."""
    from scipy.interpolate import CubicSpline

    kx = np.linspace(0, n - 1, max(knots, 2))
    ky = rng.normal(scale=scale, size=(len(kx), dims))
    return CubicSpline(kx, ky, axis=0)(np.arange(n))


def random_wrist_track(rng, n: int = 200, fps: float = 30.0, handedness: str = "right") -> HandTrack:
    """Smoothly wandering wrist pose plus joint angles, all frames valid."""
    pos = np.array([0.0, 0.0, 0.5]) + smooth_random(rng, n, 3, 0.15, knots=max(n // 20, 3))
    eul = smooth_random(rng, n, 3, 0.5, knots=max(n // 20, 3))
    joints = smooth_random(rng, n, 45, 0.3, knots=max(n // 25, 3))
    return make_track(pos, fps, handedness, euler_to_matrix_batch(eul), joints)


def synthetic_video(
    rng: np.random.Generator,
    seconds: float = 12.0,
    fps: float = 30.0,
    intrinsics: CameraIntrinsics = DEFAULT_INTRINSICS,
    moving_camera: bool | None = None,
    dropout: bool = True,
    spike: bool = True,
):
    """Two hands performing reach sequences, seen by a static or drifting camera.

    Returns ``(cameras, hands, flows)`` ready for :func:`format_track`.
    """
    n = int(round(seconds * fps))
    if moving_camera is None:
        moving_camera = bool(rng.random() < 0.5)
    cam_pos = np.zeros((n, 3))
    cam_eul = np.zeros((n, 3))
    if moving_camera:
        cam_pos = smooth_random(rng, n, 3, 0.05, knots=4)
        cam_eul = smooth_random(rng, n, 3, 0.05, knots=4)
    cams = [CameraTrackFrame(i, Pose(Rotation(euler_to_matrix(cam_eul[i])), cam_pos[i]), intrinsics) for i in range(n)]
    flow_level = 3.0 if moving_camera else 0.2
    flows = [FlowStats(i, float(abs(flow_level + rng.normal(scale=0.1)))) for i in range(n)]

    hands = []
    for side, x0 in (("left", -0.15), ("right", 0.15)):
        durations, total = [], 0
        while total < n:
            d = int(round(rng.uniform(0.8, 2.0) * fps))
            durations.append(d)
            total += d
        pts = _random_reach_points(rng, len(durations), [x0, 0.1, 0.55], 0.08, 0.25)
        # keep wrists in front of the camera
        pts = [np.array([p[0], p[1], np.clip(p[2], 0.3, 0.9)]) for p in pts]
        pos, _ = reach_sequence(pts, durations)
        pos = pos[:n] + rng.normal(scale=5e-4, size=(n, 3))
        eul = smooth_random(rng, n, 3, 0.3, knots=max(n // 45, 3)) + [math.pi, 0, 0]
        joints = smooth_random(rng, n, 45, 0.25, knots=max(n // 30, 3))
        valid = np.ones(n, dtype=bool)
        if dropout:
            start = int(rng.integers(n // 4, 3 * n // 4))
            valid[start: start + int(rng.integers(3, 10))] = False
        if spike:
            k = int(rng.integers(10, n - 10))
            pos[k] += rng.normal(size=3) * 0.3
        for i in range(n):
            if not valid[i]:
                continue
            world = Pose(Rotation(euler_to_matrix(eul[i])), pos[i])
            cam_space = cams[i].world_from_cam.inv() @ world
            hands.append(HandTrackFrame(i, side, cam_space, joints[i], True, float(np.clip(0.9 + rng.normal(scale=0.03), 0, 1))))
    return cams, hands, flows


def write_corpus(out_dir, n_videos: int = 10, seed: int = 0, seconds: float = 12.0, fps: float = 30.0) -> list[Path]:
    """Write ``n_videos`` synthetic track files named ``video_XXX.jsonl``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for i in range(n_videos):
        rng = np.random.default_rng([seed, i])
        cams, hands, flows = synthetic_video(rng, seconds=seconds, fps=fps)
        p = out / f"video_{i:03d}.jsonl"
        p.write_text(format_track(fps, DEFAULT_INTRINSICS, cams, hands, flows), encoding="utf-8")
        paths.append(p)
    return paths
