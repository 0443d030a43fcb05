"""Trajectory-aware augmentation: virtual-camera crops, horizontal flips, jitter gating.

An off-center crop is a virtual camera that shares the source optical
center, is rotated by ``R_aug`` (new camera -> old camera) and has a
centered principal point. Image pixels map as
``x_src ~ K_src R_aug K_new^-1 x_new`` and 3D points as ``p_new = R_aug^T p``.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, replace
from importlib import resources
from typing import Iterable

import numpy as np
from scipy.ndimage import map_coordinates

from .episode import Episode, Instruction, hand_slice, reexpress_actions, wrist_poses_in_camera
from .geom import CameraIntrinsics, FieldOfView, euler_to_matrix_batch, matrix_to_euler_batch, project_points
from .tracks import HANDS, NUM_JOINT_ANGLES, palm_positions

_M = np.diag([-1.0, 1.0, 1.0])
# per-axis sign of XYZ Euler angles under x-mirror conjugation
_EULER_MIRROR = np.array([1.0, -1.0, -1.0])
_JOINT_MIRROR = np.tile(_EULER_MIRROR, NUM_JOINT_ANGLES // 3)


@dataclass(frozen=True)
class AugmentParams:
    fov: float  # target horizontal FoV, radians
    aspect: float  # output width / height
    center_ray: tuple[float, float, float] = (0.0, 0.0, 1.0)
    flip: bool = False
    jitter: bool = False
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.fov < math.pi:
            raise ValueError("target FoV must be in (0, pi)")
        if not self.aspect > 0:
            raise ValueError("aspect must be positive")
        r = np.asarray(self.center_ray, dtype=float)
        if r.shape != (3,) or not r[2] > 0:
            raise ValueError("crop-center ray must point in front of the camera")

    @classmethod
    def identity(cls, k: CameraIntrinsics) -> "AugmentParams":
        return cls(k.fov().horizontal_rad, k.width / k.height)


@dataclass(frozen=True)
class WarpSpec:
    rotation: np.ndarray  # R_aug, new camera -> old camera
    k_new: CameraIntrinsics
    k_src: CameraIntrinsics

    @property
    def homography(self) -> np.ndarray:
        """Maps homogeneous output pixels to source pixels."""
        return self.k_src.matrix @ self.rotation @ np.linalg.inv(self.k_new.matrix)

    @property
    def is_identity(self) -> bool:
        return np.array_equal(self.rotation, np.eye(3)) and self.k_new == self.k_src


@dataclass(frozen=True)
class AugmentConfig:
    fov_scale: tuple[float, float] = (0.6, 1.0)
    aspect: tuple[float, float] = (0.75, 1.33)
    max_attempts: int = 20
    flip_prob: float = 0.5
    jitter_prob: float = 0.5


def rotation_between(a, b) -> np.ndarray:
    """Minimal rotation taking unit vector ``a`` onto unit vector ``b``."""
    a = np.asarray(a, dtype=float) / np.linalg.norm(a)
    b = np.asarray(b, dtype=float) / np.linalg.norm(b)
    v = np.cross(a, b)
    c = float(a @ b)
    s = np.linalg.norm(v)
    if s < 1e-15:
        if c > 0:
            return np.eye(3)
        raise ValueError("antiparallel vectors have no unique minimal rotation")
    vx = np.array([[0, -v[2], v[1]], [v[2], 0, -v[0]], [-v[1], v[0], 0]])
    return np.eye(3) + vx + vx @ vx * ((1 - c) / s**2)


def warp_spec(k_src: CameraIntrinsics, params: AugmentParams) -> WarpSpec:
    """Output keeps the source width; height follows the aspect; focal is isotropic."""
    src_fov = k_src.fov().horizontal_rad
    if params.fov > src_fov + 1e-12:
        raise ValueError(f"target FoV {params.fov:.4f} exceeds source FoV {src_fov:.4f}")
    w = k_src.width
    h = max(int(round(w / params.aspect)), 1)
    f = (w / 2.0) / math.tan(params.fov / 2.0)
    if abs(params.fov - src_fov) <= 1e-12 and h == k_src.height and k_src.focal_x == k_src.focal_y:
        f = k_src.focal_x  # exact identity crop, no rounding in the focal
    k_new = CameraIntrinsics(f, f, (w - 1) / 2.0, (h - 1) / 2.0, w, h)
    return WarpSpec(rotation_between([0.0, 0.0, 1.0], params.center_ray), k_new, k_src)


def warp_points(px_src: np.ndarray, spec: WarpSpec) -> np.ndarray:
    """Source pixels to output pixels (inverse homography)."""
    px = np.atleast_2d(np.asarray(px_src, dtype=float))
    hom = np.column_stack([px, np.ones(len(px))])
    H_inv = spec.k_new.matrix @ spec.rotation.T @ np.linalg.inv(spec.k_src.matrix)
    out = hom @ H_inv.T
    return out[:, :2] / out[:, 2:3]


def warp_image(image: np.ndarray, spec: WarpSpec) -> np.ndarray:
    """Bilinear resampling into the virtual camera; uncovered pixels are black."""
    img = np.asarray(image)
    if spec.is_identity:
        return img.copy()
    h, w = spec.k_new.height, spec.k_new.width
    v, u = np.mgrid[0:h, 0:w].astype(float)
    src = np.stack([u.ravel(), v.ravel(), np.ones(u.size)]).T @ spec.homography.T
    z = src[:, 2]
    ahead = z > 1e-12
    xs = np.where(ahead, src[:, 0] / np.where(ahead, z, 1.0), -1e6)
    ys = np.where(ahead, src[:, 1] / np.where(ahead, z, 1.0), -1e6)
    coords = np.stack([ys.reshape(h, w), xs.reshape(h, w)])
    planes = img[..., None] if img.ndim == 2 else img
    out = np.stack(
        [map_coordinates(planes[..., c].astype(float), coords, order=1, mode="constant", cval=0.0) for c in range(planes.shape[-1])],
        axis=-1,
    )
    if np.issubdtype(img.dtype, np.integer):
        info = np.iinfo(img.dtype)
        out = np.clip(np.rint(out), info.min, info.max)
    out = out.astype(img.dtype)
    return out[..., 0] if img.ndim == 2 else out


def transform_points(points: np.ndarray, spec: WarpSpec) -> np.ndarray:
    """Source-camera points into the virtual camera: ``p_new = R_aug^T p``."""
    return np.asarray(points, dtype=float) @ spec.rotation


def transform_poses(translations: np.ndarray, rotations: np.ndarray, spec: WarpSpec) -> tuple[np.ndarray, np.ndarray]:
    return transform_points(translations, spec), spec.rotation.T @ np.asarray(rotations, dtype=float)


def transform_episode(ep: Episode, spec: WarpSpec) -> Episode:
    """Re-express an episode in the virtual camera (actions, states, camera chain, FoV)."""
    Q = spec.rotation.T
    states = ep.states.astype(float).copy()
    for side in HANDS:
        o = hand_slice(side).start
        states[:, o:o + 3] = states[:, o:o + 3] @ Q.T
        states[:, o + 3:o + 6] = matrix_to_euler_batch(Q @ euler_to_matrix_batch(states[:, o + 3:o + 6]))
    states = np.where(ep.state_mask > 0, states, 0.0)
    actions = reexpress_actions(ep.actions, ep.action_mask, Q)
    return replace(
        ep,
        fov=FieldOfView.from_intrinsics(spec.k_new),
        states=states.astype(np.float32),
        actions=actions.astype(np.float32),
        cam_rotations=(Q @ ep.cam_rotations.astype(float) @ spec.rotation).astype(np.float32),
        cam_translations=(ep.cam_translations.astype(float) @ Q.T).astype(np.float32),
    )


def palm_trajectory(ep: Episode, t: int = 0) -> np.ndarray:
    """Palm points of every valid hand frame from ``t`` to the end, in the camera of frame ``t``."""
    pts = []
    for side in HANDS:
        tr, rot, valid = wrist_poses_in_camera(ep, side, t)
        pts.append(palm_positions(tr, rot)[valid])
    return np.concatenate(pts) if pts else np.zeros((0, 3))


def contain_trajectory(spec: WarpSpec, palm_points: np.ndarray, min_depth: float = 1e-6) -> bool:
    """True iff every visible palm vertex projects inside the output frame."""
    if len(palm_points) == 0:
        return True
    px, ahead = project_points(spec.k_new, transform_points(palm_points, spec), min_depth)
    px = px[ahead]
    w, h = spec.k_new.width, spec.k_new.height
    inside = (px[:, 0] >= -0.5) & (px[:, 0] <= w - 0.5) & (px[:, 1] >= -0.5) & (px[:, 1] <= h - 0.5)
    return bool(inside.all())


def random_params(rng: np.random.Generator, k_src: CameraIntrinsics, cfg: AugmentConfig = AugmentConfig(), seed: int = 0) -> AugmentParams:
    """One draw: FoV scale and log-uniform aspect, then a center ray that keeps
    the crop inside the source frustum where possible."""
    src = k_src.fov()
    fov = src.horizontal_rad * rng.uniform(*cfg.fov_scale)
    aspect = math.exp(rng.uniform(math.log(cfg.aspect[0]), math.log(cfg.aspect[1])))
    fov_v = 2 * math.atan(math.tan(fov / 2) / aspect)
    yaw_max = max(src.horizontal_rad - fov, 0.0) / 2
    pitch_max = max(src.vertical_rad - fov_v, 0.0) / 2
    yaw = rng.uniform(-yaw_max, yaw_max)
    pitch = rng.uniform(-pitch_max, pitch_max)
    ray = np.array([math.tan(yaw), math.tan(pitch), 1.0])
    ray /= np.linalg.norm(ray)
    return AugmentParams(fov, aspect, tuple(float(v) for v in ray), bool(rng.random() < cfg.flip_prob), bool(rng.random() < cfg.jitter_prob), seed)


def sample_params(
    k_src: CameraIntrinsics, palm_points: np.ndarray, seed: int, cfg: AugmentConfig = AugmentConfig()
) -> tuple[AugmentParams, WarpSpec, bool]:
    """Rejection-sample crops that keep the palm trajectory in frame.

    After ``max_attempts`` failures the identity crop is returned with
    ``accepted=False``. Fully determined by ``seed``.
    """
    rng = np.random.default_rng(seed)
    for _ in range(cfg.max_attempts):
        p = random_params(rng, k_src, cfg, seed)
        spec = warp_spec(k_src, p)
        if contain_trajectory(spec, palm_points):
            return p, spec, True
    p = AugmentParams.identity(k_src)
    return p, warp_spec(k_src, p), False


# ---------------------------------------------------------------------------
# flipping


_SIDE_WORD = re.compile(r"\b(left|right)\b", re.IGNORECASE)


def swap_side_words(text: str) -> str:
    def sub(m: re.Match) -> str:
        w = m.group(0)
        out = "right" if w.lower() == "left" else "left"
        if w.isupper():
            return out.upper()
        return out.capitalize() if w[0].isupper() else out

    return _SIDE_WORD.sub(sub, text)


def flip_instruction(ins: Instruction) -> Instruction:
    return Instruction(swap_side_words(ins.right_text), swap_side_words(ins.left_text))


def _mirror_blocks(x: np.ndarray) -> np.ndarray:
    """Mirror each hand block (translation x, Euler, joints) and swap the blocks."""
    out = np.empty_like(x)
    sign = np.concatenate([[-1.0, 1.0, 1.0], _EULER_MIRROR, _JOINT_MIRROR]).astype(x.dtype)
    for a, b in ((0, 1), (1, 0)):
        out[:, hand_slice(HANDS[b])] = x[:, hand_slice(HANDS[a])] * sign
    return out


def _swap_blocks(m: np.ndarray) -> np.ndarray:
    out = np.empty_like(m)
    out[:, hand_slice("left")] = m[:, hand_slice("right")]
    out[:, hand_slice("right")] = m[:, hand_slice("left")]
    return out


def flip_episode(ep: Episode) -> Episode:
    """Mirror about the image's vertical axis; an involution, exact on every tensor."""
    m = _M.astype(ep.cam_rotations.dtype)
    return replace(
        ep,
        hand="left" if ep.hand == "right" else "right",
        instruction=flip_instruction(ep.instruction),
        caption_variants=tuple(swap_side_words(c) for c in ep.caption_variants),
        states=_mirror_blocks(ep.states),
        state_mask=_swap_blocks(ep.state_mask),
        actions=_mirror_blocks(ep.actions),
        action_mask=_swap_blocks(ep.action_mask),
        cam_rotations=m @ ep.cam_rotations @ m,
        cam_translations=ep.cam_translations * np.array([-1, 1, 1], dtype=ep.cam_translations.dtype),
        flipped=not ep.flipped,
    )


def flip_image(image: np.ndarray) -> np.ndarray:
    return np.asarray(image)[:, ::-1].copy()


def flip_intrinsics(k: CameraIntrinsics) -> CameraIntrinsics:
    return replace(k, principal_x=k.width - 1 - k.principal_x)


def mirror_joint_angles(theta: np.ndarray) -> np.ndarray:
    return np.asarray(theta) * _JOINT_MIRROR


# ---------------------------------------------------------------------------
# color-jitter gating


def load_color_lexicon(path=None) -> frozenset[str]:
    if path is None:
        text = resources.files("handvla").joinpath("assets", "colors.txt").read_text(encoding="utf-8")
    else:
        with open(path, encoding="utf-8") as f:
            text = f.read()
    return frozenset(w.strip().casefold() for w in text.split() if w.strip() and not w.startswith("#"))


_WORD = re.compile(r"[^\W\d_]+", re.UNICODE)


def jitter_gate(instruction: str | Instruction, lexicon: Iterable[str] | None = None) -> bool:
    """Allow color jitter only if no token of the instruction names a color."""
    words = load_color_lexicon() if lexicon is None else {w.casefold() for w in lexicon}
    text = instruction.render() if isinstance(instruction, Instruction) else instruction
    return not any(tok.casefold() in words for tok in _WORD.findall(text))
