"""Episode assembly: action/state encoding, instructions, chunks, statistics, files.

Action layout (102 dims, per frame k -> k+1)::

    [dt_l(3), dr_l(3), theta_l(45), dt_r(3), dr_r(3), theta_r(45)]

``dt`` is the wrist translation difference, ``dr`` the Euler angles of the
left rotation delta ``R_{k+1} R_k^T`` and ``theta`` the absolute joint angles
of frame k+1. States share the layout with absolute wrist pose in place of
the deltas.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .geom import FieldOfView, euler_to_matrix_batch, matrix_to_euler_batch, relative_deltas_batch
from .retarget import JointMap
from .segment import CaptionedSegment
from .tracks import HANDS, NUM_JOINT_ANGLES, CameraTrack, HandTrack

HAND_DIM = 6 + NUM_JOINT_ANGLES
ACTION_DIM = 2 * HAND_DIM
NONE_TOKEN = "None"
VARIANCE_FLOOR = 1e-8


def hand_slice(side: str) -> slice:
    o = HANDS.index(side) * HAND_DIM
    return slice(o, o + HAND_DIM)


# ---------------------------------------------------------------------------
# actions and states


def build_actions(tracks_cam: Mapping[str, HandTrack], n_frames: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Encode camera-space hand tracks as ``(actions, masks)`` of shape ``(n-1, 102)``.

    Both tracks must share one camera frame and one frame grid. A hand block is
    live (mask 1) only when the hand is valid at both ends of the step; absent
    or invalid hands contribute zeros with mask 0.
    """
    if n_frames is None:
        if not tracks_cam:
            raise ValueError("no tracks and no frame count")
        n_frames = len(next(iter(tracks_cam.values())))
    n = max(n_frames - 1, 0)
    actions = np.zeros((n, ACTION_DIM))
    masks = np.zeros((n, ACTION_DIM))
    for side, tr in tracks_cam.items():
        if len(tr) != n_frames:
            raise ValueError(f"{side} track has {len(tr)} frames, expected {n_frames}")
        if n == 0:
            continue
        live = tr.valid[:-1] & tr.valid[1:]
        dt, dr = relative_deltas_batch(tr.translations, tr.rotations)
        block = np.concatenate([dt, dr, tr.joint_angles[1:]], axis=1)
        sl = hand_slice(side)
        actions[:, sl] = np.where(live[:, None], block, 0.0)
        masks[:, sl] = live[:, None]
    return actions, masks


def build_states(tracks_cam: Mapping[str, HandTrack], n_frames: int) -> tuple[np.ndarray, np.ndarray]:
    """Absolute wrist pose (Euler) and joint angles per frame, plus validity flags."""
    states = np.zeros((n_frames, ACTION_DIM))
    flags = np.zeros((n_frames, ACTION_DIM))
    for side, tr in tracks_cam.items():
        if len(tr) != n_frames:
            raise ValueError(f"{side} track has {len(tr)} frames, expected {n_frames}")
        block = np.concatenate([tr.translations, matrix_to_euler_batch(tr.rotations), tr.joint_angles], axis=1)
        sl = hand_slice(side)
        states[:, sl] = np.where(tr.valid[:, None], block, 0.0)
        flags[:, sl] = tr.valid[:, None]
    return states, flags


def integrate_actions(start_translation, start_rotation, actions: np.ndarray, side: str) -> tuple[np.ndarray, np.ndarray]:
    """Rebuild one hand's wrist translations and rotations from its action block."""
    sl = hand_slice(side)
    block = np.asarray(actions, dtype=float)[:, sl]
    n = len(block) + 1
    t = np.empty((n, 3))
    r = np.empty((n, 3, 3))
    t[0] = start_translation
    r[0] = start_rotation
    deltas = euler_to_matrix_batch(block[:, 3:6])
    for k in range(n - 1):
        t[k + 1] = t[k] + block[k, :3]
        r[k + 1] = deltas[k] @ r[k]
    return t, r


def reexpress_actions(actions: np.ndarray, masks: np.ndarray, rotation: np.ndarray) -> np.ndarray:
    """Actions seen from a camera rotated by ``rotation`` (new_from_old).

    ``dt -> Q dt`` and ``dR -> Q dR Q^T``; joint angles and masked entries
    are unchanged.
    """
    Q = np.asarray(rotation, dtype=float)
    out = np.array(actions, dtype=float)
    for side in HANDS:
        o = hand_slice(side).start
        out[:, o:o + 3] = out[:, o:o + 3] @ Q.T
        dR = euler_to_matrix_batch(out[:, o + 3:o + 6])
        out[:, o + 3:o + 6] = matrix_to_euler_batch(Q @ dR @ Q.T)
    return np.where(np.asarray(masks) > 0, out, 0.0)


# ---------------------------------------------------------------------------
# instructions


@dataclass(frozen=True)
class Instruction:
    left_text: str = NONE_TOKEN
    right_text: str = NONE_TOKEN

    def render(self) -> str:
        return f"Left hand: {self.left_text}. Right hand: {self.right_text}."

    def swapped(self) -> "Instruction":
        return Instruction(self.right_text, self.left_text)

    def text(self, side: str) -> str:
        return self.left_text if side == "left" else self.right_text

    def __str__(self) -> str:
        return self.render()


def _clean(caption: str | None) -> str:
    if caption is None:
        return NONE_TOKEN
    c = " ".join(caption.split()).rstrip(".")
    return c if c else NONE_TOKEN


def format_instruction(left: str | None = None, right: str | None = None) -> Instruction:
    """Missing or empty captions become the ``None`` token."""
    return Instruction(_clean(left), _clean(right))


def instruction_for(segment: CaptionedSegment, others: Iterable[CaptionedSegment]) -> Instruction:
    """Own caption in its slot; the other hand's slot holds the caption of the
    other-hand segment containing this segment's start frame, if any."""
    seg = segment.segment
    texts = {seg.handedness: segment.caption}
    for o in others:
        s = o.segment
        if s.source_video == seg.source_video and s.handedness != seg.handedness and s.start_frame <= seg.start_frame < s.end_frame:
            texts[s.handedness] = o.caption
            break
    return format_instruction(texts.get("left"), texts.get("right"))


# ---------------------------------------------------------------------------
# episodes


@dataclass(frozen=True)
class Episode:
    episode_id: str
    video: str
    hand: str
    start_frame: int
    end_frame: int
    fps: float
    fov: FieldOfView
    instruction: Instruction
    states: np.ndarray  # (n, 102) float32, camera space of each frame
    state_mask: np.ndarray  # (n, 102)
    actions: np.ndarray  # (n-1, 102) float32, camera frame of the first frame
    action_mask: np.ndarray  # (n-1, 102)
    cam_rotations: np.ndarray  # (n, 3, 3) first_from_k camera rotations
    caption_variants: tuple[str, ...] = ()
    flipped: bool = False
    cam_translations: np.ndarray | None = None  # (n, 3) first_from_k camera origins

    def __post_init__(self):
        n = self.end_frame - self.start_frame
        if self.cam_translations is None:
            object.__setattr__(self, "cam_translations", np.zeros((n, 3), dtype=np.float32))
        if self.cam_translations.shape != (n, 3):
            raise ValueError("cam_translations must be (n, 3)")
        if self.states.shape != (n, ACTION_DIM) or self.state_mask.shape != (n, ACTION_DIM):
            raise ValueError(f"states must be ({n}, {ACTION_DIM})")
        if self.actions.shape != (max(n - 1, 0), ACTION_DIM) or self.action_mask.shape != self.actions.shape:
            raise ValueError(f"actions must be ({n - 1}, {ACTION_DIM})")
        if self.cam_rotations.shape != (n, 3, 3):
            raise ValueError("cam_rotations must be (n, 3, 3)")
        if np.any(self.actions[self.action_mask == 0] != 0) or np.any(self.states[self.state_mask == 0] != 0):
            raise ValueError("masked entries must be zero")

    @property
    def n_frames(self) -> int:
        return self.end_frame - self.start_frame

    def __eq__(self, other) -> bool:
        if not isinstance(other, Episode):
            return NotImplemented
        return _header(self) == _header(other) and all(np.array_equal(a, b) for (_, a), (_, b) in zip(_tensors(self), _tensors(other)))

    __hash__ = None


def _f32(a) -> np.ndarray:
    return np.ascontiguousarray(a, dtype=np.float32)


def build_episode(
    item: CaptionedSegment,
    world_tracks: Mapping[str, HandTrack],
    cameras: CameraTrack,
    fps: float,
    others: Iterable[CaptionedSegment] = (),
    caption_variants: Sequence[str] = (),
) -> Episode:
    """Cut both hands to the segment's frames and encode them.

    Actions are expressed in the camera frame of the first episode frame;
    states use each frame's own camera. ``cam_rotations`` lets consumers
    re-express actions into any later frame's camera.
    """
    seg = item.segment
    a, b = seg.start_frame, seg.end_frame
    rows = np.searchsorted(cameras.frames, np.arange(a, b))
    if np.any(rows >= len(cameras.frames)) or np.any(cameras.frames[np.minimum(rows, len(cameras.frames) - 1)] != np.arange(a, b)):
        raise ValueError(f"camera track does not cover frames [{a}, {b})")
    Rc = cameras.rotations[rows]
    tc = cameras.translations[rows]
    first_t, first_R = tc[0], Rc[0]
    in_first, per_frame = {}, {}
    for side in HANDS:
        tr = world_tracks[side]
        r0, r1 = tr.row_of(a), tr.row_of(b - 1) + 1
        cut = tr.slice(r0, r1)
        # x_cam = R_c^T (x_world - t_c)
        in_first[side] = replace(cut, translations=(cut.translations - first_t) @ first_R, rotations=first_R.T @ cut.rotations)
        per_frame[side] = replace(
            cut,
            translations=np.einsum("nji,nj->ni", Rc, cut.translations - tc),
            rotations=np.swapaxes(Rc, 1, 2) @ cut.rotations,
        )
    n = b - a
    actions, amask = build_actions(in_first, n)
    states, smask = build_states(per_frame, n)
    return Episode(
        episode_id=seg.id,
        video=seg.source_video,
        hand=seg.handedness,
        start_frame=a,
        end_frame=b,
        fps=float(fps),
        fov=FieldOfView.from_intrinsics(cameras.intrinsics),
        instruction=instruction_for(item, others),
        states=_f32(states),
        state_mask=_f32(smask),
        actions=_f32(actions),
        action_mask=_f32(amask),
        cam_rotations=_f32(first_R.T @ Rc),
        cam_translations=_f32((tc - first_t) @ first_R),
        caption_variants=tuple(caption_variants),
    )


def wrist_poses_in_camera(ep: Episode, side: str, t: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Wrist translations/rotations of frames ``t..end`` in the camera of frame ``t``.

    Returns ``(translations, rotations, valid)`` built from the absolute
    states, so no integration drift accumulates.
    """
    sl = hand_slice(side)
    st = ep.states[t:, sl].astype(float)
    valid = ep.state_mask[t:, sl.start] > 0
    C = ep.cam_rotations.astype(float)
    c = ep.cam_translations.astype(float)
    # own camera -> first camera -> camera t
    Ct, ct = C[t], c[t]
    Ck, ck = C[t:], c[t:]
    p_first = np.einsum("nij,nj->ni", Ck, st[:, :3]) + ck
    trans = (p_first - ct) @ Ct
    rots = Ct.T @ Ck @ euler_to_matrix_batch(st[:, 3:6])
    return trans, rots, valid


def export_robot(ep: Episode, jmap: JointMap) -> Episode:
    """Zero (and mask out) joint-angle dims the robot has no joint for."""
    keep = np.ones(ACTION_DIM, dtype=np.float32)
    for side in HANDS:
        o = hand_slice(side).start + 6
        keep[o:o + NUM_JOINT_ANGLES] = jmap.human_mask
    return replace(
        ep,
        actions=ep.actions * keep,
        action_mask=ep.action_mask * keep,
        states=ep.states * keep,
        state_mask=ep.state_mask * keep,
    )


# ---------------------------------------------------------------------------
# chunks


@dataclass(frozen=True)
class Chunk:
    start: int
    actions: np.ndarray  # (N, 102)
    mask: np.ndarray  # (N, 102)
    valid: np.ndarray  # (N,) step validity


def chunk_at(actions: np.ndarray, masks: np.ndarray, t: int, n: int = 16) -> Chunk:
    """Steps ``t .. t+n-1``; steps past the end are zero with validity 0."""
    if n < 1:
        raise ValueError("chunk length must be >= 1")
    m = len(actions)
    if not 0 <= t < max(m, 1):
        raise ValueError(f"chunk start {t} outside [0, {m})")
    k = min(n, m - t)
    a = np.zeros((n, actions.shape[1]), dtype=actions.dtype)
    mk = np.zeros((n, actions.shape[1]), dtype=masks.dtype)
    valid = np.zeros(n, dtype=np.float32)
    a[:k] = actions[t:t + k]
    mk[:k] = masks[t:t + k]
    valid[:k] = 1
    return Chunk(t, a, mk, valid)


def make_chunks(ep: Episode, n: int = 16, stride: int = 1) -> list[Chunk]:
    """Chunks starting at ``0, stride, 2*stride, ...``; ``stride <= n`` so every step is covered."""
    if n < 1 or stride < 1:
        raise ValueError("chunk length and stride must be >= 1")
    if stride > n:
        raise ValueError(f"stride {stride} > chunk length {n} would skip steps")
    return [chunk_at(ep.actions, ep.action_mask, t, n) for t in range(0, len(ep.actions), stride)]


# ---------------------------------------------------------------------------
# normalization statistics


@dataclass(frozen=True)
class Moments:
    """Per-dimension mean, population variance and sample count."""

    mean: np.ndarray
    var: np.ndarray
    count: np.ndarray

    @property
    def flagged(self) -> np.ndarray:
        """Dims with no samples or (near) zero variance."""
        return (self.count == 0) | (self.var < VARIANCE_FLOOR)

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "var": self.var.tolist(), "count": self.count.tolist()}

    @classmethod
    def from_dict(cls, d: Mapping) -> "Moments":
        return cls(np.asarray(d["mean"], dtype=float), np.asarray(d["var"], dtype=float), np.asarray(d["count"], dtype=float))


class MomentAccumulator:
    """Mergeable streaming mean/variance over masked entries (Chan et al. update)."""

    def __init__(self, dim: int = ACTION_DIM):
        self.count = np.zeros(dim)
        self.mean = np.zeros(dim)
        self.m2 = np.zeros(dim)

    def update(self, x: np.ndarray, mask: np.ndarray | None = None) -> "MomentAccumulator":
        x = np.asarray(x, dtype=float).reshape(-1, len(self.mean))
        w = np.ones_like(x) if mask is None else (np.asarray(mask).reshape(x.shape) > 0).astype(float)
        nb = w.sum(axis=0)
        safe = np.maximum(nb, 1)
        mb = (x * w).sum(axis=0) / safe
        m2b = (w * (x - mb) ** 2).sum(axis=0)
        self._merge(nb, mb, m2b)
        return self

    def _merge(self, nb, mb, m2b) -> None:
        n = self.count + nb
        safe = np.maximum(n, 1)
        delta = mb - self.mean
        self.mean = np.where(n > 0, self.mean + delta * nb / safe, 0.0)
        self.m2 = self.m2 + m2b + delta**2 * self.count * nb / safe
        self.count = n

    def merge(self, other: "MomentAccumulator") -> "MomentAccumulator":
        self._merge(other.count, other.mean, other.m2)
        return self

    def moments(self) -> Moments:
        var = np.where(self.count > 0, self.m2 / np.maximum(self.count, 1), 0.0)
        return Moments(self.mean.copy(), np.maximum(var, 0.0), self.count.copy())


@dataclass(frozen=True)
class NormStats:
    state: Moments
    action: Moments

    def to_dict(self) -> dict:
        return {"state": self.state.to_dict(), "action": self.action.to_dict()}

    @classmethod
    def from_dict(cls, d: Mapping) -> "NormStats":
        return cls(Moments.from_dict(d["state"]), Moments.from_dict(d["action"]))


def compute_norm_stats(episodes: Iterable[Episode]) -> NormStats:
    """One pass over the episodes, counting only mask=1 entries."""
    sa, aa = MomentAccumulator(), MomentAccumulator()
    seen = False
    for ep in episodes:
        seen = True
        sa.update(ep.states, ep.state_mask)
        aa.update(ep.actions, ep.action_mask)
    if not seen:
        raise ValueError("no episodes")
    return NormStats(sa.moments(), aa.moments())


def pool_moments(parts: Sequence[Moments], weights: Sequence[float]) -> Moments:
    """Mixture moments: ``mu = sum w mu_d``, ``var = sum w (var_d + mu_d^2) - mu^2``.

    Per dimension, datasets with no samples drop out and the remaining
    weights are renormalized.
    """
    w = np.asarray(weights, dtype=float)
    if len(w) != len(parts) or len(w) == 0:
        raise ValueError("need one weight per dataset")
    if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-9:
        raise ValueError(f"weights must be non-negative and sum to 1 (got {w.sum()!r})")
    mu = np.stack([p.mean for p in parts])
    var = np.stack([p.var for p in parts])
    cnt = np.stack([p.count for p in parts])
    wd = w[:, None] * (cnt > 0)
    tot = wd.sum(axis=0)
    wd = np.divide(wd, tot, out=np.zeros_like(wd), where=tot > 0)
    mean = (wd * mu).sum(axis=0)
    v = (wd * (var + mu**2)).sum(axis=0) - mean**2
    return Moments(mean, np.maximum(v, 0.0), cnt.sum(axis=0))


def pool_norm_stats(stats: Sequence[NormStats], weights: Sequence[float]) -> NormStats:
    return NormStats(pool_moments([s.state for s in stats], weights), pool_moments([s.action for s in stats], weights))


def normalize(x, m: Moments, mask=None) -> np.ndarray:
    out = (np.asarray(x, dtype=float) - m.mean) / np.sqrt(np.maximum(m.var, VARIANCE_FLOOR))
    return out if mask is None else np.where(np.asarray(mask) > 0, out, 0.0)


def denormalize(z, m: Moments, mask=None) -> np.ndarray:
    out = np.asarray(z, dtype=float) * np.sqrt(np.maximum(m.var, VARIANCE_FLOOR)) + m.mean
    return out if mask is None else np.where(np.asarray(mask) > 0, out, 0.0)


# ---------------------------------------------------------------------------
# episode files


MAGIC = b"HANDVLA-EPISODE\n"
FORMAT_VERSION = 1
_TENSORS = ("states", "state_mask", "actions", "action_mask", "cam_rotations", "cam_translations")


class EpisodeFormatError(ValueError):
    pass


class EpisodeVersionError(EpisodeFormatError):
    pass


class EpisodeChecksumError(EpisodeFormatError):
    pass


class EpisodeTruncatedError(EpisodeFormatError):
    pass


def _checksum(data: bytes) -> str:
    return hashlib.blake2b(data, digest_size=8).hexdigest()


def _header(ep: Episode) -> dict:
    return {
        "id": ep.episode_id,
        "video": ep.video,
        "hand": ep.hand,
        "start_frame": ep.start_frame,
        "end_frame": ep.end_frame,
        "fps": ep.fps,
        "fov": [ep.fov.horizontal_rad, ep.fov.vertical_rad],
        "instruction": {"left": ep.instruction.left_text, "right": ep.instruction.right_text},
        "caption_variants": list(ep.caption_variants),
        "flipped": ep.flipped,
    }


def _tensors(ep: Episode) -> list[tuple[str, np.ndarray]]:
    return [(name, getattr(ep, name)) for name in _TENSORS]


def episode_bytes(ep: Episode) -> bytes:
    blobs = [(name, _f32(a)) for name, a in _tensors(ep)]
    block = b"".join(a.astype("<f4").tobytes() for _, a in blobs)
    header = {
        "version": FORMAT_VERSION,
        **_header(ep),
        "tensors": [{"name": n, "shape": list(a.shape)} for n, a in blobs],
        "nbytes": len(block),
        "checksum": _checksum(block),
    }
    return MAGIC + json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8") + b"\n" + block


def serialize_episode(path, ep: Episode) -> None:
    p = Path(path)
    tmp = p.with_name(p.name + ".tmp")
    tmp.write_bytes(episode_bytes(ep))
    tmp.replace(p)


def parse_episode(data: bytes) -> Episode:
    if not data.startswith(MAGIC):
        raise EpisodeFormatError("not an episode file (bad magic)")
    nl = data.find(b"\n", len(MAGIC))
    if nl < 0:
        raise EpisodeTruncatedError("header line not terminated")
    try:
        h = json.loads(data[len(MAGIC):nl].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise EpisodeFormatError(f"bad header: {e}") from None
    if not isinstance(h, dict):
        raise EpisodeFormatError("header is not an object")
    if h.get("version") != FORMAT_VERSION:
        raise EpisodeVersionError(f"unsupported episode version {h.get('version')!r}")
    block = data[nl + 1:]
    try:
        nbytes = int(h["nbytes"])
        specs = [(t["name"], tuple(int(s) for s in t["shape"])) for t in h["tensors"]]
        if len(block) < nbytes:
            raise EpisodeTruncatedError(f"tensor block has {len(block)} of {nbytes} bytes")
        if len(block) > nbytes:
            raise EpisodeFormatError("trailing bytes after tensor block")
        if _checksum(block) != h["checksum"]:
            raise EpisodeChecksumError("tensor block checksum mismatch")
        if [n for n, _ in specs] != list(_TENSORS):
            raise EpisodeFormatError("unexpected tensor list")
        arrays, off = {}, 0
        for name, shape in specs:
            if any(s < 0 for s in shape):
                raise EpisodeFormatError(f"negative shape for {name}")
            size = 4 * math.prod(shape)
            if off + size > nbytes:
                raise EpisodeFormatError("tensor shapes exceed the block")
            arrays[name] = np.frombuffer(block, dtype="<f4", count=size // 4, offset=off).reshape(shape).astype(np.float32)
            off += size
        if off != nbytes:
            raise EpisodeFormatError("tensor shapes do not fill the block")
        ins = h["instruction"]
        return Episode(
            episode_id=str(h["id"]),
            video=str(h["video"]),
            hand=str(h["hand"]),
            start_frame=int(h["start_frame"]),
            end_frame=int(h["end_frame"]),
            fps=float(h["fps"]),
            fov=FieldOfView(float(h["fov"][0]), float(h["fov"][1])),
            instruction=Instruction(str(ins["left"]), str(ins["right"])),
            caption_variants=tuple(str(c) for c in h["caption_variants"]),
            flipped=bool(h["flipped"]),
            **arrays,
        )
    except EpisodeFormatError:
        raise
    except (KeyError, TypeError, ValueError, IndexError, OverflowError) as e:
        raise EpisodeFormatError(f"invalid episode: {e}") from None


def load_episode(path) -> Episode:
    return parse_episode(Path(path).read_bytes())


# ---------------------------------------------------------------------------
# dataset index


@dataclass(frozen=True)
class IndexEntry:
    path: str
    weight: float
    dataset: str = ""


def write_index(path, entries: Iterable[IndexEntry]) -> None:
    lines = [json.dumps({"path": e.path, "weight": e.weight, "dataset": e.dataset}, sort_keys=True) for e in entries]
    Path(path).write_text("".join(line + "\n" for line in lines), encoding="utf-8")


def read_index(path) -> list[IndexEntry]:
    out = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if line.strip():
            d = json.loads(line)
            out.append(IndexEntry(d["path"], float(d["weight"]), d.get("dataset", "")))
    return out
