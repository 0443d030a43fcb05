"""Revolute hand chains, forward kinematics and teleoperation retargeting.

Two retargeting routes are provided. ``dexpilot_solve`` fits fingertip
vectors with a box-constrained Gauss-Newton solver. ``angle_match_retarget``
maps glove bone angles linearly onto robot joints and only optimizes the
lateral swing DoFs of thumb and index.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from importlib import resources
from itertools import combinations
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .geom import axis_angle_matrix, euler_to_matrix

FINGERS = ("thumb", "index", "middle", "ring", "pinky")
TIP_SITES = tuple(f"{f}_tip" for f in FINGERS)
GLOVE_KEYPOINTS = ("wrist",) + tuple(
    f"{f}_{p}"
    for f, parts in zip(FINGERS, [("cmc", "mcp", "ip", "tip")] + [("mcp", "pip", "dip", "tip")] * 4)
    for p in parts
)
# 5 wrist->tip vectors, then the 10 tip->tip pairs
VECTOR_PAIRS = tuple(("wrist", t) for t in TIP_SITES) + tuple(combinations(TIP_SITES, 2))

_MIRROR = np.diag([-1.0, 1.0, 1.0])


class DegenerateKeypointError(ValueError):
    pass


# ---------------------------------------------------------------------------
# chain description


@dataclass(frozen=True)
class Joint:
    name: str
    parent: str | None  # None attaches to the chain root (wrist frame)
    offset: np.ndarray  # 4x4 fixed transform from the parent frame
    axis: np.ndarray
    lower: float
    upper: float


@dataclass(frozen=True)
class Site:
    name: str
    parent: str | None
    translation: np.ndarray


def _offset(translation, euler=(0.0, 0.0, 0.0)) -> np.ndarray:
    T = np.eye(4)
    T[:3, :3] = euler_to_matrix(euler)
    T[:3, 3] = translation
    return T


@dataclass(frozen=True)
class KinematicChain:
    name: str
    joints: tuple[Joint, ...]
    sites: tuple[Site, ...]
    _parent_idx: np.ndarray = field(init=False, repr=False, compare=False)
    _site_idx: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        index: dict[str, int] = {}
        parents = []
        for i, j in enumerate(self.joints):
            if j.name in index:
                raise ValueError(f"duplicate joint {j.name!r}")
            if j.parent is not None and j.parent not in index:
                # parents must precede children, which also rules out cycles
                raise ValueError(f"joint {j.name!r}: parent {j.parent!r} not defined before it")
            if abs(np.linalg.norm(j.axis) - 1.0) > 1e-9:
                raise ValueError(f"joint {j.name!r}: axis is not unit length")
            if j.lower > j.upper:
                raise ValueError(f"joint {j.name!r}: lower limit above upper")
            index[j.name] = i
            parents.append(-1 if j.parent is None else index[j.parent])
        site_idx = {}
        for s in self.sites:
            if s.parent is not None and s.parent not in index:
                raise ValueError(f"site {s.name!r}: unknown parent {s.parent!r}")
            site_idx[s.name] = len(site_idx)
        object.__setattr__(self, "_parent_idx", np.array(parents, dtype=int))
        object.__setattr__(self, "_site_idx", site_idx)

    @property
    def dof(self) -> int:
        return len(self.joints)

    @property
    def joint_names(self) -> list[str]:
        return [j.name for j in self.joints]

    @property
    def site_names(self) -> list[str]:
        return [s.name for s in self.sites]

    @property
    def lower(self) -> np.ndarray:
        return np.array([j.lower for j in self.joints])

    @property
    def upper(self) -> np.ndarray:
        return np.array([j.upper for j in self.joints])

    def site_index(self, name: str) -> int:
        return self._site_idx[name]

    def joint_index(self, name: str) -> int:
        return self.joint_names.index(name)

    def clamp(self, q) -> np.ndarray:
        return np.clip(q, self.lower, self.upper)

    def ancestors(self, parent: str | None) -> list[int]:
        """Indices of the joints on the path from the root to ``parent``."""
        out = []
        i = -1 if parent is None else self.joint_index(parent)
        while i >= 0:
            out.append(i)
            i = self._parent_idx[i]
        return out[::-1]

    def mirrored(self, name: str | None = None) -> "KinematicChain":
        """Left/right mirror image under x -> -x.

        Axes are kept, so joints about x keep their angle while joints about
        axes in the yz-plane flip sign; see :meth:`mirror_signs`.
        """
        signs = self.mirror_signs()
        joints = []
        for j, s in zip(self.joints, signs):
            T = j.offset.copy()
            T[:3, :3] = _MIRROR @ T[:3, :3] @ _MIRROR
            T[:3, 3] = _MIRROR @ T[:3, 3]
            lo, hi = (j.lower, j.upper) if s > 0 else (-j.upper, -j.lower)
            joints.append(Joint(j.name, j.parent, T, j.axis, lo, hi))
        sites = [Site(s.name, s.parent, _MIRROR @ s.translation) for s in self.sites]
        return KinematicChain(name or self.name + "_mirrored", tuple(joints), tuple(sites))

    def mirror_signs(self) -> np.ndarray:
        signs = []
        for j in self.joints:
            a = j.axis
            if abs(abs(a[0]) - 1.0) < 1e-12:
                signs.append(1.0)
            elif abs(a[0]) < 1e-12:
                signs.append(-1.0)
            else:
                raise ValueError(f"joint {j.name!r}: axis neither along nor orthogonal to x, cannot mirror in place")
        return np.array(signs)

    # -- (de)serialization ------------------------------------------------

    @classmethod
    def from_dict(cls, d: Mapping) -> "KinematicChain":
        joints = []
        for jd in d["joints"]:
            axis = np.asarray(jd["axis"], dtype=float)
            n = np.linalg.norm(axis)
            if n == 0:
                raise ValueError(f"joint {jd['name']!r}: zero axis")
            lo, hi = jd["limits"]
            joints.append(
                Joint(jd["name"], jd.get("parent"), _offset(jd.get("translation", (0, 0, 0)), jd.get("euler", (0, 0, 0))), axis / n, float(lo), float(hi))
            )
        sites = [Site(s["name"], s.get("parent"), np.asarray(s["translation"], dtype=float)) for s in d.get("sites", [])]
        return cls(d.get("name", "chain"), tuple(joints), tuple(sites))

    @classmethod
    def load(cls, path) -> "KinematicChain":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def load_asset_chain(name: str) -> KinematicChain:
    """Bundled chains: ``mano_like_right``, ``mano_like_left`` and ``xhand_like``."""
    if name == "mano_like_left":
        return load_asset_chain("mano_like_right").mirrored("mano_like_left")
    text = resources.files("handvla").joinpath("assets", f"{name}.json").read_text(encoding="utf-8")
    return KinematicChain.from_dict(json.loads(text))


def mano_like_chain(handedness: str) -> KinematicChain:
    return load_asset_chain(f"mano_like_{handedness}")


# ---------------------------------------------------------------------------
# forward kinematics


@dataclass(frozen=True)
class FKResult:
    joint_frames: np.ndarray  # (n_joints, 4, 4), frame after the joint rotation
    site_positions: np.ndarray  # (n_sites, 3)
    clamped: bool

    def site(self, chain: KinematicChain, name: str) -> np.ndarray:
        return self.site_positions[chain.site_index(name)]


def _check_q(chain: KinematicChain, q) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    if q.shape != (chain.dof,):
        raise ValueError(f"expected {chain.dof} joint values, got shape {q.shape}")
    return q


def forward_kinematics(chain: KinematicChain, q, clamp: bool = True) -> FKResult:
    """Poses of every joint frame and positions of every site.

    Out-of-limit values are clamped (and flagged) unless ``clamp`` is False.
    """
    q = _check_q(chain, q)
    qc = chain.clamp(q) if clamp else q
    clamped = bool(np.any(qc != q))
    frames = np.empty((chain.dof, 4, 4))
    for i, j in enumerate(chain.joints):
        p = chain._parent_idx[i]
        T = j.offset if p < 0 else frames[p] @ j.offset
        R = np.eye(4)
        R[:3, :3] = axis_angle_matrix(j.axis, qc[i])
        frames[i] = T @ R
    sites = np.empty((len(chain.sites), 3))
    for k, s in enumerate(chain.sites):
        if s.parent is None:
            sites[k] = s.translation
        else:
            T = frames[chain.joint_index(s.parent)]
            sites[k] = T[:3, :3] @ s.translation + T[:3, 3]
    return FKResult(frames, sites, clamped)


def fk_jacobian(chain: KinematicChain, q, fk: FKResult | None = None) -> np.ndarray:
    """Site-position Jacobian of shape ``(n_sites, 3, n_joints)``.

    Column j of site s is ``w_j x (p_s - o_j)`` when joint j lies on the
    site's root path and zero otherwise.
    """
    q = _check_q(chain, q)
    if fk is None:
        fk = forward_kinematics(chain, q)
    J = np.zeros((len(chain.sites), 3, chain.dof))
    # world-frame axes and origins; the axis is fixed by its own rotation
    w = np.einsum("nij,nj->ni", fk.joint_frames[:, :3, :3], np.array([j.axis for j in chain.joints]))
    o = fk.joint_frames[:, :3, 3]
    for k, s in enumerate(chain.sites):
        idx = chain.ancestors(s.parent)
        if idx:
            J[k][:, idx] = np.cross(w[idx], fk.site_positions[k] - o[idx]).T
    return J


# ---------------------------------------------------------------------------
# fingertip-vector retargeting


@dataclass(frozen=True)
class RetargetConfig:
    alpha: float = 1.0
    beta: float = 1e-3
    s_near: float = 200.0
    d_eps: float = 0.03
    tol: float = 1e-6
    max_iter: int = 200

    def __post_init__(self):
        if not self.alpha > 0:
            raise ValueError("alpha must be positive")
        if self.beta < 0:
            raise ValueError("beta must be non-negative")
        if self.s_near < 1:
            raise ValueError("s_near must be at least 1")


def switching_weight(d, config: RetargetConfig = RetargetConfig()):
    """Contact-encouraging weight: ``s_near`` below ``d_eps``, else 1."""
    d = np.asarray(d, dtype=float)
    if np.any(d < 0):
        raise ValueError("distances must be non-negative")
    out = np.where(d < config.d_eps, config.s_near, 1.0)
    return float(out) if out.ndim == 0 else out


def dexpilot_vectors(points: Mapping[str, np.ndarray] | np.ndarray, names: Sequence[str] | None = None) -> np.ndarray:
    """The 15 task vectors (5 wrist->tip, 10 tip->tip) as a ``(15, 3)`` array."""
    if names is not None:
        points = dict(zip(names, points))
    return np.array([np.asarray(points[b]) - np.asarray(points[a]) for a, b in VECTOR_PAIRS], dtype=float)


@dataclass
class SolveResult:
    q: np.ndarray
    objective: float
    converged: bool
    iterations: int
    history: list[float]


class VectorObjective:
    """Weighted vector-matching objective with a temporal smoothness term."""

    def __init__(self, chain: KinematicChain, pairs, targets: np.ndarray, weights: np.ndarray, beta: float, q_prev: np.ndarray, joints=None):
        self.chain = chain
        self.a = np.array([chain.site_index(a) for a, _ in pairs])
        self.b = np.array([chain.site_index(b) for _, b in pairs])
        self.targets = np.asarray(targets, dtype=float)
        self.sw = np.sqrt(np.asarray(weights, dtype=float))
        self.beta = beta
        self.q_prev = np.asarray(q_prev, dtype=float)
        # optional subset of joints being optimized; the rest stay at q_prev
        self.joints = np.arange(chain.dof) if joints is None else np.asarray(joints, dtype=int)

    def _full(self, x):
        q = self.q_prev.copy()
        q[self.joints] = x
        return q

    def residual(self, x, jac: bool = False):
        q = self._full(x)
        fk = forward_kinematics(self.chain, q, clamp=False)
        p = fk.site_positions
        vec = p[self.b] - p[self.a]
        r = np.concatenate([((self.targets - vec) * self.sw[:, None]).ravel(), math.sqrt(self.beta) * (x - self.q_prev[self.joints])])
        if not jac:
            return r
        J = fk_jacobian(self.chain, q, fk)[:, :, self.joints]
        Jv = -(J[self.b] - J[self.a]) * self.sw[:, None, None]
        Jr = np.vstack([Jv.reshape(-1, len(self.joints)), math.sqrt(self.beta) * np.eye(len(self.joints))])
        return r, Jr

    def value(self, x) -> float:
        r = self.residual(x)
        return float(r @ r)


def solve_box_least_squares(obj: VectorObjective, x0, lower, upper, tol: float = 1e-6, max_iter: int = 200) -> SolveResult:
    """Projected Gauss-Newton with an active set and Armijo backtracking.

    Every accepted step satisfies the sufficient-decrease condition, so the
    objective history is non-increasing. Falls back to a projected gradient
    step whenever the Gauss-Newton direction fails the line search.
    """
    x = np.clip(np.asarray(x0, dtype=float), lower, upper)
    r, J = obj.residual(x, jac=True)
    f = float(r @ r)
    history = [f]
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        g = 2.0 * J.T @ r
        pg = x - np.clip(x - g, lower, upper)
        if np.linalg.norm(pg) < tol or f == 0.0:
            converged = True
            break
        at_lo = (x <= lower) & (g > 0)
        at_hi = (x >= upper) & (g < 0)
        free = ~(at_lo | at_hi)
        d = np.zeros_like(x)
        if free.any():
            Jf = J[:, free]
            H = Jf.T @ Jf
            H[np.diag_indices_from(H)] += 1e-12 * (1.0 + np.trace(H))
            d[free] = -np.linalg.solve(H, Jf.T @ r)
        accepted = False
        for direction in (d, -g):
            t = 1.0
            for _ in range(40):
                x_new = np.clip(x + t * direction, lower, upper)
                step = x_new - x
                if not step.any():
                    break
                f_new = obj.value(x_new)
                if f_new <= f + 1e-4 * float(g @ step) and f_new <= f:
                    accepted = True
                    break
                t *= 0.5
            if accepted:
                break
        if not accepted:
            # no descent along either direction; stationary to working precision
            converged = bool(np.linalg.norm(pg) < math.sqrt(tol))
            break
        x = x_new
        r, J = obj.residual(x, jac=True)
        f = float(r @ r)
        history.append(f)
    else:
        g = 2.0 * J.T @ r
        converged = bool(np.linalg.norm(x - np.clip(x - g, lower, upper)) < tol)
    return SolveResult(obj._full(x), f, converged, it, history)


def dexpilot_solve(chain: KinematicChain, human_vectors: np.ndarray, q_prev, config: RetargetConfig = RetargetConfig()) -> SolveResult:
    """Fit the chain's 15 task vectors to ``alpha`` times the human vectors."""
    v = np.asarray(human_vectors, dtype=float)
    if v.shape != (len(VECTOR_PAIRS), 3):
        raise ValueError(f"expected {len(VECTOR_PAIRS)} human vectors, got shape {v.shape}")
    q_prev = chain.clamp(_check_q(chain, q_prev))
    weights = np.asarray(switching_weight(np.linalg.norm(v, axis=1), config))
    obj = VectorObjective(chain, VECTOR_PAIRS, config.alpha * v, weights, config.beta, q_prev)
    return solve_box_least_squares(obj, q_prev, chain.lower, chain.upper, config.tol, config.max_iter)


# ---------------------------------------------------------------------------
# bone-angle matching


def bone_angle(keypoints: Mapping[str, np.ndarray], triplet: tuple[str, str, str], ref_axis) -> float:
    """Angle at B between bones B->A and B->C, signed by ``(BA x BC) . ref``."""
    a, b, c = (np.asarray(keypoints[k], dtype=float) for k in triplet)
    u, v = a - b, c - b
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu <= 1e-9 or nv <= 1e-9:
        raise DegenerateKeypointError(f"degenerate bone in {triplet}")
    theta = math.acos(float(np.clip(u @ v / (nu * nv), -1.0, 1.0)))
    return -theta if float(np.cross(u, v) @ np.asarray(ref_axis, dtype=float)) < 0 else theta


def angle_match_map(theta_h: float, h_range: tuple[float, float], r_range: tuple[float, float]) -> float:
    """Affine map of the human range onto the robot range, then clip.

    ``r_range`` is ``(robot value at h_min, robot value at h_max)`` and may be
    decreasing; the clip uses the sorted interval.
    """
    h_min, h_max = h_range
    if not h_max > h_min:
        raise ValueError(f"inverted human range {h_range}")
    r0, r1 = r_range
    out = (theta_h - h_min) / (h_max - h_min) * (r1 - r0) + r0
    return float(np.clip(out, min(r0, r1), max(r0, r1)))


@dataclass(frozen=True)
class AngleJoint:
    robot_joint: str
    triplet: tuple[str, str, str]
    ref_axis: tuple[float, float, float]  # in the glove hand frame
    h_range: tuple[float, float]
    r_range: tuple[float, float]


@dataclass(frozen=True)
class AngleMatchSpec:
    joints: tuple[AngleJoint, ...]
    lateral_joints: tuple[str, ...]
    lateral_vectors: tuple[tuple[str, str], ...]  # keypoint/site name pairs, e.g. wrist->thumb_tip

    @classmethod
    def from_dict(cls, d: Mapping) -> "AngleMatchSpec":
        joints = tuple(
            AngleJoint(j["robot_joint"], tuple(j["triplet"]), tuple(j["ref_axis"]), tuple(j["h_range"]), tuple(j["r_range"])) for j in d["joints"]
        )
        return cls(joints, tuple(d.get("lateral_joints", ())), tuple(tuple(p) for p in d.get("lateral_vectors", ())))


def glove_hand_frame(keypoints: Mapping[str, np.ndarray]) -> np.ndarray:
    """Rotation whose columns are the glove hand axes (x lateral, y palm normal, z forward)."""
    w = np.asarray(keypoints["wrist"], dtype=float)
    z = np.asarray(keypoints["middle_mcp"], dtype=float) - w
    lat = np.asarray(keypoints["pinky_mcp"], dtype=float) - np.asarray(keypoints["index_mcp"], dtype=float)
    z = z / np.linalg.norm(z)
    x = lat - (lat @ z) * z
    nx = np.linalg.norm(x)
    if nx < 1e-9:
        raise DegenerateKeypointError("palm keypoints are collinear")
    x /= nx
    return np.column_stack([x, np.cross(z, x), z])


def angle_match_retarget(
    chain: KinematicChain,
    keypoints: Mapping[str, np.ndarray],
    spec: AngleMatchSpec,
    q_prev,
    config: RetargetConfig = RetargetConfig(),
) -> SolveResult:
    """Map bone angles onto robot joints, then optimize the lateral DoFs."""
    q = chain.clamp(_check_q(chain, q_prev)).copy()
    R = glove_hand_frame(keypoints)
    for j in spec.joints:
        theta = bone_angle(keypoints, j.triplet, R @ np.asarray(j.ref_axis, dtype=float))
        q[chain.joint_index(j.robot_joint)] = angle_match_map(theta, j.h_range, j.r_range)
    q = chain.clamp(q)
    if not spec.lateral_joints:
        return SolveResult(q, 0.0, True, 0, [0.0])
    idx = np.array([chain.joint_index(n) for n in spec.lateral_joints])
    # express glove vectors in the hand frame so they match the robot wrist frame
    targets = np.array([R.T @ (np.asarray(keypoints[b]) - np.asarray(keypoints[a])) for a, b in spec.lateral_vectors])
    obj = VectorObjective(chain, spec.lateral_vectors, config.alpha * targets, np.ones(len(targets)), config.beta, q, idx)
    return solve_box_least_squares(obj, q[idx], chain.lower[idx], chain.upper[idx], config.tol, config.max_iter)


# ---------------------------------------------------------------------------
# human -> robot joint mapping


@dataclass(frozen=True)
class JointMap:
    """Robot joint name -> index into the 45-dim human joint-angle vector."""

    pairs: tuple[tuple[str, int], ...]
    illustrative: bool = False

    def __post_init__(self):
        idx = [i for _, i in self.pairs]
        for name, i in self.pairs:
            if not 0 <= i < 45:
                raise ValueError(f"joint map: index {i} for {name!r} outside [0, 45)")
        if len(set(idx)) != len(idx):
            raise ValueError("joint map is not injective")

    @property
    def unmapped(self) -> list[int]:
        used = {i for _, i in self.pairs}
        return [i for i in range(45) if i not in used]

    @property
    def human_mask(self) -> np.ndarray:
        m = np.zeros(45, dtype=np.float32)
        m[[i for _, i in self.pairs]] = 1.0
        return m

    @classmethod
    def identity(cls, n: int) -> "JointMap":
        return cls(tuple((f"j{i}", i) for i in range(n)))

    @classmethod
    def from_dict(cls, d: Mapping) -> "JointMap":
        return cls(tuple((str(k), int(v)) for k, v in d["pairs"].items()), bool(d.get("illustrative", False)))

    @classmethod
    def load(cls, path) -> "JointMap":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def load_asset_joint_map() -> JointMap:
    """Illustrative XHand-like -> MANO-like map; not calibrated ground truth."""
    text = resources.files("handvla").joinpath("assets", "xhand_joint_map.json").read_text(encoding="utf-8")
    return JointMap.from_dict(json.loads(text))


def map_human_action(theta_h, jmap: JointMap) -> tuple[np.ndarray, np.ndarray]:
    """Robot command (in map order) and the 45-dim human mask (unmapped dims 0)."""
    theta_h = np.asarray(theta_h, dtype=float)
    if theta_h.shape[-1] != 45:
        raise ValueError("human joint angles must have 45 dims")
    cmd = theta_h[..., [i for _, i in jmap.pairs]]
    return cmd, jmap.human_mask


# ---------------------------------------------------------------------------
# glove streams


def glove_dict(points: np.ndarray) -> dict[str, np.ndarray]:
    points = np.asarray(points, dtype=float)
    if points.shape != (len(GLOVE_KEYPOINTS), 3):
        raise ValueError(f"expected {len(GLOVE_KEYPOINTS)} keypoints, got shape {points.shape}")
    if not np.isfinite(points).all():
        raise ValueError("non-finite keypoints")
    return dict(zip(GLOVE_KEYPOINTS, points))


def retarget_stream(records: Sequence[Mapping], chain: KinematicChain, method: str = "dexpilot", config: RetargetConfig = RetargetConfig(), spec: AngleMatchSpec | None = None) -> list[dict]:
    """Retarget ``{"t", "keypoints"}`` records sequentially, chaining ``q_prev``."""
    q = chain.clamp(np.zeros(chain.dof))
    out = []
    for rec in records:
        kp = glove_dict(rec["keypoints"])
        if method == "dexpilot":
            res = dexpilot_solve(chain, dexpilot_vectors(kp), q, config)
        elif method == "angle":
            if spec is None:
                raise ValueError("angle matching needs an AngleMatchSpec")
            res = angle_match_retarget(chain, kp, spec, q, config)
        else:
            raise ValueError(f"unknown retargeting method {method!r}")
        q = res.q
        out.append({"t": rec.get("t"), "q": [float(f"{v:.9g}") for v in q], "converged": res.converged})
    return out
