"""Dataset diversity statistics and the hand-object grasping distance benchmark."""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
from scipy.spatial import cKDTree

from .geom import euler_to_matrix, matrix_to_euler
from .retarget import TIP_SITES, KinematicChain, forward_kinematics, mano_like_chain

POS_TAGS = ("noun", "verb", "adjective")


# ---------------------------------------------------------------------------
# visual diversity


@dataclass(frozen=True)
class FeatureSet:
    ids: tuple[str, ...]
    vectors: np.ndarray  # (n, dim), unit rows

    def __post_init__(self):
        v = np.asarray(self.vectors)
        if v.ndim != 2 or len(v) != len(self.ids):
            raise ValueError("vectors must be (len(ids), dim)")
        norms = np.linalg.norm(v.astype(float), axis=1)
        if np.any(np.abs(norms - 1.0) > 1e-6):
            raise ValueError("feature rows must be unit-normalized")

    @classmethod
    def from_vectors(cls, vectors, ids: Sequence[str] | None = None, normalize: bool = True) -> "FeatureSet":
        v = np.asarray(vectors, dtype=float)
        if normalize:
            v = v / np.linalg.norm(v, axis=1, keepdims=True)
        return cls(tuple(ids) if ids is not None else tuple(str(i) for i in range(len(v))), v)

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def __len__(self) -> int:
        return len(self.ids)

    def subset(self, idx) -> "FeatureSet":
        idx = np.asarray(idx, dtype=int)
        return FeatureSet(tuple(self.ids[i] for i in idx), self.vectors[idx])


def write_features(path, fs: FeatureSet) -> None:
    header = json.dumps({"dim": fs.dim, "count": len(fs), "ids": list(fs.ids)}, separators=(",", ":"))
    Path(path).write_bytes(header.encode("utf-8") + b"\n" + np.ascontiguousarray(fs.vectors, dtype="<f4").tobytes())


def read_features(path) -> FeatureSet:
    data = Path(path).read_bytes()
    nl = data.find(b"\n")
    if nl < 0:
        raise ValueError("feature file has no header line")
    h = json.loads(data[:nl])
    dim, count = int(h["dim"]), int(h["count"])
    body = data[nl + 1:]
    if len(body) != 4 * dim * count:
        raise ValueError(f"feature block has {len(body)} bytes, expected {4 * dim * count}")
    v = np.frombuffer(body, dtype="<f4").reshape(count, dim).astype(float)
    # float32 storage loses a little norm; renormalize on read
    return FeatureSet.from_vectors(v, h.get("ids") or None)


@dataclass(frozen=True)
class VisualDiversity:
    avg_max_cos: float
    recall_at_05: float
    max_cos: np.ndarray


def max_cosine(queries: FeatureSet, targets: FeatureSet, block: int = 2048) -> np.ndarray:
    if len(queries) == 0 or len(targets) == 0:
        raise ValueError("feature sets must be non-empty")
    if queries.dim != targets.dim:
        raise ValueError(f"dimension mismatch: {queries.dim} vs {targets.dim}")
    q = np.asarray(queries.vectors, dtype=float)
    t = np.asarray(targets.vectors, dtype=float)
    best = np.full(len(q), -np.inf)
    for s in range(0, len(t), block):
        best = np.maximum(best, (q @ t[s:s + block].T).max(axis=1))
    return best


def visual_diversity(queries: FeatureSet, targets: FeatureSet, threshold: float = 0.5) -> VisualDiversity:
    """Mean over queries of the max cosine similarity to the targets, and the
    fraction of queries whose max similarity exceeds ``threshold``."""
    m = max_cosine(queries, targets)
    return VisualDiversity(float(m.mean()), float((m > threshold).mean()), m)


def diversity_curve(queries: FeatureSet, targets: FeatureSet, counts: Sequence[int], seed: int = 0) -> list[tuple[int, float, float]]:
    """``visual_diversity`` against seeded random target subsets of each size."""
    rng = np.random.default_rng(seed)
    out = []
    for c in counts:
        if not 1 <= c <= len(targets):
            raise ValueError(f"count {c} outside [1, {len(targets)}]")
        idx = np.sort(rng.choice(len(targets), size=c, replace=False))
        vd = visual_diversity(queries, targets.subset(idx))
        out.append((int(c), vd.avg_max_cos, vd.recall_at_05))
    return out


# ---------------------------------------------------------------------------
# instruction diversity


@dataclass(frozen=True)
class WordStats:
    counts: Mapping[str, Mapping[str, int]]  # pos -> word -> count

    def __post_init__(self):
        for pos, words in self.counts.items():
            for w, c in words.items():
                if int(c) < 1:
                    raise ValueError(f"count for {pos}/{w!r} must be >= 1")

    @classmethod
    def from_tagged(cls, pairs: Iterable[tuple[str, str]]) -> "WordStats":
        """Build from ``(word, pos)`` pairs; tags outside noun/verb/adjective are ignored."""
        c: dict[str, Counter] = {p: Counter() for p in POS_TAGS}
        for word, pos in pairs:
            if pos in c:
                c[pos][word.casefold()] += 1
        return cls({p: dict(sorted(v.items())) for p, v in c.items()})

    @classmethod
    def load(cls, path) -> "WordStats":
        return cls(json.loads(Path(path).read_text(encoding="utf-8")))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.counts, sort_keys=True, indent=1), encoding="utf-8")

    def merged(self, pos: str | None = None) -> dict[str, int]:
        if pos is not None:
            return dict(self.counts.get(pos, {}))
        out: Counter = Counter()
        for words in self.counts.values():
            out.update(words)
        return dict(out)


def h_index(counts: Iterable[int]) -> int:
    """Largest h such that h items have count >= h."""
    c = np.sort(np.asarray(list(counts), dtype=np.int64))[::-1]
    if c.size == 0:
        return 0
    ranks = np.arange(1, c.size + 1)
    ok = c >= ranks
    return int(ranks[ok].max()) if ok.any() else 0


@dataclass(frozen=True)
class InstructionDiversity:
    h_index: int
    i100: int
    rank_frequency: np.ndarray  # counts sorted descending
    words: tuple[str, ...] = field(default=())


def instruction_diversity(counts: Mapping[str, int] | WordStats, pos: str | None = None) -> InstructionDiversity:
    if isinstance(counts, WordStats):
        counts = counts.merged(pos)
    if not counts:
        raise ValueError("no words")
    items = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    freq = np.array([c for _, c in items], dtype=np.int64)
    return InstructionDiversity(h_index(freq), int((freq >= 100).sum()), freq, tuple(w for w, _ in items))


# ---------------------------------------------------------------------------
# grasping benchmark


def fingertip_positions(chain: KinematicChain, translations, rotations, joint_angles, tips: Sequence[str] = TIP_SITES) -> np.ndarray:
    """World fingertip positions, shape ``(T, n_tips, 3)``."""
    t = np.asarray(translations, dtype=float).reshape(-1, 3)
    r = np.asarray(rotations, dtype=float).reshape(-1, 3, 3)
    q = np.asarray(joint_angles, dtype=float).reshape(len(t), -1)
    idx = [chain.site_index(s) for s in tips]
    out = np.empty((len(t), len(idx), 3))
    for k in range(len(t)):
        local = forward_kinematics(chain, q[k]).site_positions[idx]
        out[k] = local @ r[k].T + t[k]
    return out


def _dist(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.sqrt(((a - b) ** 2).sum(axis=-1))


def hand_object_distance(chain: KinematicChain, translations, rotations, joint_angles, cloud, tips: Sequence[str] = TIP_SITES) -> float:
    """Minimum fingertip-to-object distance over all timesteps, tips and points."""
    cloud = np.asarray(cloud, dtype=float).reshape(-1, 3)
    if len(cloud) == 0:
        raise ValueError("empty object cloud")
    tipsx = fingertip_positions(chain, translations, rotations, joint_angles, tips).reshape(-1, 3)
    k = min(4, len(cloud))
    _, nn = cKDTree(cloud).query(tipsx, k=k)
    nn = np.asarray(nn).reshape(len(tipsx), k)
    # recompute candidates with the plain formula so results do not depend on tree arithmetic
    return float(_dist(tipsx[:, None, :], cloud[nn]).min())


@dataclass(frozen=True)
class GraspCase:
    case_id: str
    instruction: str
    cloud: np.ndarray  # (P, 3) camera frame
    wrist_translation: np.ndarray
    wrist_rotation: np.ndarray
    joint_angles: np.ndarray  # (45,)
    hand: str = "right"
    image: str = ""

    def to_record(self) -> dict:
        return {
            "id": self.case_id,
            "instruction": self.instruction,
            "image": self.image,
            "hand": self.hand,
            "wrist_translation": np.asarray(self.wrist_translation).tolist(),
            "wrist_euler": matrix_to_euler(self.wrist_rotation).tolist(),
            "joint_angles": np.asarray(self.joint_angles).tolist(),
            "cloud": np.asarray(self.cloud).tolist(),
        }

    @classmethod
    def from_record(cls, d: Mapping) -> "GraspCase":
        cloud = np.asarray(d["cloud"], dtype=float).reshape(-1, 3)
        if len(cloud) == 0:
            raise ValueError(f"case {d.get('id')!r}: empty object cloud")
        return cls(
            str(d["id"]), str(d.get("instruction", "")), cloud,
            np.asarray(d["wrist_translation"], dtype=float), euler_to_matrix(d["wrist_euler"]),
            np.asarray(d["joint_angles"], dtype=float), d.get("hand", "right"), d.get("image", ""),
        )


def write_grasp_cases(path, cases: Iterable[GraspCase]) -> None:
    Path(path).write_text("".join(json.dumps(c.to_record()) + "\n" for c in cases), encoding="utf-8")


def read_grasp_cases(path) -> list[GraspCase]:
    return [GraspCase.from_record(json.loads(line)) for line in Path(path).read_text(encoding="utf-8").splitlines() if line.strip()]


# A trajectory source maps (case, seed) to (translations, rotations, joint angles).
TrajectorySource = Callable[[GraspCase, int], tuple[np.ndarray, np.ndarray, np.ndarray]]


def zero_motion_source(horizon: int = 16) -> TrajectorySource:
    """Hand stays at its initial pose for the whole chunk."""

    def source(case: GraspCase, seed: int):
        return (
            np.tile(case.wrist_translation, (horizon, 1)),
            np.tile(case.wrist_rotation, (horizon, 1, 1)),
            np.tile(case.joint_angles, (horizon, 1)),
        )

    return source


def touching_source(horizon: int = 16) -> TrajectorySource:
    """Translate the hand linearly until its nearest fingertip rests on the nearest object point."""

    def source(case: GraspCase, seed: int):
        chain = mano_like_chain(case.hand)
        tips = fingertip_positions(chain, case.wrist_translation, case.wrist_rotation, case.joint_angles)[0]
        d = _dist(tips[:, None, :], case.cloud[None, :, :])
        i, j = np.unravel_index(np.argmin(d), d.shape)
        shift = case.cloud[j] - tips[i]
        s = np.linspace(0.0, 1.0, horizon)[:, None]
        return (
            case.wrist_translation + s * shift,
            np.tile(case.wrist_rotation, (horizon, 1, 1)),
            np.tile(case.joint_angles, (horizon, 1)),
        )

    return source


@dataclass(frozen=True)
class GraspReport:
    per_case: dict[str, float]  # meters, mean over trials
    failed: tuple[str, ...]
    trials: int

    @property
    def average_cm(self) -> float:
        return 100.0 * float(np.mean(list(self.per_case.values()))) if self.per_case else float("nan")

    @property
    def median_cm(self) -> float:
        return 100.0 * float(np.median(list(self.per_case.values()))) if self.per_case else float("nan")

    def to_records(self) -> list[dict]:
        rows = [{"case": k, "distance_cm": 100.0 * v} for k, v in sorted(self.per_case.items())]
        rows.append({"summary": True, "average_cm": self.average_cm, "median_cm": self.median_cm, "cases": len(self.per_case), "failed": list(self.failed), "trials": self.trials})
        return rows

    def to_table(self) -> str:
        lines = [f"{'case':<24} {'d_hand-obj (cm)':>16}"]
        lines += [f"{k:<24} {100.0 * v:>16.2f}" for k, v in sorted(self.per_case.items())]
        lines.append(f"{'average':<24} {self.average_cm:>16.2f}")
        lines.append(f"{'median':<24} {self.median_cm:>16.2f}")
        if self.failed:
            lines.append(f"failed cases: {len(self.failed)} ({', '.join(self.failed)})")
        return "\n".join(lines)


def grasp_eval(cases: Sequence[GraspCase], source: TrajectorySource, trials: int = 4, chains: Mapping[str, KinematicChain] | None = None) -> GraspReport:
    """Per case, the mean over ``trials`` seeded trajectories of the minimal distance."""
    chains = dict(chains or {})
    per_case, failed = {}, []
    for case in cases:
        chain = chains.get(case.hand) or chains.setdefault(case.hand, mano_like_chain(case.hand))
        vals = []
        try:
            for trial in range(trials):
                t, r, q = source(case, trial)
                vals.append(hand_object_distance(chain, t, r, q, case.cloud))
        except (ValueError, ArithmeticError):
            failed.append(case.case_id)
            continue
        if not np.all(np.isfinite(vals)):
            failed.append(case.case_id)
            continue
        per_case[case.case_id] = float(np.mean(vals))
    return GraspReport(per_case, tuple(failed), trials)


def make_grasp_cases(rng: np.random.Generator, n: int = 10, distance: float = 0.20, hand: str = "right") -> list[GraspCase]:
    """Benchmark fixtures whose initial nearest fingertip sits ``distance`` from the object.

    The object is a noisy box-surface cloud about 0.6 m in front of the
    camera; the hand starts on the camera side, and its offset along the
    object->hand direction is found by bisection.
    """
    chain = mano_like_chain(hand)
    cases = []
    for i in range(n):
        center = np.array([rng.uniform(-0.1, 0.1), rng.uniform(-0.05, 0.1), rng.uniform(0.5, 0.7)])
        half = rng.uniform(0.02, 0.05, size=3)
        pts = rng.uniform(-1, 1, size=(400, 3))
        face = rng.integers(0, 3, size=400)
        pts[np.arange(400), face] = np.sign(pts[np.arange(400), face])
        cloud = center + pts * half
        rot = euler_to_matrix(rng.normal(scale=0.4, size=3) + [np.pi / 2, 0, 0])
        q = np.clip(rng.normal(scale=0.15, size=45), chain.lower, chain.upper)
        direction = np.array([rng.normal(scale=0.3), rng.normal(scale=0.3), -1.0])
        direction /= np.linalg.norm(direction)

        def gap(s: float) -> float:
            return hand_object_distance(chain, center + s * direction, rot, q, cloud)

        lo, hi = 0.0, 1.0
        while gap(hi) < distance:
            hi *= 2
        for _ in range(80):
            mid = 0.5 * (lo + hi)
            if gap(mid) < distance:
                lo = mid
            else:
                hi = mid
        cases.append(GraspCase(f"case_{i:03d}", "grasp the object", cloud, center + hi * direction, rot, q, hand))
    return cases
