"""Resumable batch pipeline: track files in, episode files and reports out.

Per video the stages run in order ingest -> segment -> caption -> merge ->
episodes, each writing its artifacts under ``work/<video>/`` (episodes go to
``episodes/<video>/``). The global stages ``stats`` and ``augment`` run over
all episodes afterwards.

Every finished stage appends a record to ``work/manifest.jsonl`` holding a
hash of its inputs (files plus the relevant config section) and of its
outputs. A stage whose latest record is ``done`` with the same input hash and
intact outputs is skipped, so reruns and resumed runs recompute nothing that
is already correct.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import os
import threading
import time
import typing
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from pathlib import Path
from typing import Any, Callable, Mapping, Sequence

import numpy as np

from .augment import AugmentConfig, jitter_gate, palm_trajectory, sample_params
from .caption import (
    CaptionResult,
    HttpCaptionClient,
    MockCaptionClient,
    PromptConfig,
    blank_frame,
    build_prompt,
    caption_segments,
    segment_frames,
)
from .episode import IndexEntry, build_episode, compute_norm_stats, load_episode, serialize_episode, write_index
from .geom import CameraIntrinsics
from .segment import (
    CaptionedSegment,
    Segment,
    merge_segments,
    read_segment_manifest,
    segment_video,
    write_segment_manifest,
)
from .tracks import (
    HANDS,
    CameraTrack,
    HandTrack,
    chop_video,
    classify_camera_motion,
    fuse_to_world,
    load_track,
    remove_outliers,
    smooth_track,
    stitch_chunks,
)

log = logging.getLogger("handvla.pipeline")

VIDEO_STAGES = ("ingest", "segment", "caption", "merge", "episodes")
GLOBAL_STAGES = ("stats", "augment")
ALL_STAGES = VIDEO_STAGES + GLOBAL_STAGES
DEPENDS = {"segment": "ingest", "caption": "segment", "merge": "caption", "episodes": "merge"}
PIPELINE_VERSION = 1
CRASH_ENV = "HANDVLA_CRASH_AFTER"


class ConfigError(ValueError):
    pass


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# config


@dataclass(frozen=True)
class PathsConfig:
    tracks: str = "tracks"
    work: str = "work"
    episodes: str = "episodes"
    reports: str = "reports"


@dataclass(frozen=True)
class StageToggles:
    stats: bool = True
    augment: bool = True


@dataclass(frozen=True)
class TrackConfig:
    spline_lambda: float = 1e-5
    gaussian_sigma_s: float = 0.1
    outlier_z: float = 4.0
    outlier_window: int = 9
    outlier_min_sigma_mps: float = 0.02
    chunk_s: float = 20.0
    overlap_s: float = 2.0
    flow_threshold_px: float = 1.0


@dataclass(frozen=True)
class SegmentConfig:
    sigma_s: float = 0.1
    window_s: float = 0.5
    min_len_s: float = 0.5
    merge_gap_s: float = 0.2


@dataclass(frozen=True)
class CaptionConfig:
    backend: str = "mock"  # mock | http
    endpoint: str = ""
    api_key_env: str = ""
    model: str = "vlm-default"
    timeout_s: float = 60.0
    max_inflight: int = 4
    retries: int = 5
    backoff_s: float = 0.5
    n_frames: int = 8
    n_rephrasings: int = 5
    mock_transcript: str = ""
    palm_offset: tuple[float, float, float] = (0.0, 0.0, 0.08)

    def __post_init__(self):
        if self.backend not in ("mock", "http"):
            raise ConfigError(f"caption.backend must be 'mock' or 'http', got {self.backend!r}")
        if self.backend == "http" and not self.endpoint:
            raise ConfigError("caption.endpoint is required for the http backend")
        if self.max_inflight < 1 or self.retries < 0 or self.n_frames < 1 or self.n_rephrasings < 0:
            raise ConfigError("caption: max_inflight and n_frames must be >= 1, retries and n_rephrasings >= 0")


@dataclass(frozen=True)
class EpisodeConfig:
    min_frames: int = 2

    def __post_init__(self):
        if self.min_frames < 2:
            raise ConfigError("episode.min_frames must be >= 2")


@dataclass(frozen=True)
class AugmentSection:
    fov_scale: tuple[float, float] = (0.6, 1.0)
    aspect: tuple[float, float] = (0.75, 1.33)
    max_attempts: int = 20
    flip_prob: float = 0.5
    jitter_prob: float = 0.5
    previews_per_episode: int = 1

    def to_config(self) -> AugmentConfig:
        return AugmentConfig(self.fov_scale, self.aspect, self.max_attempts, self.flip_prob, self.jitter_prob)


@dataclass(frozen=True)
class PipelineConfig:
    paths: PathsConfig = field(default_factory=PathsConfig)
    stages: StageToggles = field(default_factory=StageToggles)
    tracks: TrackConfig = field(default_factory=TrackConfig)
    segment: SegmentConfig = field(default_factory=SegmentConfig)
    caption: CaptionConfig = field(default_factory=CaptionConfig)
    episode: EpisodeConfig = field(default_factory=EpisodeConfig)
    augment: AugmentSection = field(default_factory=AugmentSection)
    seed: int = 0
    jobs: int = 1
    strict: bool = False

    def __post_init__(self):
        if self.jobs < 1:
            raise ConfigError("jobs must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)


def _coerce(tp, value, where: str):
    if is_dataclass(tp):
        return _build(tp, value, where)
    origin = typing.get_origin(tp)
    if origin is tuple:
        args = typing.get_args(tp)
        if not isinstance(value, (list, tuple)) or len(value) != len(args):
            raise ConfigError(f"{where}: expected a list of {len(args)} values")
        return tuple(_coerce(a, v, f"{where}[{i}]") for i, (a, v) in enumerate(zip(args, value)))
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected true/false")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}: expected an integer")
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)) or not math.isfinite(value):
            raise ConfigError(f"{where}: expected a finite number")
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(f"{where}: expected a string")
        return value
    raise ConfigError(f"{where}: unsupported type {tp!r}")


def _build(cls, data, where: str):
    if not isinstance(data, Mapping):
        raise ConfigError(f"{where}: expected an object")
    hints = typing.get_type_hints(cls)
    names = [f.name for f in fields(cls)]
    unknown = sorted(set(data) - set(names))
    if unknown:
        raise ConfigError(f"{where}: unknown keys {unknown}")
    kwargs = {n: _coerce(hints[n], data[n], f"{where}.{n}") for n in names if n in data}
    try:
        return cls(**kwargs)
    except ConfigError:
        raise
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{where}: {e}") from e


def config_from_dict(data: Mapping) -> PipelineConfig:
    return _build(PipelineConfig, data, "config")


def load_config(path) -> PipelineConfig:
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: not valid JSON ({e.msg} at line {e.lineno})") from None
    return config_from_dict(data)


# ---------------------------------------------------------------------------
# manifest


def now_epoch() -> int:
    """``SOURCE_DATE_EPOCH`` when set, so reproducible runs get identical manifests."""
    env = os.environ.get("SOURCE_DATE_EPOCH")
    return int(env) if env else int(time.time())


def file_hash(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for block in iter(lambda: f.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def _digest(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()).hexdigest()


@dataclass(frozen=True)
class ManifestRecord:
    video: str
    stage: str
    status: str  # done | failed
    input_hash: str
    output_hash: str = ""
    outputs: tuple[str, ...] = ()
    timestamp: int = 0
    error: str = ""

    def to_json(self) -> str:
        d = asdict(self)
        d["outputs"] = list(self.outputs)
        return json.dumps(d, sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_dict(cls, d: Mapping) -> "ManifestRecord":
        return cls(d["video"], d["stage"], d["status"], d["input_hash"], d.get("output_hash", ""), tuple(d.get("outputs", ())), int(d.get("timestamp", 0)), d.get("error", ""))


class RunManifest:
    """Append-only JSON-lines log of stage outcomes; the latest record per (video, stage) wins."""

    def __init__(self, path, root):
        self.path = Path(path)
        self.root = Path(root)
        self._lock = threading.Lock()
        self.records: list[ManifestRecord] = []
        if self.path.exists():
            text = self.path.read_text(encoding="utf-8")
            if text and not text.endswith("\n"):
                # terminate a torn tail so the next append starts on its own line
                with open(self.path, "a", encoding="utf-8") as f:
                    f.write("\n")
            for line in text.splitlines():
                if not line.strip():
                    continue
                try:
                    self.records.append(ManifestRecord.from_dict(json.loads(line)))
                except (json.JSONDecodeError, KeyError):
                    # a torn final line from a crash; everything before it is intact
                    log.warning("manifest_line_skipped", extra={"path": str(self.path)})
        else:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self.path.touch()

    def latest(self, video: str, stage: str) -> ManifestRecord | None:
        for rec in reversed(self.records):
            if rec.video == video and rec.stage == stage:
                return rec
        return None

    def append(self, rec: ManifestRecord) -> None:
        with self._lock:
            with open(self.path, "a", encoding="utf-8") as f:
                f.write(rec.to_json() + "\n")
                f.flush()
                os.fsync(f.fileno())
            self.records.append(rec)

    def outputs_hash(self, outputs: Sequence[str]) -> str | None:
        parts = []
        for rel in outputs:
            p = self.root / rel
            if not p.is_file():
                return None
            parts.append([rel, file_hash(p)])
        return _digest(parts)

    def is_current(self, video: str, stage: str, input_hash: str) -> bool:
        rec = self.latest(video, stage)
        if rec is None or rec.status != "done" or rec.input_hash != input_hash:
            return False
        return self.outputs_hash(rec.outputs) == rec.output_hash

    def state(self) -> dict[tuple[str, str], tuple[str, str, str]]:
        """Latest (status, input hash, output hash) per (video, stage)."""
        out = {}
        for rec in self.records:
            out[(rec.video, rec.stage)] = (rec.status, rec.input_hash, rec.output_hash)
        return out


# ---------------------------------------------------------------------------
# artifact I/O


def write_atomic(path: Path, data: bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)


def write_json(path: Path, obj) -> None:
    write_atomic(path, (json.dumps(obj, sort_keys=True, separators=(",", ":")) + "\n").encode("utf-8"))


def write_jsonl(path: Path, rows: Sequence[Mapping]) -> None:
    write_atomic(path, "".join(json.dumps(r, sort_keys=True) + "\n" for r in rows).encode("utf-8"))


def read_jsonl(path: Path) -> list[dict]:
    return [json.loads(line) for line in Path(path).read_text(encoding="utf-8").splitlines() if line.strip()]


def world_to_dict(tracks: Mapping[str, HandTrack], cameras: CameraTrack, fps: float, motion: str) -> dict:
    k = cameras.intrinsics
    hands = {}
    for side, tr in tracks.items():
        hands[side] = {
            "frames": tr.frames.tolist(),
            "translations": tr.translations.tolist(),
            "rotations": tr.rotations.tolist(),
            "joint_angles": tr.joint_angles.tolist(),
            "valid": tr.valid.tolist(),
            "confidence": None if tr.confidence is None else tr.confidence.tolist(),
            "notes": list(tr.notes),
        }
    return {
        "fps": fps,
        "camera_motion": motion,
        "intrinsics": [k.focal_x, k.focal_y, k.principal_x, k.principal_y, k.width, k.height],
        "cameras": {"frames": cameras.frames.tolist(), "rotations": cameras.rotations.tolist(), "translations": cameras.translations.tolist()},
        "hands": hands,
    }


def world_from_dict(d: Mapping) -> tuple[dict[str, HandTrack], CameraTrack, float]:
    fx, fy, cx, cy, w, h = d["intrinsics"]
    k = CameraIntrinsics(fx, fy, cx, cy, int(w), int(h))
    c = d["cameras"]
    cams = CameraTrack(np.asarray(c["frames"], dtype=int), np.asarray(c["rotations"], float).reshape(-1, 3, 3), np.asarray(c["translations"], float).reshape(-1, 3), k)
    fps = float(d["fps"])
    tracks = {}
    for side, t in d["hands"].items():
        n = len(t["frames"])
        tracks[side] = HandTrack(
            side, fps, np.asarray(t["frames"], dtype=int),
            np.asarray(t["translations"], float).reshape(n, 3),
            np.asarray(t["rotations"], float).reshape(n, 3, 3),
            np.asarray(t["joint_angles"], float).reshape(n, -1),
            np.asarray(t["valid"], dtype=bool),
            None if t["confidence"] is None else np.asarray(t["confidence"], float),
            tuple(t["notes"]),
        )
    return tracks, cams, fps


def load_world(path) -> tuple[dict[str, HandTrack], CameraTrack, float]:
    return world_from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


# ---------------------------------------------------------------------------
# stages


@dataclass
class Context:
    config: PipelineConfig
    root: Path
    client_factory: Callable[[], Any] | None = None

    def path(self, rel: str) -> Path:
        return self.root / rel

    def rel(self, p: Path) -> str:
        return p.relative_to(self.root).as_posix()

    @property
    def tracks_dir(self) -> Path:
        return self.root / self.config.paths.tracks

    @property
    def work_dir(self) -> Path:
        return self.root / self.config.paths.work

    @property
    def episodes_dir(self) -> Path:
        return self.root / self.config.paths.episodes

    @property
    def reports_dir(self) -> Path:
        return self.root / self.config.paths.reports

    def video_dir(self, video: str) -> Path:
        return self.work_dir / video

    def make_client(self):
        if self.client_factory is not None:
            return self.client_factory()
        cc = self.config.caption
        if cc.backend == "http":
            return HttpCaptionClient(cc.endpoint, cc.api_key_env or None, cc.timeout_s)
        if cc.mock_transcript:
            return MockCaptionClient.from_file(self.root / cc.mock_transcript)
        return MockCaptionClient()


@dataclass(frozen=True)
class StagePlan:
    inputs: tuple[Path, ...]
    params: Any


def _plan(ctx: Context, video: str, stage: str) -> StagePlan:
    cfg = ctx.config
    vd = ctx.video_dir(video)
    if stage == "ingest":
        return StagePlan((ctx.tracks_dir / f"{video}.jsonl",), asdict(cfg.tracks))
    if stage == "segment":
        params = {k: v for k, v in asdict(cfg.segment).items() if k != "merge_gap_s"}
        return StagePlan((vd / "world.json",), params)
    if stage == "caption":
        params = {k: v for k, v in asdict(cfg.caption).items() if k not in ("max_inflight", "timeout_s")}
        extra = (ctx.root / cfg.caption.mock_transcript,) if cfg.caption.backend == "mock" and cfg.caption.mock_transcript else ()
        return StagePlan((vd / "world.json", vd / "segments.jsonl") + extra, params)
    if stage == "merge":
        return StagePlan((vd / "segments.jsonl", vd / "captions.jsonl"), {"merge_gap_s": cfg.segment.merge_gap_s})
    if stage == "episodes":
        return StagePlan((vd / "world.json", vd / "merged.jsonl"), asdict(cfg.episode))
    raise ValueError(stage)


def input_hash(ctx: Context, stage: str, plan: StagePlan) -> str:
    files = []
    for p in plan.inputs:
        if not p.is_file():
            raise UsageError(f"stage {stage!r} needs {ctx.rel(p)}, which does not exist")
        files.append([ctx.rel(p), file_hash(p)])
    return _digest({"stage": stage, "version": PIPELINE_VERSION, "params": plan.params, "inputs": files})


def stage_ingest(ctx: Context, video: str) -> list[Path]:
    tc = ctx.config.tracks
    tf = load_track(ctx.tracks_dir / f"{video}.jsonl")
    motion = classify_camera_motion(tf.flows, tc.flow_threshold_px) if tf.flows else "unknown"
    world = fuse_to_world(tf.hands, tf.cameras, tf.fps)
    cams = CameraTrack.from_frames(tf.cameras)
    out = {}
    for side in HANDS:
        tr = remove_outliers(world[side], tc.outlier_z, tc.outlier_window, tc.outlier_min_sigma_mps)
        spans = chop_video(len(tr), tr.fps, tc.chunk_s, tc.overlap_s)
        if len(spans) > 1:
            tr = stitch_chunks([smooth_track(tr.slice(s, e), tc.spline_lambda, tc.gaussian_sigma_s) for s, e in spans], spans)
        else:
            tr = smooth_track(tr, tc.spline_lambda, tc.gaussian_sigma_s)
        out[side] = tr
    path = ctx.video_dir(video) / "world.json"
    write_json(path, world_to_dict(out, cams, tf.fps, motion))
    return [path]


def stage_segment(ctx: Context, video: str) -> list[Path]:
    sc = ctx.config.segment
    tracks, _, _ = load_world(ctx.video_dir(video) / "world.json")
    segs = segment_video(tracks, video, sigma_s=sc.sigma_s, window_s=sc.window_s, min_len_s=sc.min_len_s)
    path = ctx.video_dir(video) / "segments.jsonl"
    tmp = path.with_name(path.name + ".tmp")
    path.parent.mkdir(parents=True, exist_ok=True)
    write_segment_manifest(tmp, segs)
    os.replace(tmp, path)
    return [path]


def prompt_config(cc: CaptionConfig) -> PromptConfig:
    return PromptConfig(model=cc.model, n_frames=cc.n_frames, n_rephrasings=cc.n_rephrasings)


def stage_caption(ctx: Context, video: str) -> list[Path]:
    cc = ctx.config.caption
    vd = ctx.video_dir(video)
    tracks, cams, _ = load_world(vd / "world.json")
    segs = read_segment_manifest(vd / "segments.jsonl")
    pcfg = prompt_config(cc)
    canvas = blank_frame(cams.intrinsics)
    jobs = []
    for seg in segs:
        frames = segment_frames(seg, tracks[seg.handedness], cams.frame, lambda f: canvas, pcfg, np.asarray(cc.palm_offset))
        jobs.append((seg.id, build_prompt(frames, seg.handedness, pcfg)))
    results = caption_segments(jobs, ctx.make_client(), pcfg, cc.max_inflight, rephrase=cc.n_rephrasings > 0, backoff_s=cc.backoff_s, retries=cc.retries)
    for sid, res in results.items():
        if res.status == "failed":
            log.warning("caption_failed", extra={"video": video, "segment": sid, "error": res.error})
    path = vd / "captions.jsonl"
    write_jsonl(path, [results[s.id].to_record() for s in segs])
    return [path]


def stage_merge(ctx: Context, video: str) -> list[Path]:
    vd = ctx.video_dir(video)
    segs = {s.id: s for s in read_segment_manifest(vd / "segments.jsonl")}
    caps = [CaptionResult.from_record(r) for r in read_jsonl(vd / "captions.jsonl")]
    fps = json.loads((vd / "world.json").read_text(encoding="utf-8"))["fps"]
    ok = [c for c in caps if c.status == "ok"]
    variants = {c.segment_id: list(c.rephrasings) for c in ok}
    merged = merge_segments([CaptionedSegment(segs[c.segment_id], c.caption) for c in ok], fps, ctx.config.segment.merge_gap_s)
    # a merged run keeps the rephrasings of the segment it starts with
    by_start = {(segs[c.segment_id].handedness, segs[c.segment_id].start_frame): c.segment_id for c in ok}
    rows = []
    for item in merged:
        s = item.segment
        first = by_start[(s.handedness, s.start_frame)]
        rows.append({"video": s.source_video, "hand": s.handedness, "start_frame": s.start_frame, "end_frame": s.end_frame, "caption": item.caption, "rephrasings": variants[first]})
    path = vd / "merged.jsonl"
    write_jsonl(path, rows)
    return [path]


def episode_filename(seg: Segment) -> str:
    return f"{seg.handedness}_{seg.start_frame:06d}_{seg.end_frame:06d}.ep"


def stage_episodes(ctx: Context, video: str) -> list[Path]:
    vd = ctx.video_dir(video)
    tracks, cams, fps = load_world(vd / "world.json")
    items, variants = [], {}
    for r in read_jsonl(vd / "merged.jsonl"):
        item = CaptionedSegment(Segment(r["hand"], r["start_frame"], r["end_frame"], r["video"]), r["caption"])
        items.append(item)
        variants[item.segment.id] = r["rephrasings"]
    out_dir = ctx.episodes_dir / video
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for item in items:
        if len(item.segment) < ctx.config.episode.min_frames:
            continue
        others = [o for o in items if o is not item]
        ep = build_episode(item, tracks, cams, fps, others, variants[item.segment.id])
        path = out_dir / episode_filename(item.segment)
        serialize_episode(path, ep)
        written.append(path)
    keep = {p.name for p in written}
    for stale in out_dir.glob("*.ep"):
        if stale.name not in keep:
            stale.unlink()
    return written


STAGE_FUNCS: dict[str, Callable[[Context, str], list[Path]]] = {
    "ingest": stage_ingest,
    "segment": stage_segment,
    "caption": stage_caption,
    "merge": stage_merge,
    "episodes": stage_episodes,
}


def all_episode_paths(ctx: Context) -> list[Path]:
    return sorted(ctx.episodes_dir.glob("*/*.ep"))


def stage_stats(ctx: Context, paths: Sequence[Path]) -> list[Path]:
    ctx.reports_dir.mkdir(parents=True, exist_ok=True)
    stats_path = ctx.reports_dir / "norm_stats.json"
    index_path = ctx.episodes_dir / "index.jsonl"
    eps = [load_episode(p) for p in paths]
    if eps:
        stats = compute_norm_stats(eps)
        write_json(stats_path, {"episodes": len(eps), "frames": int(sum(e.n_frames for e in eps)), **stats.to_dict()})
    else:
        write_json(stats_path, {"episodes": 0, "frames": 0})
    total = sum(e.n_frames for e in eps)
    entries = [IndexEntry(ctx.rel(p), e.n_frames / total, "") for p, e in zip(paths, eps)]
    tmp = index_path.with_name(index_path.name + ".tmp")
    index_path.parent.mkdir(parents=True, exist_ok=True)
    write_index(tmp, entries)
    os.replace(tmp, index_path)
    return [stats_path, index_path]


def episode_seed(seed: int, episode_id: str, k: int) -> int:
    return (seed * 1_000_003 + zlib.crc32(episode_id.encode()) * 97 + k) % (2**63)


def stage_augment(ctx: Context, paths: Sequence[Path]) -> list[Path]:
    ac = ctx.config.augment
    cfg = ac.to_config()
    rows = []
    intr: dict[str, CameraIntrinsics] = {}
    for p in paths:
        ep = load_episode(p)
        if ep.video not in intr:
            fx, fy, cx, cy, w, h = json.loads((ctx.video_dir(ep.video) / "world.json").read_text(encoding="utf-8"))["intrinsics"]
            intr[ep.video] = CameraIntrinsics(fx, fy, cx, cy, int(w), int(h))
        palm = palm_trajectory(ep, 0)
        for k in range(ac.previews_per_episode):
            seed = episode_seed(ctx.config.seed, ep.episode_id, k)
            params, spec, accepted = sample_params(intr[ep.video], palm, seed, cfg)
            rows.append({
                "episode": ep.episode_id,
                "seed": seed,
                "fov": params.fov,
                "aspect": params.aspect,
                "center_ray": list(params.center_ray),
                "flip": params.flip,
                "jitter": bool(params.jitter and jitter_gate(ep.instruction)),
                "accepted": accepted,
                "size": [spec.k_new.width, spec.k_new.height],
            })
    path = ctx.reports_dir / "augment_preview.jsonl"
    write_jsonl(path, rows)
    return [path]


GLOBAL_FUNCS = {"stats": stage_stats, "augment": stage_augment}


# ---------------------------------------------------------------------------
# orchestration


class _JsonFormatter(logging.Formatter):
    _skip = set(vars(logging.LogRecord("", 0, "", 0, "", None, None))) | {"message", "asctime"}

    def format(self, record: logging.LogRecord) -> str:
        out = {"ts": round(record.created, 3), "level": record.levelname.lower(), "event": record.getMessage()}
        out.update({k: v for k, v in vars(record).items() if k not in self._skip})
        if record.exc_info:
            out["exc"] = self.formatException(record.exc_info)
        return json.dumps(out, default=str, sort_keys=True)


def configure_logging(level: str = "info", stream=None) -> None:
    handler = logging.StreamHandler(stream)
    handler.setFormatter(_JsonFormatter())
    root = logging.getLogger("handvla")
    root.handlers[:] = [handler]
    root.setLevel(level.upper())
    root.propagate = False


def correlation_id(video: str) -> str:
    return hashlib.sha256(video.encode()).hexdigest()[:12]


@dataclass
class RunResult:
    exit_code: int = 0
    computed: list[tuple[str, str]] = field(default_factory=list)
    skipped: list[tuple[str, str]] = field(default_factory=list)
    failed: list[tuple[str, str, str]] = field(default_factory=list)


class _CrashCounter:
    """Test hook: hard-exit after N completed stages when ``HANDVLA_CRASH_AFTER`` is set."""

    def __init__(self):
        env = os.environ.get(CRASH_ENV)
        self.limit = int(env) if env else None
        self.n = 0
        self._lock = threading.Lock()

    def tick(self) -> None:
        if self.limit is None:
            return
        with self._lock:
            self.n += 1
            if self.n >= self.limit:
                logging.shutdown()
                os._exit(75)


def list_videos(ctx: Context) -> list[str]:
    if not ctx.tracks_dir.is_dir():
        return []
    return sorted(p.stem for p in ctx.tracks_dir.glob("*.jsonl"))


def check_dependencies(ctx: Context, stages: Sequence[str], videos: Sequence[str], manifest: RunManifest) -> None:
    for s in stages:
        dep = DEPENDS.get(s)
        if dep is None or dep in stages:
            continue
        for v in videos:
            rec = manifest.latest(v, dep)
            if rec is None or rec.status != "done":
                raise UsageError(f"stage {s!r} for {v} needs {dep!r} to have completed; run it first or include it")
    if any(s in GLOBAL_STAGES for s in stages) and "episodes" not in stages:
        for v in videos:
            rec = manifest.latest(v, "episodes")
            if rec is None or rec.status != "done":
                raise UsageError(f"global stages need episodes for {v}; run build-episodes first")


def _run_tracked(ctx, manifest, crash, result, lock, video, stage, plan_inputs, params, fn) -> bool:
    extra = {"video": video, "stage": stage, "cid": correlation_id(video)}
    try:
        ih = input_hash(ctx, stage, StagePlan(tuple(plan_inputs), params))
    except UsageError as e:
        manifest.append(ManifestRecord(video, stage, "failed", "", timestamp=now_epoch(), error=str(e)))
        with lock:
            result.failed.append((video, stage, str(e)))
        log.error("stage_blocked", extra={**extra, "error": str(e)})
        return False
    if manifest.is_current(video, stage, ih):
        with lock:
            result.skipped.append((video, stage))
        log.info("stage_skipped", extra=extra)
        return True
    t0 = time.perf_counter()
    try:
        outputs = fn()
    except Exception as e:  # per-video isolation: record and move on
        msg = f"{type(e).__name__}: {e}"
        manifest.append(ManifestRecord(video, stage, "failed", ih, timestamp=now_epoch(), error=msg))
        with lock:
            result.failed.append((video, stage, msg))
        log.error("stage_failed", extra={**extra, "error": msg}, exc_info=log.isEnabledFor(logging.DEBUG))
        return False
    rels = tuple(sorted(ctx.rel(p) for p in outputs))
    manifest.append(ManifestRecord(video, stage, "done", ih, manifest.outputs_hash(rels) or "", rels, now_epoch()))
    with lock:
        result.computed.append((video, stage))
    log.info("stage_done", extra={**extra, "seconds": round(time.perf_counter() - t0, 3), "outputs": len(rels)})
    crash.tick()
    return True


def run(stages: Sequence[str], config: PipelineConfig, root, client_factory=None, jobs: int | None = None, strict: bool | None = None) -> RunResult:
    """Run ``stages`` over every track file under the configured paths.

    Raises :class:`UsageError` for unknown stages or unmet dependencies.
    """
    ctx = Context(config, Path(root), client_factory)
    jobs = config.jobs if jobs is None else jobs
    strict = config.strict if strict is None else strict
    ctx.work_dir.mkdir(parents=True, exist_ok=True)
    manifest = RunManifest(ctx.work_dir / "manifest.jsonl", ctx.root)
    videos = list_videos(ctx)
    unknown = [s for s in stages if s not in ALL_STAGES]
    if unknown:
        raise UsageError(f"unknown stages {unknown}; choose from {list(ALL_STAGES)}")
    order = [s for s in ALL_STAGES if s in stages]
    check_dependencies(ctx, order, videos, manifest)
    result = RunResult()
    crash = _CrashCounter()
    lock = threading.Lock()
    vstages = [s for s in order if s in VIDEO_STAGES]

    def one_video(video: str) -> None:
        for stage in vstages:
            plan = _plan(ctx, video, stage)
            ok = _run_tracked(ctx, manifest, crash, result, lock, video, stage, plan.inputs, plan.params, lambda: STAGE_FUNCS[stage](ctx, video))
            if not ok:
                return

    if vstages:
        if jobs > 1 and len(videos) > 1:
            with ThreadPoolExecutor(max_workers=jobs) as pool:
                list(pool.map(one_video, videos))
        else:
            for v in videos:
                one_video(v)

    for stage in (s for s in order if s in GLOBAL_STAGES):
        if not getattr(config.stages, stage):
            log.info("stage_disabled", extra={"stage": stage})
            continue
        paths = all_episode_paths(ctx)
        params = {"seed": config.seed, **asdict(config.augment)} if stage == "augment" else {}
        ok = _run_tracked(ctx, manifest, crash, result, lock, "*", stage, paths, params, lambda: GLOBAL_FUNCS[stage](ctx, paths))
        if not ok:
            result.exit_code = 1

    if strict and result.failed:
        result.exit_code = 1
    log.info("run_finished", extra={"computed": len(result.computed), "skipped": len(result.skipped), "failed": len(result.failed), "exit": result.exit_code})
    return result
