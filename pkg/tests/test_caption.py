import hashlib
import json
import threading
import time
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from handvla.caption import (
    CaptionResult,
    MockCaptionClient,
    OverlayFrame,
    PromptConfig,
    TokenBucket,
    blank_frame,
    build_prompt,
    caption_segments,
    clip_segment,
    decode_png,
    is_na,
    render_overlay,
    request_caption,
    request_rephrasings,
    sample_frames,
    segment_frames,
)
from handvla.geom import CameraIntrinsics, Pose, Rotation, euler_to_matrix, project
from handvla.segment import Segment
from handvla.synth import DEFAULT_INTRINSICS, make_track
from handvla.tracks import PALM_OFFSET, CameraTrackFrame, palm_positions, world_to_camera

DATA = Path(__file__).parent / "data"
K = CameraIntrinsics.centered(np.radians(75.0), 64, 48)


def camera(frame=0, pose=None, k=K):
    return CameraTrackFrame(frame, pose or Pose.identity(), k)


def track_from_palm(palm, rotations=None):
    n = len(palm)
    rots = np.tile(np.eye(3), (n, 1, 1)) if rotations is None else rotations
    wrist = palm - np.einsum("nij,j->ni", rots, PALM_OFFSET)
    return make_track(wrist, 30.0, "right", rots)


def no_sleep(_):
    pass


# ---------------------------------------------------------------------------
# frames


def test_sample_frames_examples():
    assert sample_frames(Segment("right", 10, 18)) == list(range(10, 18))
    assert sample_frames(Segment("right", 0, 15)) == [0, 2, 4, 6, 8, 10, 12, 14]
    assert sample_frames(Segment("left", 5, 6)) == [5] * 8


@settings(max_examples=200, deadline=None)
@given(st.integers(1, 400), st.integers(1, 12))
def test_sample_frames_spacing(length, n):
    idx = sample_frames(Segment("right", 3, 3 + length), n)
    assert idx[0] == 3 and idx[-1] == 3 + length - 1 or n == 1
    gaps = np.diff(idx)
    assert np.all(gaps >= 0)
    if len(gaps):
        assert gaps.max() - gaps.min() <= 1
    if length >= n:
        assert len(set(idx)) == n


# ---------------------------------------------------------------------------
# overlays


def test_clip_segment():
    lo, hi = np.array([0.0, 0.0]), np.array([10.0, 10.0])
    assert clip_segment([1, 1], [5, 5], lo, hi) == (0.0, 1.0)
    u0, u1 = clip_segment([-5, 5], [15, 5], lo, hi)
    assert (u0, u1) == pytest.approx((0.25, 0.75))
    assert clip_segment([-5, -5], [-1, 20], lo, hi) is None


def test_overlay_vertices_equal_project_of_camera_points():
    rng = np.random.default_rng(0)
    n = 30
    pos = np.column_stack([rng.normal(scale=0.1, size=n), rng.normal(scale=0.1, size=n), rng.uniform(-0.2, 0.8, n)])
    rots = euler_to_matrix(np.zeros(3))[None].repeat(n, 0)
    tr = make_track(pos, 30.0, "right", rots)
    cam_pose = Pose(Rotation(euler_to_matrix([0.1, -0.2, 0.05])), np.array([0.01, 0.0, -0.3]))
    cam = camera(4, cam_pose)
    ov = render_overlay(np.zeros((48, 64, 3), np.uint8), tr, cam, 25)
    c = world_to_camera(tr, cam)
    expect = []
    for i in range(4, 25):
        p = palm_positions(c.translations[i:i + 1], c.rotations[i:i + 1])[0]
        if p[2] > 1e-9:
            expect.append(project(K, p))
    np.testing.assert_allclose(ov.vertices, np.array(expect).reshape(-1, 2), atol=1e-9, rtol=0)
    assert ov.times[0] == 0.0 and np.all(np.diff(ov.times) > 0)
    # pieces lie inside the pixel-center frame
    assert np.all(ov.pieces >= -0.5 - 1e-9) and np.all(ov.pieces[..., 0] <= 63.5 + 1e-9)


def test_overlay_circle_matches_closed_form():
    n, z, r, cx, cy = 60, 0.5, 0.05, 0.02, -0.01
    a = np.linspace(0, 2 * np.pi, n, endpoint=False)
    palm = np.column_stack([cx + r * np.cos(a), cy + r * np.sin(a), np.full(n, z)])
    ov = render_overlay(np.zeros((48, 64, 3), np.uint8), track_from_palm(palm), camera(0), n)
    center = np.array([K.focal_x * cx / z + K.principal_x, K.focal_y * cy / z + K.principal_y])
    radius = K.focal_x * r / z
    np.testing.assert_allclose(np.linalg.norm(ov.vertices - center, axis=1), radius, atol=1e-9)
    ang = np.arctan2(ov.vertices[:, 1] - center[1], ov.vertices[:, 0] - center[0])
    np.testing.assert_allclose(np.unwrap(ang), a, atol=1e-9)
    assert ov.image.any()


def test_static_and_axis_cases_draw_single_dot():
    n = 10
    palm = np.tile([0.0, 0.0, 0.6], (n, 1))
    ov = render_overlay(np.zeros((48, 64, 3), np.uint8), track_from_palm(palm), camera(0), n)
    np.testing.assert_allclose(ov.vertices, np.tile([K.principal_x, K.principal_y], (n, 1)), atol=1e-12)
    lit = np.argwhere(ov.image.sum(axis=2) > 0)
    assert lit.size and np.abs(lit.mean(axis=0) - [K.principal_y, K.principal_x]).max() < 0.5
    assert np.ptp(lit, axis=0).max() <= 4
    # receding along the optical axis stays at the principal point
    recede = np.column_stack([np.zeros(n), np.zeros(n), np.linspace(0.3, 1.5, n)])
    ov = render_overlay(np.zeros((48, 64, 3), np.uint8), track_from_palm(recede), camera(0), n)
    np.testing.assert_allclose(ov.vertices, np.tile([K.principal_x, K.principal_y], (n, 1)), atol=1e-12)


def test_behind_camera_dropped_and_all_behind_is_empty():
    n = 10
    palm = np.column_stack([np.zeros(n), np.zeros(n), np.linspace(0.5, -0.4, n)])
    ov = render_overlay(np.zeros((48, 64, 3), np.uint8), track_from_palm(palm), camera(0), n)
    assert len(ov.vertices) == 5
    behind = np.tile([0.0, 0.0, -0.5], (n, 1))
    ov = render_overlay(np.full((48, 64, 3), 9, np.uint8), track_from_palm(behind), camera(0), n)
    assert ov.empty and len(ov.pieces) == 0 and np.all(ov.image == 9)


def test_overlay_colors_ramp_from_purple_to_yellow():
    n = 40
    palm = np.column_stack([np.linspace(-0.2, 0.2, n), np.zeros(n), np.full(n, 0.5)])
    ov = render_overlay(np.zeros((48, 64, 3), np.uint8), track_from_palm(palm), camera(0), n)
    row = ov.image[int(round(K.principal_y))]
    lit = np.flatnonzero(row.sum(axis=1) > 200)
    start, end = row[lit[0] + 2].astype(int), row[lit[-1] - 2].astype(int)
    assert start[2] > start[1]  # purple end: blue above green
    assert end[1] > end[2]  # yellow end


# ---------------------------------------------------------------------------
# prompts


def fixture_frames():
    n = 24
    a = np.linspace(0, np.pi, n)
    palm = np.column_stack([0.1 * np.cos(a), 0.05 * np.sin(a), np.full(n, 0.5)])
    tr = track_from_palm(palm)
    seg = Segment("right", 2, 20, "fixture")
    cfg = PromptConfig(n_frames=4)
    return segment_frames(seg, tr, lambda f: camera(f), lambda f: np.full((48, 64, 3), 128, np.uint8), cfg), cfg


def redacted(payload: bytes) -> dict:
    p = json.loads(payload)
    for im in p.get("images", []):
        im["png"] = hashlib.sha256(decode_png(im["png"]).tobytes()).hexdigest()
    return p


def test_build_prompt_deterministic_and_hand_only_difference():
    frames, cfg = fixture_frames()
    a = build_prompt(frames, "right", cfg)
    assert a == build_prompt(frames, "right", cfg)
    b = json.loads(build_prompt(frames, "left", cfg))
    a = json.loads(a)
    assert a.pop("target_hand") == "right" and b.pop("target_hand") == "left"
    assert a == b
    with pytest.raises(ValueError):
        build_prompt([], "right")


def test_build_prompt_matches_golden():
    frames, cfg = fixture_frames()
    got = redacted(build_prompt(frames, "right", cfg))
    golden = json.loads((DATA / "caption_prompt_golden.json").read_text())
    assert got == golden


def test_png_is_lossless():
    frames, _ = fixture_frames()
    p = json.loads(build_prompt(frames, "right"))
    for im, f in zip(p["images"], frames):
        assert np.array_equal(decode_png(im["png"]), f.image)


# ---------------------------------------------------------------------------
# requests


def test_request_caption_mock_cases():
    payload = b'{"kind":"caption"}'
    r = request_caption(payload, MockCaptionClient(["pick up the cup"]), "s1")
    assert r.status == "ok" and r.caption == "pick up the cup" and r.attempts == 1
    r = request_caption(payload, MockCaptionClient(["N/A"]), "s2")
    assert r.status == "na" and r.caption is None
    for text in ("n/a", " N/A. ", "'N/A'", "NA"):
        assert is_na(text) or request_caption(payload, MockCaptionClient([text])).status == "na"


def test_request_caption_retries_then_succeeds():
    delays = []
    client = MockCaptionClient([{"error": "transient"}, {"error": "malformed"}, "1. Open the drawer"])
    r = request_caption(b"{}", client, "s", backoff_s=0.5, sleep=delays.append)
    assert r.status == "ok" and r.caption == "Open the drawer" and r.attempts == 3
    assert delays == [0.5, 1.0]


def test_request_caption_gives_up_after_five_retries():
    delays = []
    client = MockCaptionClient([{"error": "transient"}] * 10)
    r = request_caption(b"{}", client, "s", sleep=delays.append)
    assert r.status == "failed" and r.attempts == 6 and "Transient" in r.error
    assert len(delays) == 5 and len(client.calls) == 6
    with pytest.raises(ValueError):
        CaptionResult("x", None, ("a",), "na")


def test_rephrasings_limit_and_dedup():
    five = "\n".join(f"{i}. variant {i}" for i in range(1, 6))
    assert request_rephrasings("pick up the cup", MockCaptionClient([five])) == tuple(f"variant {i}" for i in range(1, 6))
    dup = "take the cup\nTake the cup.\n- lift the cup\ntake  the cup"
    assert request_rephrasings("pick up the cup", MockCaptionClient([dup])) == ("take the cup", "lift the cup")
    seven = "\n".join(f"v{i}" for i in range(7))
    assert len(request_rephrasings("x", MockCaptionClient([seven]))) == 5
    with pytest.raises(ValueError):
        request_rephrasings("N/A", MockCaptionClient())


def test_golden_transcript():
    fixture = json.loads((DATA / "mock_transcript.json").read_text())
    client = MockCaptionClient(fixture["transcript"])
    jobs = [(sid, json.dumps({"kind": "caption", "id": sid}).encode()) for sid in fixture["segments"]]
    got = caption_segments(jobs, client, max_inflight=1, sleep=no_sleep)
    assert {k: v.to_record() for k, v in got.items()} == fixture["expected"]


def test_fallback_mock_is_order_independent():
    payloads = [json.dumps({"kind": "caption", "i": i}).encode() for i in range(30)]
    a = [MockCaptionClient().complete(p) for p in payloads]
    c = MockCaptionClient()
    b = [c.complete(p) for p in reversed(payloads)][::-1]
    assert a == b
    assert any(is_na(x) for x in a) and not all(is_na(x) for x in a)


def test_concurrency_bounded_and_keyed():
    inflight, peak = [0], [0]
    lock = threading.Lock()

    class Slow(MockCaptionClient):
        def complete(self, payload):
            with lock:
                inflight[0] += 1
                peak[0] = max(peak[0], inflight[0])
            time.sleep(0.01)
            with lock:
                inflight[0] -= 1
            return super().complete(payload)

    jobs = [(f"s{i}", json.dumps({"kind": "caption", "i": i}).encode()) for i in range(16)]
    par = caption_segments(jobs, Slow(), max_inflight=4, sleep=no_sleep)
    seq = caption_segments(jobs, MockCaptionClient(), max_inflight=1, sleep=no_sleep)
    assert peak[0] <= 4
    assert par == seq


def test_token_bucket_rate():
    now = [0.0]
    b = TokenBucket(max_inflight=2, rate_per_s=1000.0, clock=lambda: now[0])
    with b:
        pass
    with pytest.raises(ValueError):
        TokenBucket(0)


def test_overlay_frame_default_pieces():
    f = OverlayFrame(0, np.zeros((2, 2, 3), np.uint8), np.zeros((0, 2)), np.zeros(0))
    assert f.empty and f.pieces.shape == (0, 2, 2)


def test_default_intrinsics_blank_frame():
    assert blank_frame(DEFAULT_INTRINSICS).shape == (240, 320, 3)
