"""End-to-end acceptance checks, one test per criterion, at the pinned tolerances."""

import os
import subprocess
import sys
import time
from pathlib import Path

import numpy as np

from handvla.augment import flip_episode, palm_trajectory, sample_params, transform_episode, transform_points, warp_points
from handvla.episode import ACTION_DIM, build_actions, chunk_at, compute_norm_stats, integrate_actions, make_chunks, normalize, pool_norm_stats
from handvla.geom import project_points
from handvla.metrics import FeatureSet, grasp_eval, h_index, instruction_diversity, make_grasp_cases, visual_diversity, zero_motion_source
from handvla.pipeline import ALL_STAGES, CRASH_ENV, PipelineConfig, RunManifest, run
from handvla.retarget import KinematicChain, RetargetConfig, dexpilot_solve, fk_jacobian, forward_kinematics, load_asset_chain
from handvla.segment import detect_speed_minima, segment_track
from handvla.synth import DEFAULT_INTRINSICS, random_wrist_track, two_phase_track, write_corpus

from test_augment import random_episode
from test_episode import synthetic_episode
from test_metrics import brute_h, brute_visual
from test_retarget import _targets, oracle_fk, random_chain_dict
from test_segment import brute_force_minima


def rotation_angle(a, b):
    # 2 asin(|A - B|_F / sqrt 8) keeps full precision for tiny angles
    return 2 * np.arcsin(min(np.linalg.norm(a - b) / np.sqrt(8.0), 1.0))


def test_criterion_1_zero_motion_grasp_baseline(report):
    t0 = time.perf_counter()
    cases = make_grasp_cases(np.random.default_rng(2024), 20, distance=0.20)
    rep = grasp_eval(cases, zero_motion_source(16), trials=4)
    elapsed = time.perf_counter() - t0
    ok = abs(rep.average_cm - 20.0) <= 0.1 and abs(rep.median_cm - 20.0) <= 0.1 and not rep.failed and elapsed < 5.0
    assert report(1, ok, f"avg {rep.average_cm:.4f} cm, median {rep.median_cm:.4f} cm over {len(rep.per_case)} cases, {elapsed:.2f} s")


def test_criterion_2_segmentation_oracle(report):
    t0 = time.perf_counter()
    hits = 0
    for seed in range(100):
        tr, boundary = two_phase_track(np.random.default_rng(seed), fps=30.0)
        segs = segment_track(tr)
        hits += len(segs) == 2 and abs(segs[1].start_frame - boundary) <= 2
    rng = np.random.default_rng(99)
    mismatches = 0
    for _ in range(1000):
        n = int(rng.integers(2, 200))
        speed = np.round(rng.random(n), int(rng.integers(1, 4)))  # coarse rounding plants ties
        if rng.random() < 0.3:
            speed[rng.random(n) < 0.1] = np.nan
        mismatches += detect_speed_minima(speed, 30.0).tolist() != brute_force_minima(speed, 30.0)
    elapsed = time.perf_counter() - t0
    ok = hits >= 98 and mismatches == 0 and elapsed < 10.0
    assert report(2, ok, f"boundaries within 2 frames on {hits}/100 tracks, minima mismatches {mismatches}/1000, {elapsed:.2f} s")


def test_criterion_3_action_round_trip(report):
    worst_t = worst_r = 0.0
    for seed in range(100):
        tr = random_wrist_track(np.random.default_rng(seed), 200)
        actions, _ = build_actions({"right": tr})
        t, r = integrate_actions(tr.translations[0], tr.rotations[0], actions, "right")
        worst_t = max(worst_t, float(np.linalg.norm(t[-1] - tr.translations[-1])))
        worst_r = max(worst_r, rotation_angle(r[-1], tr.rotations[-1]))
    ok = worst_t < 1e-7 and worst_r < 1e-7
    assert report(3, ok, f"worst terminal error {worst_t:.2e} m / {worst_r:.2e} rad over 100 seeds x 200 frames")


def test_criterion_4_augmentation_reprojection(report):
    rng = np.random.default_rng(4)
    K = DEFAULT_INTRINSICS
    worst, accepted, flips_exact = 0.0, 0, True
    for e in range(50):
        ep = random_episode(rng)
        palm = palm_trajectory(ep, 0)
        src_px, src_ok = project_points(K, palm)
        seed, got = 1000 * e, 0
        while got < 20:
            params, spec, ok = sample_params(K, palm, seed)
            seed += 1
            if not ok:
                continue
            got += 1
            # direct point transform and the stored (float32) transformed episode
            for pts in (transform_points(palm, spec), palm_trajectory(transform_episode(ep, spec), 0)):
                px, ahead = project_points(spec.k_new, pts)
                both = ahead & src_ok
                worst = max(worst, float(np.abs(px[both] - warp_points(src_px[both], spec)).max(initial=0.0)))
        accepted += got
        twice = flip_episode(flip_episode(ep))
        flips_exact &= np.array_equal(twice.actions, ep.actions) and np.array_equal(twice.action_mask, ep.action_mask) and twice == ep
    ok = worst <= 0.5 and flips_exact and accepted == 1000
    assert report(4, ok, f"max reprojection gap {worst:.2e} px over {accepted} accepted crops, flip twice exact: {flips_exact}")


def test_criterion_5_retargeting(report):
    rng = np.random.default_rng(5)
    fk_err = jac_err = 0.0
    for _ in range(50):
        d = random_chain_dict(rng)
        chain = KinematicChain.from_dict(d)
        q = rng.uniform(-3, 3, size=chain.dof)
        fk_err = max(fk_err, float(np.abs(forward_kinematics(chain, q).site_positions - oracle_fk(d, q)).max()))
        J = fk_jacobian(chain, q)
        h = 1e-6
        fd = np.empty_like(J)
        for j in range(chain.dof):
            e = np.zeros(chain.dof)
            e[j] = h
            fd[:, :, j] = (forward_kinematics(chain, q + e).site_positions - forward_kinematics(chain, q - e).site_positions) / (2 * h)
        jac_err = max(jac_err, float(np.abs(J - fd).max() / max(np.abs(fd).max(), 1e-12)))

    # warm start near an interior pose, as in teleoperation where q_prev is the last frame's solution
    worst_obj, monotone, passed = 0.0, True, 0
    for name in ("xhand_like", "mano_like_right"):
        chain = load_asset_chain(name)
        lo, hi = chain.lower, chain.upper
        for seed in range(50):
            r = np.random.default_rng([5, seed])
            q_star = r.uniform(lo + 0.15 * (hi - lo), hi - 0.15 * (hi - lo))
            q0 = chain.clamp(q_star + r.normal(scale=0.05, size=chain.dof))
            res = dexpilot_solve(chain, _targets(chain, q_star), q0, RetargetConfig(beta=0.0))
            worst_obj = max(worst_obj, res.objective)
            monotone &= all(b <= a for a, b in zip(res.history, res.history[1:]))
            passed += res.objective < 1e-8
    ok = fk_err <= 1e-10 and jac_err <= 1e-6 and worst_obj < 1e-8 and monotone
    assert report(5, ok, f"FK {fk_err:.1e}, Jacobian rel {jac_err:.1e}, DexPilot worst objective {worst_obj:.1e} ({passed}/100 solves), monotone {monotone}")


def test_criterion_6_normalization_pooling(report):
    worst_pool = worst_mean = worst_var = 0.0
    for seed in range(20):
        rng = np.random.default_rng([6, seed])
        n_eps = int(rng.integers(6, 16))
        eps = [synthetic_episode(rng, int(rng.integers(10, 50))) for _ in range(n_eps)]
        k = int(rng.integers(2, min(6, n_eps) + 1))
        cuts = np.sort(rng.choice(np.arange(1, n_eps), size=k - 1, replace=False))
        groups = np.split(rng.permutation(n_eps), cuts)
        parts = [compute_norm_stats([eps[i] for i in g]) for g in groups]
        direct = compute_norm_stats(eps)
        for kind, frames in (("state", lambda e: e.n_frames), ("action", lambda e: e.n_frames - 1)):
            w = np.array([sum(frames(eps[i]) for i in g) for g in groups], dtype=float)
            pooled = getattr(pool_norm_stats(parts, w / w.sum()), kind)
            ref = getattr(direct, kind)
            worst_pool = max(worst_pool, float(np.abs(pooled.mean - ref.mean).max()), float(np.abs(pooled.var - ref.var).max()))
            if kind == "action":
                z = np.concatenate([normalize(e.actions, pooled, e.action_mask) for e in eps])
                m = np.concatenate([e.action_mask for e in eps]) > 0
                live = ~pooled.flagged
                cnt = m.sum(axis=0)
                mean = (z * m).sum(axis=0) / np.maximum(cnt, 1)
                var = (((z - mean) * m) ** 2).sum(axis=0) / np.maximum(cnt, 1)
                worst_mean = max(worst_mean, float(np.abs(mean[live]).max()))
                worst_var = max(worst_var, float(np.abs(var[live] - 1).max()))
    ok = worst_pool <= 1e-9 and worst_mean <= 1e-6 and worst_var <= 1e-6
    assert report(6, ok, f"pooled vs direct {worst_pool:.1e}, normalized |mean| {worst_mean:.1e}, |var-1| {worst_var:.1e} over 20 seeds")


def test_criterion_7_diversity_metrics(report):
    rng = np.random.default_rng(7)
    worst, recall_equal = 0.0, True
    for _ in range(10):
        d = int(rng.integers(4, 32))
        q = FeatureSet.from_vectors(rng.normal(size=(int(rng.integers(5, 60)), d)))
        t = FeatureSet.from_vectors(rng.normal(size=(int(rng.integers(5, 120)), d)))
        avg, r05, best = brute_visual(q.vectors, t.vectors)
        vd = visual_diversity(q, t)
        worst = max(worst, float(np.abs(vd.max_cos - best).max()), abs(vd.avg_max_cos - avg))
        recall_equal &= vd.recall_at_05 == r05
    h_ok = True
    for _ in range(100):
        counts = rng.integers(1, 400, size=int(rng.integers(1, 80))).tolist()
        d = instruction_diversity({f"w{i}": c for i, c in enumerate(counts)})
        h_ok &= d.h_index == brute_h(counts) == h_index(counts) and d.i100 == sum(c >= 100 for c in counts)
    five = instruction_diversity({f"w{i}": 5 for i in range(5)}).h_index
    ok = worst <= 1e-12 and recall_equal and h_ok and five == 5
    assert report(7, ok, f"visual vs brute force {worst:.1e} (R@0.5 identical: {recall_equal}), h/i100 on 100 corpora: {h_ok}, {{5,5,5,5,5}} -> h={five}")


def _tree(root: Path, sub: str) -> dict[str, bytes]:
    base = root / sub
    return {p.relative_to(base).as_posix(): p.read_bytes() for p in sorted(base.rglob("*")) if p.is_file()}


def test_criterion_8_pipeline_determinism_and_resume(report, tmp_path, monkeypatch):
    epoch = "1700000000"
    monkeypatch.setenv("SOURCE_DATE_EPOCH", epoch)
    roots = {}
    for name in ("a", "b", "c"):
        roots[name] = tmp_path / name
        write_corpus(roots[name] / "tracks", 10, seed=8)
    res_a = run(ALL_STAGES, PipelineConfig(), roots["a"])
    res_b = run(ALL_STAGES, PipelineConfig(), roots["b"])
    same_eps = _tree(roots["a"], "episodes") == _tree(roots["b"], "episodes")
    same_manifest = (roots["a"] / "work/manifest.jsonl").read_bytes() == (roots["b"] / "work/manifest.jsonl").read_bytes()
    n_eps = len(list((roots["a"] / "episodes").rglob("*.ep")))

    env = dict(os.environ, SOURCE_DATE_EPOCH=epoch, **{CRASH_ENV: "23"})
    cmd = [sys.executable, "-m", "handvla.cli", "run-all", "--root", str(roots["c"])]
    crashed = subprocess.run(cmd, env=env, capture_output=True, text=True)
    env.pop(CRASH_ENV)
    resumed = subprocess.run(cmd, env=env, capture_output=True, text=True)
    same_resume = (
        crashed.returncode == 75
        and resumed.returncode == 0
        and _tree(roots["a"], "episodes") == _tree(roots["c"], "episodes")
        and _tree(roots["a"], "reports") == _tree(roots["c"], "reports")
        and RunManifest(roots["a"] / "work/manifest.jsonl", roots["a"]).state() == RunManifest(roots["c"] / "work/manifest.jsonl", roots["c"]).state()
    )
    ok = res_a.exit_code == res_b.exit_code == 0 and same_eps and same_manifest and same_resume and n_eps > 0
    assert report(8, ok, f"{n_eps} episodes; repeat run identical: episodes {same_eps}, manifest {same_manifest}; crash after 23 stages + resume identical: {same_resume}")


def test_criterion_9_chunk_padding(report):
    ep = synthetic_episode(np.random.default_rng(9), n=30)
    n_steps = len(ep.actions)
    ok = True
    chunks = make_chunks(ep, 16, 1)
    for c in chunks:
        steps = c.start + np.arange(16)
        inside = steps < n_steps
        ok &= np.array_equal(c.valid, inside.astype(c.valid.dtype))
        ok &= not c.actions[~inside].any() and not c.mask[~inside].any()
        ok &= np.array_equal(c.actions[inside], ep.actions[steps[inside]]) and np.array_equal(c.mask[inside], ep.action_mask[steps[inside]])
        ok &= c.actions.shape == (16, ACTION_DIM)
    last = chunk_at(ep.actions, ep.action_mask, n_steps - 1, 16)
    ok &= int(last.valid.sum()) == 1
    assert report(9, bool(ok) and len(chunks) == n_steps, f"{len(chunks)} chunks of 16 over a 30-frame episode ({n_steps} actions); padding zero with validity 0, in-episode steps bit-equal")
