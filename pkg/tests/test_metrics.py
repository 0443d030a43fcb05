import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from handvla.geom import euler_to_matrix, euler_to_matrix_batch
from handvla.metrics import (
    FeatureSet,
    GraspCase,
    WordStats,
    diversity_curve,
    fingertip_positions,
    grasp_eval,
    h_index,
    hand_object_distance,
    instruction_diversity,
    make_grasp_cases,
    read_features,
    read_grasp_cases,
    touching_source,
    visual_diversity,
    write_features,
    write_grasp_cases,
    zero_motion_source,
)
from handvla.retarget import TIP_SITES, forward_kinematics, mano_like_chain


def brute_visual(q, t):
    best = []
    for a in q:
        m = -np.inf
        for b in t:
            m = max(m, sum(float(x) * float(y) for x, y in zip(a, b)))
        best.append(m)
    best = np.array(best)
    return best.mean(), sum(1 for v in best if v > 0.5) / len(best), best


def brute_h(counts):
    counts = list(counts)
    h = 0
    for cand in range(1, len(counts) + 1):
        if sum(1 for c in counts if c >= cand) >= cand:
            h = cand
    return h


def test_visual_trivial_cases():
    rng = np.random.default_rng(0)
    fs = FeatureSet.from_vectors(rng.normal(size=(30, 8)))
    vd = visual_diversity(fs, fs)
    assert vd.avg_max_cos == pytest.approx(1.0, abs=1e-12) and vd.recall_at_05 == 1.0
    eye = np.eye(6)
    vd = visual_diversity(FeatureSet.from_vectors(eye[:3]), FeatureSet.from_vectors(eye[3:]))
    assert vd.avg_max_cos == 0.0 and vd.recall_at_05 == 0.0


def test_visual_matches_brute_force():
    rng = np.random.default_rng(1)
    for _ in range(5):
        d = int(rng.integers(2, 12))
        q = FeatureSet.from_vectors(rng.normal(size=(int(rng.integers(1, 40)), d)))
        t = FeatureSet.from_vectors(rng.normal(size=(int(rng.integers(1, 60)), d)))
        avg, r, best = brute_visual(q.vectors, t.vectors)
        vd = visual_diversity(q, t)
        np.testing.assert_allclose(vd.max_cos, best, atol=1e-12, rtol=0)
        assert abs(vd.avg_max_cos - avg) < 1e-12
        assert vd.recall_at_05 == r


def test_visual_errors():
    a = FeatureSet.from_vectors(np.eye(3))
    b = FeatureSet.from_vectors(np.eye(4))
    with pytest.raises(ValueError):
        visual_diversity(a, b)
    with pytest.raises(ValueError):
        FeatureSet(("a",), np.array([[2.0, 0.0]]))


def test_diversity_curve():
    rng = np.random.default_rng(2)
    q = FeatureSet.from_vectors(rng.normal(size=(20, 5)))
    t = FeatureSet.from_vectors(rng.normal(size=(50, 5)))
    curve = diversity_curve(q, t, [1, 10, 50], seed=3)
    assert curve == diversity_curve(q, t, [1, 10, 50], seed=3)
    full = visual_diversity(q, t)
    assert curve[-1][1] == pytest.approx(full.avg_max_cos, abs=1e-15)
    assert curve[0][1] <= full.avg_max_cos
    with pytest.raises(ValueError):
        diversity_curve(q, t, [51])


def test_feature_file_roundtrip(tmp_path):
    rng = np.random.default_rng(4)
    fs = FeatureSet.from_vectors(rng.normal(size=(7, 16)), [f"img{i}" for i in range(7)])
    write_features(tmp_path / "f.bin", fs)
    back = read_features(tmp_path / "f.bin")
    assert back.ids == fs.ids
    np.testing.assert_allclose(back.vectors, fs.vectors, atol=1e-6)
    (tmp_path / "bad.bin").write_bytes((tmp_path / "f.bin").read_bytes()[:-3])
    with pytest.raises(ValueError):
        read_features(tmp_path / "bad.bin")


def test_instruction_diversity_examples():
    d = instruction_diversity({f"w{i}": 5 for i in range(5)})
    assert d.h_index == 5 and d.i100 == 0
    d = instruction_diversity({"grab": 1000})
    assert d.h_index == 1 and d.i100 == 1
    assert list(instruction_diversity({"a": 1, "b": 7, "c": 3}).rank_frequency) == [7, 3, 1]


@settings(max_examples=100, deadline=None)
@given(st.lists(st.integers(1, 300), min_size=1, max_size=60))
def test_h_index_matches_brute_force(counts):
    assert h_index(counts) == brute_h(counts)
    d = instruction_diversity({f"w{i}": c for i, c in enumerate(counts)})
    assert d.i100 == sum(1 for c in counts if c >= 100)


def test_word_stats(tmp_path):
    ws = WordStats.from_tagged([("Pick", "verb"), ("cup", "noun"), ("pick", "verb"), ("red", "adjective"), ("the", "det")])
    assert ws.counts["verb"] == {"pick": 2}
    ws.save(tmp_path / "w.json")
    back = WordStats.load(tmp_path / "w.json")
    assert back.merged() == {"pick": 2, "cup": 1, "red": 1}
    assert instruction_diversity(back, "verb").h_index == 1
    with pytest.raises(ValueError):
        WordStats({"noun": {"cup": 0}})


def triple_loop(chain, ts, rs, qs, cloud):
    best = np.inf
    idx = [chain.site_index(s) for s in TIP_SITES]
    for t, r, q in zip(ts, rs, qs):
        local = forward_kinematics(chain, q).site_positions
        for i in idx:
            tip = r @ local[i] + t
            for p in cloud:
                best = min(best, float(np.sqrt(((tip - p) ** 2).sum())))
    return best


def test_hand_object_distance_matches_triple_loop():
    chain = mano_like_chain("right")
    rng = np.random.default_rng(5)
    for _ in range(5):
        n = int(rng.integers(1, 6))
        ts = rng.normal(scale=0.2, size=(n, 3))
        rs = euler_to_matrix_batch(rng.normal(size=(n, 3)))
        qs = rng.normal(scale=0.3, size=(n, 45))
        cloud = rng.normal(scale=0.2, size=(int(rng.integers(1, 80)), 3))
        assert hand_object_distance(chain, ts, rs, qs, cloud) == pytest.approx(triple_loop(chain, ts, rs, qs, cloud), abs=1e-15)


def test_hand_object_distance_trivial_and_errors():
    chain = mano_like_chain("right")
    q = np.zeros(45)
    tip = fingertip_positions(chain, np.zeros(3), np.eye(3), q)[0, 2]
    assert hand_object_distance(chain, np.zeros(3), np.eye(3), q, tip[None]) == 0.0
    d = hand_object_distance(chain, np.zeros(3), np.eye(3), q, [tip + [0.0, 0.0, 0.20]])
    assert d == pytest.approx(0.20, abs=1e-12)
    with pytest.raises(ValueError):
        hand_object_distance(chain, np.zeros(3), np.eye(3), q, np.zeros((0, 3)))


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_hand_object_distance_rigid_invariance(seed):
    chain = mano_like_chain("left")
    rng = np.random.default_rng(seed)
    ts = rng.normal(scale=0.2, size=(3, 3))
    rs = euler_to_matrix_batch(rng.normal(size=(3, 3)))
    qs = rng.normal(scale=0.3, size=(3, 45))
    cloud = rng.normal(scale=0.2, size=(30, 3))
    g = euler_to_matrix(rng.normal(size=3))
    c = rng.normal(size=3)
    a = hand_object_distance(chain, ts, rs, qs, cloud)
    b = hand_object_distance(chain, ts @ g.T + c, g @ rs, qs, cloud @ g.T + c)
    assert a == pytest.approx(b, abs=1e-12)


def test_grasp_eval_fixtures_and_sources(tmp_path):
    cases = make_grasp_cases(np.random.default_rng(6), 4)
    write_grasp_cases(tmp_path / "cases.jsonl", cases)
    cases = read_grasp_cases(tmp_path / "cases.jsonl")
    rep = grasp_eval(cases, zero_motion_source())
    assert rep.average_cm == pytest.approx(20.0, abs=1e-6)
    assert rep.median_cm == pytest.approx(20.0, abs=1e-6)
    assert grasp_eval(cases, touching_source()).average_cm < 1e-9
    assert "average" in rep.to_table()
    assert rep.to_records()[-1]["cases"] == 4


def test_grasp_eval_flags_failed_trials():
    cases = make_grasp_cases(np.random.default_rng(7), 3)
    zero = zero_motion_source()

    def flaky(case: GraspCase, seed: int):
        if case.case_id == "case_001" and seed == 2:
            raise ValueError("model produced no trajectory")
        return zero(case, seed)

    rep = grasp_eval(cases, flaky)
    assert rep.failed == ("case_001",)
    assert set(rep.per_case) == {"case_000", "case_002"}
    assert rep.average_cm == pytest.approx(20.0, abs=1e-6)


def test_grasp_eval_mean_of_trials():
    cases = make_grasp_cases(np.random.default_rng(8), 1)
    zero = zero_motion_source()
    touch = touching_source()
    alt = lambda case, seed: touch(case, seed) if seed % 2 else zero(case, seed)
    assert grasp_eval(cases, alt, trials=4).average_cm == pytest.approx(10.0, abs=1e-6)
