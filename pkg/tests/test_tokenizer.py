import math

import numpy as np
import pytest

from tokenplan.geometry import AgentCategory, AgentTrack, BoxDims, Pose2
from tokenplan.tokenizer import (
    MotionSegment, Vocabulary, build_vocabulary, corner_distance, corner_distance_matrix, decode,
    encode, encode_segments, encode_tracking, segment_trajectory, segments_from_poses,
)

CAR = BoxDims(4.5, 2.0)


def _track(poses):
    return AgentTrack(AgentCategory.VEHICLE, CAR, np.asarray(poses, float))


def _arc(radius, speed, dt, n):
    w = speed / radius
    t = dt * np.arange(n)
    return np.c_[radius * np.sin(w * t), radius * (1 - np.cos(w * t)), w * t]


class TestSegments:
    def test_stationary(self):
        segs = segment_trajectory(_track(np.tile([3.0, -2.0, 0.7], (6, 1))))
        assert len(segs) == 5
        assert all(s == MotionSegment(0, 0, 0) for s in segs)

    def test_straight(self):
        poses = np.c_[10 * 0.5 * np.arange(8), np.zeros(8), np.zeros(8)]
        for s in segment_trajectory(_track(poses)):
            assert s.as_array() == pytest.approx([5, 0, 0])

    def test_arc(self):
        r, v, dt = 20.0, 10.0, 0.5
        segs = segment_trajectory(_track(_arc(r, v, dt, 10)))
        dtheta = v * dt / r
        chord = 2 * r * math.sin(dtheta / 2)
        for s in segs:
            assert s.dheading == pytest.approx(0.25)
            assert math.hypot(s.dx, s.dy) == pytest.approx(chord)
            assert math.atan2(s.dy, s.dx) == pytest.approx(dtheta / 2)

    def test_short_track(self):
        assert segment_trajectory(_track([[0, 0, 0]])) == []


def corner_distance_oracle(a, b, dims):
    """Direct four-corner evaluation with explicit rotation matrices."""
    total = 0.0
    for sx, sy in [(1, 1), (1, -1), (-1, -1), (-1, 1)]:
        local = np.array([sx * dims.length / 2, sy * dims.width / 2])
        pts = []
        for seg in (a, b):
            c, s = math.cos(seg[2]), math.sin(seg[2])
            pts.append(np.array([[c, -s], [s, c]]) @ local + seg[:2])
        total += np.linalg.norm(pts[0] - pts[1])
    return total / 4


class TestCornerDistance:
    def test_identity(self):
        a = MotionSegment(3.0, 0.2, 0.1)
        assert corner_distance(a, a, CAR) == 0.0

    def test_translation(self):
        a = MotionSegment(2.0, 1.0, 0.0)
        b = MotionSegment(5.0, 5.0, 0.0)
        assert corner_distance(a, b, CAR) == pytest.approx(5.0, abs=1e-12)

    def test_matches_oracle(self):
        rng = np.random.default_rng(0)
        a = rng.normal(size=(200, 3)) * [3, 1, 0.5]
        b = rng.normal(size=(200, 3)) * [3, 1, 0.5]
        got = corner_distance_matrix(a, b, np.array([CAR.length, CAR.width]))
        for i in range(0, 200, 7):
            for j in range(0, 200, 11):
                assert got[i, j] == pytest.approx(corner_distance_oracle(a[i], b[j], CAR), abs=1e-12)

    def test_pseudometric_random_triples(self):
        rng = np.random.default_rng(1)
        n = 10_000
        x, y, z = (rng.normal(size=(n, 3)) * [4, 1, 0.6] for _ in range(3))
        d = np.array([CAR.length, CAR.width])
        from tokenplan.geometry import box_corners_batch

        def pair(p, q):
            return np.linalg.norm(box_corners_batch(p, d) - box_corners_batch(q, d), axis=-1).mean(-1)
        dxy, dyz, dxz, dyx = pair(x, y), pair(y, z), pair(x, z), pair(y, x)
        assert np.all(dxy >= 0)
        assert np.array_equal(dxy, dyx)
        assert np.all(pair(x, x) == 0)
        assert np.all(dxz <= dxy + dyz + 1e-12)


class TestBuildVocabulary:
    def test_single_segment(self):
        segs = [MotionSegment(2.0, 0.0, 0.0)] * 50
        v = build_vocabulary(segs, 8, CAR, seed=0)
        assert len(v) == 1
        assert v.disk_radius_eps == 0.0

    def test_two_clusters(self):
        rng = np.random.default_rng(3)
        a = rng.normal([0, 0, 0], [0.05, 0.05, 0.01], (100, 3))
        b = rng.normal([8, 0, 0], [0.05, 0.05, 0.01], (100, 3))
        v = build_vocabulary(np.r_[a, b], 2, CAR, seed=0)
        assert len(v) == 2
        ids = encode_segments(np.r_[a, b], v)
        assert len(set(ids[:100])) == 1 and len(set(ids[100:])) == 1 and ids[0] != ids[100]
        dist = corner_distance_matrix(np.r_[a, b], v.segments, v.dims_array).min(1)
        assert np.mean(dist <= v.disk_radius_eps) >= 0.99

    def test_random_coverage(self):
        rng = np.random.default_rng(4)
        segs = np.c_[rng.uniform(0, 8, 500), rng.normal(0, 0.3, 500), rng.normal(0, 0.1, 500)]
        v = build_vocabulary(segs, 64, CAR, seed=0)
        assert len(v) <= 64
        assert list(range(len(v))) == [t.id for t in v.tokens]
        dist = corner_distance_matrix(segs, v.segments, v.dims_array).min(1)
        assert np.mean(dist <= v.disk_radius_eps) >= 0.99

    def test_deterministic(self):
        rng = np.random.default_rng(5)
        segs = np.c_[rng.uniform(0, 8, 400), rng.normal(0, 0.3, 400), rng.normal(0, 0.1, 400)]
        assert build_vocabulary(segs, 16, CAR, seed=7) == build_vocabulary(segs, 16, CAR, seed=7)

    def test_bad_k(self):
        with pytest.raises(ValueError):
            build_vocabulary([MotionSegment(1, 0, 0)], 0, CAR)

    def test_json_roundtrip(self):
        rng = np.random.default_rng(6)
        segs = np.c_[rng.uniform(0, 8, 100), rng.normal(0, 0.3, 100), rng.normal(0, 0.1, 100)]
        v = build_vocabulary(segs, 8, CAR, seed=0)
        d = v.to_dict()
        assert set(d) == {"version", "category", "dt", "ref_dims", "eps", "tokens"}
        assert Vocabulary.from_dict(d) == v
        d["version"] = 99
        with pytest.raises(ValueError):
            Vocabulary.from_dict(d)


@pytest.fixture(scope="module")
def smooth_vocab():
    rng = np.random.default_rng(8)
    tracks = []
    for _ in range(40):
        r = rng.uniform(20, 200) * rng.choice([-1, 1])
        # varying speed along an arc
        s = np.cumsum(np.r_[0, 0.5 * np.clip(rng.uniform(2, 15) + np.cumsum(rng.normal(0, 0.8, 16)), 0, None)])
        tracks.append(np.c_[r * np.sin(s / r), r * (1 - np.cos(s / r)), s / r])
    segs = np.concatenate([segments_from_poses(t) for t in tracks])
    return build_vocabulary(segs, 64, CAR, seed=0), tracks


class TestEncodeDecode:
    def test_roundtrip_error_bounded(self, smooth_vocab):
        vocab, tracks = smooth_vocab
        for poses in tracks:
            tr = _track(poses)
            ids = encode(tr, vocab)
            segs = segments_from_poses(poses)
            err = corner_distance_matrix(segs, vocab.segments[ids], vocab.dims_array).diagonal()
            covered = corner_distance_matrix(segs, vocab.segments, vocab.dims_array).min(1) <= vocab.disk_radius_eps
            assert np.all(err[covered] <= vocab.disk_radius_eps)

    def test_straight_drift_within_f_eps(self):
        # heading stays fixed, so per-step errors add up without rotation
        rng = np.random.default_rng(9)
        tracks = []
        for _ in range(40):
            s = np.cumsum(np.r_[0, 0.5 * np.clip(rng.uniform(2, 15) + np.cumsum(rng.normal(0, 0.8, 16)), 0, None)])
            tracks.append(np.c_[s, np.zeros(17), np.zeros(17)])
        vocab = build_vocabulary(np.concatenate([segments_from_poses(t) for t in tracks]), 64, CAR, seed=0)
        for poses in tracks:
            ids = encode(_track(poses), vocab)
            dec = decode(Pose2(*poses[0]), ids, vocab)
            assert math.hypot(dec[-1].x - poses[-1, 0], dec[-1].y - poses[-1, 1]) <= len(ids) * vocab.disk_radius_eps + 1e-9

    @pytest.mark.xfail(strict=True, reason="heading errors rotate later steps, so drift on arcs is not bounded by F*eps")
    def test_curved_drift_within_f_eps(self, smooth_vocab):
        vocab, tracks = smooth_vocab
        for poses in tracks:
            ids = encode(_track(poses), vocab)
            dec = decode(Pose2(*poses[0]), ids, vocab)
            assert math.hypot(dec[-1].x - poses[-1, 0], dec[-1].y - poses[-1, 1]) <= len(ids) * vocab.disk_radius_eps + 1e-9

    def test_stationary_zero_token(self):
        vocab = Vocabulary(AgentCategory.VEHICLE, [[2, 0, 0], [0, 0, 0], [5, 0, 0]], 0.1, CAR)
        ids = encode(_track(np.tile([1.0, 2.0, 0.3], (5, 1))), vocab)
        assert ids == [1, 1, 1, 1]

    def test_deterministic_and_tie_break(self):
        vocab = Vocabulary(AgentCategory.VEHICLE, [[1, 0, 0], [3, 0, 0]], 0.1, CAR)
        tr = _track([[0, 0, 0], [2, 0, 0]])
        assert encode(tr, vocab) == [0] == encode(tr, vocab)

    def test_category_mismatch(self):
        vocab = Vocabulary(AgentCategory.PEDESTRIAN, [[1, 0, 0]], 0.1, BoxDims(0.6, 0.6))
        with pytest.raises(ValueError):
            encode(_track([[0, 0, 0], [1, 0, 0]]), vocab)
        with pytest.raises(ValueError):
            encode(_track([[0, 0, 0], [1, 0, 0]]), Vocabulary(AgentCategory.VEHICLE, np.zeros((0, 3)), 0.1, CAR))

    def test_decode_basics(self):
        vocab = Vocabulary(AgentCategory.VEHICLE, [[0, 0, 0], [1, 0, math.pi / 2]], 0.1, CAR)
        start = Pose2(1, 2, 0.5)
        assert decode(start, [], vocab) == []
        assert decode(start, [0] * 5, vocab) == [start] * 5
        out = decode(Pose2(0, 0, 0), [1, 1], vocab)
        assert (out[1].x, out[1].y) == pytest.approx((1, 1))
        with pytest.raises(IndexError):
            decode(start, [2], vocab)

    def test_tracking_encoder_reduces_drift(self, smooth_vocab):
        vocab, tracks = smooth_vocab

        def max_err(poses, ids):
            dec = decode(Pose2(*poses[0]), ids, vocab)
            return max(math.hypot(p.x - q[0], p.y - q[1]) for p, q in zip(dec, poses[1:]))
        plain = [max_err(p, encode(_track(p), vocab)) for p in tracks]
        tracked = [max_err(p, encode_tracking(p, vocab)) for p in tracks]
        assert np.mean(tracked) < 0.5 * np.mean(plain)
        assert np.median(tracked) < np.median(plain)

    def test_tracking_on_stationary(self):
        vocab = Vocabulary(AgentCategory.VEHICLE, [[2, 0, 0], [0, 0, 0]], 0.1, CAR)
        assert encode_tracking(np.tile([1.0, 2.0, 0.3], (4, 1)), vocab).tolist() == [1, 1, 1]
