import json
import logging
from math import comb

import numpy as np
import pytest

from tokenplan.analysis import (
    HIST_BINS, advantage_distribution, advantage_table_rows, composite_score, group_is_unsafe, pass_at_k,
    pass_at_k_from_counts, rollout_passes, unsafe_ratio, write_csv, write_json,
)
from tokenplan.rewards import RewardBreakdown
from tokenplan.trainer import dominance_fixture, shape_rewards_grpo, shape_rewards_vdgrpo


def _bd(F=4, crash_at=None, speed=1.0, comfort=1.0, ttc=None):
    ones = np.ones(F)
    dyn = ones.copy()
    if crash_at is not None:
        dyn[crash_at:] = 0.0
    t = ones.copy() if ttc is None else np.asarray(ttc, float)
    return RewardBreakdown(ones.copy(), dyn, ones.copy(), comfort * ones, t, speed * ones, ones.copy(),
                           total=ones.copy())


class TestComposite:
    def test_perfect(self):
        assert composite_score([_bd()]).aggregate == 100.0

    def test_collision_zero(self):
        cs = composite_score([_bd(crash_at=2), _bd()])
        assert cs.score.tolist() == [0.0, 100.0] and cs.aggregate == 50.0

    def test_ttc_in_gate(self):
        assert composite_score([_bd(ttc=[1, 1, 0, 1])]).aggregate == 0.0

    def test_soft_weights(self):
        assert composite_score([_bd(speed=0.5)]).aggregate == pytest.approx(90.0)

    def test_order_invariant(self):
        rng = np.random.default_rng(0)
        bds = [_bd(speed=s, comfort=c) for s, c in zip(rng.random(37), rng.integers(0, 2, 37))]
        ids = [f"s{i}" for i in range(37)]
        a = composite_score(bds, scenario_ids=ids)
        perm = rng.permutation(37)
        b = composite_score([bds[i] for i in perm], scenario_ids=[ids[i] for i in perm])
        assert a.aggregate == b.aggregate and a.speed_mean == b.speed_mean
        assert np.all((a.score >= 0) & (a.score <= 100))

    def test_empty(self):
        with pytest.raises(ValueError):
            composite_score([])

    def test_rows(self):
        rows = composite_score([_bd()], scenario_ids=["a"]).rows()
        assert rows == [{"scenario_id": "a", "safety_gate": 1, "soft_mean": 1.0, "score": 100.0}]


class TestLabelsAndAdvantages:
    def test_group_label(self):
        assert not group_is_unsafe([_bd(), _bd()])
        assert group_is_unsafe([_bd(), _bd(crash_at=3)])
        # TTC is a soft score, not a safety bit
        assert not group_is_unsafe([_bd(ttc=[0, 0, 0, 0])])

    def test_fixture_distribution(self):
        safe, unsafe = dominance_fixture()
        for fn, lo, hi in ((shape_rewards_grpo, 0.5, 2.0), (shape_rewards_vdgrpo, 10.0, np.inf)):
            d = advantage_distribution([fn(safe).adv, fn(unsafe).adv], [False, True])
            ratio = d["unsafe"]["max"] / d["safe"]["max"]
            assert lo <= ratio <= hi
            assert sum(d["safe"]["counts"]) == safe.size

    def test_missing_label_warns(self, caplog):
        with caplog.at_level(logging.WARNING):
            d = advantage_distribution([np.ones((2, 3))], [False])
        assert "unsafe" not in d and "no unsafe groups" in caplog.text

    def test_table(self):
        d = advantage_distribution([np.full((2, 2), 0.5)], [True])
        rows = advantage_table_rows(d)
        assert len(rows) == 50 and len(HIST_BINS) == 51
        assert sum(r["count"] for r in rows) == 4

    def test_unsafe_ratio(self):
        assert unsafe_ratio([[False, False]]) == [0.0]
        assert unsafe_ratio([[True, False, False, False]]) == [0.25]
        assert unsafe_ratio([{"unsafe_group_ratio": 0.5}]) == [0.5]


class TestPassAtK:
    def test_matches_combinatorial_formula(self):
        n, k_max = 16, 16
        c = np.arange(0, 17)
        got = pass_at_k_from_counts(n, c, k_max)
        for k in range(1, k_max + 1):
            exact = np.mean([1 - comb(n - ci, k) / comb(n, k) for ci in c])
            assert got[k - 1] == pytest.approx(exact, abs=1e-12)

    def test_monotone_and_bounds(self):
        rng = np.random.default_rng(0)
        for _ in range(100):
            c = rng.integers(0, 17, 30)
            curve = pass_at_k_from_counts(16, c, 16)
            assert np.all(np.diff(curve) >= 0)
            assert curve[-1] == np.mean(c > 0)

    def test_always_safe(self):
        assert pass_at_k_from_counts(8, np.full(5, 8), 8).tolist() == [1.0] * 8

    def test_kmax_too_large(self):
        with pytest.raises(ValueError):
            pass_at_k_from_counts(4, np.array([1]), 5)

    def test_success_definition(self):
        assert rollout_passes(_bd())
        assert not rollout_passes(_bd(crash_at=1))
        assert not rollout_passes(_bd(comfort=0.0))
        assert not rollout_passes(_bd(speed=0.5))

    def test_end_to_end(self, short_scenarios, vocabs16, tiny_params):
        res = pass_at_k(tiny_params, tiny_params, short_scenarios[:2], vocabs16, k_max=4, seed=1)
        assert res["k"] == [1, 2, 3, 4] and len(res["successes"]) == 2
        assert np.all(np.diff(res["pass_at_k"]) >= 0)


def test_writers(tmp_path):
    write_csv(tmp_path / "a" / "t.csv", [{"x": 1, "y": 2.5}])
    assert (tmp_path / "a" / "t.csv").read_text().splitlines() == ["x,y", "1,2.5"]
    write_json(tmp_path / "b.json", {"k": [1]})
    assert json.loads((tmp_path / "b.json").read_text()) == {"k": [1]}
