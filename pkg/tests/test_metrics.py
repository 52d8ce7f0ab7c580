import numpy as np
import pytest

from aloha_dqn.env import SimConfig, run_episode
from aloha_dqn.metrics import (
    BoxStats, MetricsLog, average_aop, box_stats, discard_rate, nearest_rank, per_user_throughput,
    percentile_stats, summarize, throughput, update_aop,
)
from aloha_dqn.policy import ExponentialBackoff, FixedProbability, TablePolicy


def replay_aop(arrivals, successes):
    """Rebuild buffers and ages from the logged arrivals and deliveries alone."""
    k_slots, n = arrivals.shape
    aop = np.zeros((k_slots, n), dtype=np.int64)
    discarded = np.zeros((k_slots, n), dtype=np.int64)
    for u in range(n):
        buf, age = 0, 0
        for k in range(k_slots):
            pending = buf + int(arrivals[k, u])
            discarded[k, u] = max(pending - 1, 0)
            buf = min(pending, 1) - int(successes[k, u])
            assert buf in (0, 1)
            age = age + 1 if buf else 0
            aop[k, u] = age
    return aop, discarded


class TestAopRecursion:
    @pytest.mark.parametrize("w, b, expected", [(0, 0, 0), (0, 1, 1), (5, 1, 6), (5, 0, 0)])
    def test_update(self, w, b, expected):
        assert update_aop(w, b) == expected

    def test_negative_rejected(self):
        with pytest.raises(ValueError):
            update_aop(-1, 1)

    def test_hand_sequence(self):
        # Arrival at slot 0, held for two slots, delivered at slot 3.
        arrivals = np.array([[1], [0], [0], [0], [2]])
        successes = np.array([[0], [0], [0], [1], [0]])
        aop, disc = replay_aop(arrivals, successes)
        assert aop[:, 0].tolist() == [1, 2, 3, 0, 1]
        assert disc[:, 0].tolist() == [0, 0, 0, 0, 1]

    def test_time_average(self):
        log = MetricsLog.allocate(1, 0.5, 4, 0, "x")
        log.aop[:, 0] = [0, 1, 2, 0]
        per_user, system = average_aop(log)
        assert per_user.tolist() == [0.75]
        assert system == 0.75


class TestEpisodeMetrics:
    @pytest.mark.parametrize("policy, lam", [
        (FixedProbability(0.15), 0.6),
        (ExponentialBackoff("nseb", 2.0), 0.8),
        (ExponentialBackoff("seb", 1.35), 0.8),
        (TablePolicy([0.0, 0, 0.3, 0, 0.4, 0, 0.9, 0]), 0.4),
    ])
    def test_logged_aop_matches_replay(self, policy, lam):
        log = run_episode(policy, SimConfig(6, lam, 3000, 7))
        aop, disc = replay_aop(log.arrivals, log.successes)
        np.testing.assert_array_equal(log.aop, aop)
        np.testing.assert_array_equal(log.discarded, disc)

    def test_system_aop_is_sum_of_user_means(self):
        log = run_episode(ExponentialBackoff("nseb", 2.0), SimConfig(10, 0.8, 5000, 3))
        per_user, system = average_aop(log)
        assert system == pytest.approx(float(log.aop.mean(axis=0).sum()), rel=1e-12)
        assert per_user.shape == (10,)

    def test_throughput_views_agree(self):
        log = run_episode(FixedProbability(0.1), SimConfig(10, 0.8, 5000, 1))
        assert throughput(log) == pytest.approx(per_user_throughput(log).sum(), rel=1e-12)
        assert throughput(log) == log.successes.sum() / 5000

    def test_discard_conservation_exact(self):
        # Every arrival is delivered, discarded, or still in the buffer at the end.
        log = run_episode(ExponentialBackoff("seb", 2.0), SimConfig(10, 0.8, 20_000, 5))
        left = (log.aop[-1] > 0).astype(np.int64)
        arrived = log.arrivals.sum(axis=0, dtype=np.int64)
        out = log.successes.sum(axis=0, dtype=np.int64) + log.discarded.sum(axis=0, dtype=np.int64)
        np.testing.assert_array_equal(arrived, out + left)

    def test_single_user_discards(self):
        # N=1, always transmit when holding a packet: every slot with a packet
        # succeeds, so T = P(at least one arrival) and discards = lambda - T.
        lam = 2.0
        log = run_episode(FixedProbability(1.0), SimConfig(1, lam, 200_000, 4))
        t = throughput(log)
        assert t == pytest.approx(1 - np.exp(-lam), abs=0.005)
        assert discard_rate(log)[0] == pytest.approx(lam - t, abs=0.01)

    def test_summary_fields(self):
        log = run_episode(FixedProbability(0.2), SimConfig(4, 0.5, 1000, 9))
        s = summarize(log)
        assert s["policy"] == "fixed-0.2"
        assert s["slots"] == 1000 and s["n_users"] == 4 and s["seed"] == 9
        assert s["mean_discard_rate"] == pytest.approx(np.mean(discard_rate(log)))
        assert len(s["per_user_aop"]) == 4


class TestPercentiles:
    def test_nearest_rank_examples(self):
        v = np.array([15, 20, 35, 40, 50])
        assert nearest_rank(v, 5) == 15
        assert nearest_rank(v, 30) == 20
        assert nearest_rank(v, 40) == 20
        assert nearest_rank(v, 50) == 35
        assert nearest_rank(v, 100) == 50
        assert nearest_rank(v, 0) == 15

    def test_quartiles_of_a_ramp(self):
        v = np.arange(100)
        assert [nearest_rank(v, q) for q in (25, 50, 75)] == [24, 49, 74]

    def test_nearest_rank_is_a_data_value(self):
        v = np.sort(np.random.default_rng(0).integers(0, 50, size=101))
        for pct in (10, 25, 50, 75, 90):
            assert nearest_rank(v, pct) in v

    def test_rejects_bad_input(self):
        with pytest.raises(ValueError):
            nearest_rank(np.array([]), 50)
        with pytest.raises(ValueError):
            nearest_rank(np.array([1.0]), 101)

    def test_box_stats_whiskers_clip_to_data(self):
        data = [1, 2, 3, 4, 5, 6, 7, 8, 100]
        b = box_stats(data)
        assert (b.p25, b.p50, b.p75) == (3, 5, 7)
        assert b.whisker_low == 1
        assert b.whisker_high == 8
        assert b.mean == pytest.approx(136 / 9)

    def test_constant_series(self):
        assert box_stats([4, 4, 4]) == BoxStats(4, 4, 4, 4, 4, 4)

    def test_per_column(self):
        series = np.column_stack([np.arange(10), 10 * np.arange(10)])
        stats = percentile_stats(series)
        assert [s.p75 for s in stats] == [7, 70]


class TestLogShape:
    def test_allocate_and_check(self):
        log = MetricsLog.allocate(3, 0.3, 10, 0, "x")
        log.check_shapes()
        log.aop = np.zeros((10, 2))
        with pytest.raises(ValueError):
            log.check_shapes()
