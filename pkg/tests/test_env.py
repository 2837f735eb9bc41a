import numpy as np
import pytest

from urllc_la.channel import RicianParams, dbm_to_watt, linear_to_db
from urllc_la.env import (LOG_COLUMNS, EpisodeMetrics, SchedulingViolation, TdmaEnv,
                          check_frame_constraints)
from urllc_la.phy import ideal_rate, quantize_cqi
from urllc_la.policies import IdealPolicy, Policy


def make_env(K=4, seed=0, **kw):
    return TdmaEnv(n_devices=K, rician=RicianParams(rho=0.9),
                   tx_power_w=float(dbm_to_watt(35.0)),
                   noise_w=float(dbm_to_watt(-105.0)) * 3e5, seed=seed, **kw)


class FixedRate(Policy):
    """Serves devices in index order at a constant rate."""

    def __init__(self, rate=0.0):
        self.rate = rate

    def select(self, obs):
        return int(np.flatnonzero(~obs.served)[0]), self.rate


class TrueSnrRate(Policy):
    """Cheats with the true SNR of the current slot; serves in index order."""

    needs_oracle = True

    def select(self, obs):
        k = int(np.flatnonzero(~obs.served)[0])
        return k, ideal_rate(obs.frame_snr[0, k], self.fbl_.bler_threshold,
                             self.fbl_.blocklength)


class Repeater(Policy):
    def select(self, obs):
        return 0, 1.0


def test_zero_rate_policy():
    m = make_env().run_episode(FixedRate(0.0), frames=10)
    assert m.sum_rate == 0.0 and m.exceeded_count == 0 and m.nack_count == 0
    assert m.slots == 40


def test_true_snr_rate_never_exceeds():
    m = make_env().run_episode(TrueSnrRate(), frames=25)
    assert m.exceeded_count == 0
    assert m.avg_bler == pytest.approx(1e-3, rel=1e-6)


def test_ideal_oracle_dominates_fixed_order_oracle():
    a = make_env(seed=3).run_episode(IdealPolicy(), frames=25)
    b = make_env(seed=3).run_episode(TrueSnrRate(), frames=25)
    assert a.sum_rate >= b.sum_rate - 1e-12


def test_serving_a_device_twice_is_fatal():
    with pytest.raises(SchedulingViolation):
        make_env().run_episode(Repeater(), frames=1)


def test_single_device_forced():
    m = make_env(K=1).run_episode(FixedRate(0.5), frames=20)
    assert {r["device"] for r in m.records} == {0}


def test_frames_must_be_positive():
    with pytest.raises(ValueError):
        make_env().run_episode(FixedRate(), frames=0)


def test_record_schema_and_frame_layout():
    m = make_env().run_episode(FixedRate(1.0), frames=5)
    assert all(tuple(r) == LOG_COLUMNS for r in m.records)
    assert [r["slot_in_frame"] for r in m.records[:8]] == [0, 1, 2, 3, 0, 1, 2, 3]
    assert check_frame_constraints(m.records, 4)


def test_sum_rate_recomputed_from_log():
    m = make_env(seed=2).run_episode(IdealPolicy(), frames=20)
    from_log = sum(r["rate"] for r in m.records if r["feedback"] == "ACK") / m.frames
    assert abs(from_log - m.sum_rate) <= 1e-12
    assert m.exceeded_count <= m.slots


def test_metrics_additive_over_concatenation():
    env = make_env(seed=4)
    pol = IdealPolicy()
    a = env.run_episode(pol, frames=7)
    b = env.run_episode(pol, frames=5)
    merged = a.merge(b)
    assert merged.frames == 12 and merged.slots == 48
    assert merged.rate_total == pytest.approx(a.rate_total + b.rate_total)
    assert merged.sum_rate == pytest.approx((a.rate_total + b.rate_total) / 12)


def test_episode_metrics_empty():
    m = EpisodeMetrics(frames=0)
    assert m.sum_rate == 0.0 and m.avg_bler == 0.0


def test_deterministic_log():
    logs = [make_env(seed=9).run_episode(IdealPolicy(), frames=100).records for _ in range(2)]
    assert logs[0] == logs[1]


def test_cqi_is_one_slot_stale():
    env = make_env(seed=5)
    env.true_snr(10)
    expected = [quantize_cqi(x, env.codec) for x in linear_to_db(env.true_snr(6))]
    np.testing.assert_array_equal(env.cqi_at(7), expected)
    assert env.cqi_history(7, 3).shape == (4, 3)


def test_violation_detector():
    recs = [{"episode": 0, "frame": 0, "slot_in_frame": i, "device": d}
            for i, d in enumerate([0, 1, 1, 3])]
    with pytest.raises(SchedulingViolation):
        check_frame_constraints(recs, 4)
    recs = [{"episode": 0, "frame": 0, "slot_in_frame": 0, "device": d} for d in (0, 1)]
    with pytest.raises(SchedulingViolation):
        check_frame_constraints(recs, 4)
