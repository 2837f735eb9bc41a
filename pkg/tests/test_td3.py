import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from urllc_la.phy import ACK, NACK, CqiCodec, FblParams
from urllc_la.td3 import (ReplayBuffers, Td3Agent, Transition, block_size, build_state,
                          cqi_rate_features, last_rate_from_state, reward, sample_batch,
                          served_from_state, soft_update, state_dim)

K, TAU = 4, 12


def random_state(rng, served=None):
    served = rng.random(K) < 0.5 if served is None else np.asarray(served)
    if served.all():
        served[0] = False
    return build_state(rng.integers(0, 16, (K, TAU + 1)), rng.choice([-1.0, 1.0], K),
                       rng.uniform(0, 4, K), rng.uniform(-1, 0.5, K), served, TAU)


class TestReward:
    def test_values(self):
        assert reward(1.5, ACK, 0.3) == 5.5
        assert reward(1.5, NACK, 0.3) == pytest.approx(0.45)
        with pytest.raises(ValueError):
            reward(1.0, NACK, 1.5)

    @given(st.floats(0, 4), st.floats(0, 4), st.floats(0, 1))
    def test_failure_never_beats_success(self, r_fail, r_ok, frac):
        # holds for beta=4 at every rate up to r_max=4
        assert reward(r_fail, NACK, frac, 4.0) <= reward(r_ok, ACK, frac, 4.0)

    def test_beta_margin_sweep(self):
        # beta = r_max * ack_fraction is the boundary: ties only at a zero-rate success
        rates = np.linspace(0.0, 4.0, 401)
        worst_fail = max(reward(r, NACK, 1.0) for r in rates)
        assert worst_fail <= 4.0 <= min(reward(r, ACK, 1.0) for r in rates)
        assert worst_fail < min(reward(r, ACK, 1.0) for r in rates[1:])


class TestState:
    def test_dimensions(self):
        assert block_size(TAU) == TAU + 4
        assert state_dim(K, TAU) == K * (TAU + 4) + K
        s = random_state(np.random.default_rng(0))
        assert s.shape == (state_dim(K, TAU),)

    def test_served_blocks_zeroed_and_mask(self):
        rng = np.random.default_rng(1)
        served = np.array([True, False, True, False])
        s = random_state(rng, served)
        blocks = s[: K * block_size(TAU)].reshape(K, -1)
        assert np.all(blocks[served] == 0)
        np.testing.assert_array_equal(served_from_state(s, K)[0], served)

    def test_last_rate_recovered(self):
        rates = np.array([0.5, 1.0, 2.0, 3.5])
        s = build_state(np.zeros((K, TAU + 1)), np.zeros(K), rates, np.zeros(K),
                        np.zeros(K, bool), TAU, r_max=4.0)
        np.testing.assert_allclose(last_rate_from_state(s, K, TAU, 4.0)[0], rates)

    def test_short_history_padded(self):
        s = build_state(np.full((K, 3), 5), np.zeros(K), np.zeros(K), np.zeros(K),
                        np.zeros(K, bool), TAU)
        blocks = s[: K * block_size(TAU)].reshape(K, -1)
        np.testing.assert_allclose(blocks[:, : TAU + 1], 5 / 15)

    def test_cqi_rate_features_monotone(self):
        f = cqi_rate_features(CqiCodec(), FblParams(), 4.0)
        assert f.shape == (16,) and np.all(np.diff(f) > 0) and f[0] > 0.0


class TestBuffers:
    def transition(self, fb, i=0):
        return Transition(np.full(5, float(i)), 0, 1.0, 1.0, np.zeros(5), fb)

    def test_routing(self):
        buf = ReplayBuffers(5, batch=4)
        buf.push(self.transition(ACK))
        buf.push(self.transition(NACK))
        assert (buf.ack.size, buf.nack.size) == (1, 1)

    def test_nack_only_batches_on_period(self):
        rng = np.random.default_rng(0)
        buf = ReplayBuffers(5, nack_period=5, batch=4)
        for i in range(10):
            buf.push(self.transition(ACK, i))
        buf.push(self.transition(NACK, 99))
        b = sample_batch(buf, 10, rng)
        assert np.all(b["fb"] == NACK)
        b = buf.sample(11, rng)
        assert np.all(b["fb"] == ACK)
        # the second half is the most recent ACK entries, oldest first
        np.testing.assert_array_equal(b["s"][2:, 0], [8, 9])

    def test_not_enough_data(self):
        buf = ReplayBuffers(5, batch=4)
        buf.push(self.transition(ACK))
        assert buf.sample(1, np.random.default_rng(0)) is None

    def test_ring_overwrites_oldest(self):
        buf = ReplayBuffers(5, ack_capacity=3, batch=2)
        for i in range(5):
            buf.push(self.transition(ACK, i))
        assert buf.ack.size == 3
        np.testing.assert_array_equal(buf.ack.take(buf.ack.recent(3))["s"][:, 0], [2, 3, 4])

    def test_odd_batch_rejected(self):
        with pytest.raises(ValueError):
            ReplayBuffers(5, batch=3)


def make_agent(**kw):
    kw.setdefault("hidden", (16, 16))
    return Td3Agent(K, TAU, rng=np.random.default_rng(0), **kw)


def fake_batch(rng, n=8):
    s = np.stack([random_state(rng) for _ in range(n)])
    s2 = np.stack([random_state(rng) for _ in range(n)])
    dev = np.array([np.flatnonzero(~served_from_state(x, K)[0])[0] for x in s])
    return {"s": s, "dev": dev, "rate": rng.uniform(0, 4, n), "r": rng.uniform(0, 8, n),
            "s2": s2, "fb": np.zeros(n, int)}


class TestAgent:
    def test_policy_respects_mask_and_bounds(self):
        agent = make_agent()
        rng = np.random.default_rng(3)
        states = np.stack([random_state(rng) for _ in range(50)])
        devices, rates, inc, _ = agent.policy(states)
        served = served_from_state(states, K)
        assert not served[np.arange(50), devices].any()
        assert np.all((rates >= 0) & (rates <= 4.0))
        assert np.all(np.abs(inc) <= agent.delta_max)

    def test_act_random_and_greedy(self):
        agent = make_agent()
        rng = np.random.default_rng(4)
        s = random_state(rng, [True, True, False, True])
        for eps in (0.0, 1.0):
            for _ in range(20):
                d, r, _ = agent.act(s, eps, rng)
                assert d == 2 and 0.0 <= r <= 4.0
        with pytest.raises(ValueError):
            agent.act(np.zeros(state_dim(K, TAU)), 0.0, rng)  # mask says all served

    def test_targets_formula_without_bo(self):
        agent = make_agent(use_bo=False, smoothing=False, discount=0.9)
        batch = fake_batch(np.random.default_rng(5))
        y, q_ac = agent.targets(batch)
        d, r, _, _ = agent.policy(batch["s2"], agent.actor_t)
        q1, q2 = agent.twin_q(batch["s2"], d, r)
        np.testing.assert_allclose(q_ac, np.minimum(q1, q2))
        np.testing.assert_allclose(y, batch["r"] + 0.9 * q_ac)

    def test_bo_target_never_below_actor_target(self):
        agent = make_agent(use_bo=True, bo_batch=8, smoothing=False)
        batch = fake_batch(np.random.default_rng(6))
        y, q_ac = agent.targets(batch, np.random.default_rng(0))
        assert np.all(y >= batch["r"] + agent.discount * q_ac - 1e-12)

    def test_train_step_reduces_critic_loss(self):
        agent = make_agent(use_bo=False, discount=0.0)
        rng = np.random.default_rng(7)
        batch = fake_batch(rng, 32)
        first = agent.train_step(batch, rng)["critic_loss"]
        for _ in range(300):
            last = agent.train_step(batch, rng)["critic_loss"]
        assert last < 0.5 * first

    def test_value_level_initialisation(self):
        agent = make_agent(use_bo=False, discount=0.5)
        batch = fake_batch(np.random.default_rng(8))
        agent.train_step(batch)
        assert agent.value_initialised

    def test_soft_update_helper(self):
        agent = make_agent()
        for p in agent.actor.params:
            p += 1.0
        before = [p.copy() for p in agent.actor_t.params]
        soft_update([agent.actor], [agent.actor_t], 0.5)
        for b, t in zip(before, agent.actor_t.params):
            np.testing.assert_allclose(t, b + 0.5)

    @pytest.mark.parametrize("device_block", [True, False])
    def test_critic_gradient_matches_finite_differences(self, device_block):
        agent = make_agent(device_block=device_block)
        rng = np.random.default_rng(4)
        s = np.stack([random_state(rng) for _ in range(3)])
        probs = rng.dirichlet(np.ones(K), 3)
        rates = rng.uniform(0.5, 3.5, 3)

        def loss(p, r):
            return -agent.critic1.forward(agent._critic_input(s, p, r)).mean()

        g_dev, g_rate = agent._critic_grad(s, probs, rates)
        h = 1e-6
        for b in range(3):
            for k in range(K):
                d = np.zeros_like(probs)
                d[b, k] = h
                fd = (loss(probs + d, rates) - loss(probs - d, rates)) / (2 * h)
                assert g_dev[b, k] == pytest.approx(fd, rel=1e-5, abs=1e-9)
            d = np.zeros(3)
            d[b] = h
            fd = (loss(probs, rates + d) - loss(probs, rates - d)) / (2 * h)
            assert g_rate[b] == pytest.approx(fd, rel=1e-5, abs=1e-9)

    def test_state_dict_round_trip(self):
        a = make_agent()
        b = make_agent(hidden=(16, 16))
        for p in b.actor.params:
            p += 3.0
        b.load_state_dict(a.state_dict())
        s = random_state(np.random.default_rng(9))
        np.testing.assert_array_equal(a.actor.forward(s), b.actor.forward(s))
        np.testing.assert_array_equal(a.critic2_t.forward(a._critic_input(s[None, :], np.eye(K)[:1], np.zeros(1))),
                                      b.critic2_t.forward(a._critic_input(s[None, :], np.eye(K)[:1], np.zeros(1))))
