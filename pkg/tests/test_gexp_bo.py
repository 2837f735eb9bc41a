import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from urllc_la.gexp_bo import (LOG_RENORM, GexpBo, GexpState, device_probabilities,
                              select_device, update_bandit)

masks = st.lists(st.booleans(), min_size=4, max_size=4).filter(lambda m: not all(m))


@given(masks, st.lists(st.floats(-3, 3), min_size=4, max_size=4),
       st.lists(st.floats(-5, 5), min_size=4, max_size=4))
def test_probabilities_form_a_distribution(served, scores, log_w):
    state = GexpState(4, log_weights=np.array(log_w), preferences=np.ones(4))
    p = device_probabilities(state, scores, served)
    assert p.sum() == pytest.approx(1.0)
    assert np.all(p[np.array(served)] == 0.0)
    assert np.all(p[~np.array(served)] > 0.0)


def test_uniform_start():
    p = device_probabilities(GexpState(4), np.zeros(4), np.zeros(4, bool))
    np.testing.assert_allclose(p, 0.25)


def test_all_served_rejected():
    with pytest.raises(ValueError):
        device_probabilities(GexpState(2), np.zeros(2), np.ones(2, bool))


def test_masked_devices_never_drawn():
    rng = np.random.default_rng(0)
    state = GexpState(4)
    served = np.array([True, False, True, False])
    picks = {select_device(state, np.zeros(4), served, rng)[0] for _ in range(300)}
    assert picks <= {1, 3}


def test_renormalisation_keeps_law():
    state = GexpState(3, log_weights=np.array([LOG_RENORM - 0.01, 0.0, 1.0]))
    before = device_probabilities(state, np.zeros(3), np.zeros(3, bool))
    update_bandit(state, 0, 1.0, np.array([0.5, 0.25, 0.25]))
    assert state.log_weights.max() <= LOG_RENORM
    # renormalisation is a pure shift, so another shift-equal state gives the same law
    shifted = GexpState(3, log_weights=state.log_weights + 3.0, preferences=state.preferences)
    np.testing.assert_allclose(device_probabilities(state, np.zeros(3), np.zeros(3, bool)),
                               device_probabilities(shifted, np.zeros(3), np.zeros(3, bool)))
    assert before.shape == (3,)


def test_update_moves_toward_rewarded_arm():
    state = GexpState(3)
    p = device_probabilities(state, np.ones(3), np.zeros(3, bool))
    update_bandit(state, 1, 2.0, p)
    q = device_probabilities(state, np.ones(3), np.zeros(3, bool))
    assert q[1] > p[1]
    with pytest.raises(ValueError):
        update_bandit(state, 0, 1.0, np.array([0.0, 0.5, 0.5]))


def best_arm_frequency(seed, rounds=5000, tail=1000):
    rng = np.random.default_rng(seed)
    state = GexpState(4)
    means = np.array([1.0, 0.5, 0.5, 0.5])
    free = np.zeros(4, bool)
    picks = np.empty(rounds, dtype=int)
    for t in range(rounds):
        k, p = select_device(state, np.ones(4), free, rng)
        update_bandit(state, k, means[k] + 0.1 * rng.standard_normal(), p)
        picks[t] = k
    return float(np.mean(picks[-tail:] == 0))


def test_stationary_bandit_identifies_best_arm():
    assert np.mean([best_arm_frequency(s, rounds=2000, tail=500) for s in range(3)]) > 0.8


def quadratic_critics(states, devices, rates):
    # peak at rate 1 + state[0], device 2 slightly preferred
    q = -(rates - 1.0 - states[:, 0]) ** 2 + 0.1 * (devices == 2)
    return q, q + 0.05


def test_step_batch_shapes_and_dataset_growth():
    bo = GexpBo(4, state_dim=2, r_max=4.0)
    rng = np.random.default_rng(0)
    states = rng.uniform(0, 1, (5, 2))
    served = np.zeros((5, 4), bool)
    served[:, 0] = True
    d, r, q = bo.step_batch(states, np.full((5, 4), 0.25), served, quadratic_critics, rng)
    assert d.shape == r.shape == q.shape == (5,)
    assert np.all(d != 0)
    assert len(bo.data) == 5
    np.testing.assert_allclose(q, quadratic_critics(states, d, r)[0])  # min of the pair


def test_first_proposal_is_grid_midpoint():
    bo = GexpBo(2, state_dim=1, r_max=4.0, grid_size=64)
    np.testing.assert_allclose(bo.propose_rates(np.zeros((3, 1))), 2.0)


def test_rate_search_converges_on_fixed_state():
    bo = GexpBo(2, state_dim=1, r_max=4.0, noise_variance=1e-4)
    rng = np.random.default_rng(1)
    state = np.array([[0.5]])
    for _ in range(40):
        bo.optimize_step(state, np.ones((1, 2)), np.zeros((1, 2), bool), quadratic_critics, rng)
    best = bo.data.X[np.argmax(bo.data.y), 0]
    assert abs(best - 1.5) < 0.1


def test_invalid_bandit_parameters():
    with pytest.raises(ValueError):
        GexpState(3, exploration=0.0)
    with pytest.raises(ValueError):
        GexpState(3, implicit_exploration=0.0)
