"""Scheduling/rate policies with an estimator-style interface.

Every policy exposes ``select(obs) -> (device, rate)`` and
``observe(...)``; learning ones are trained with ``fit(env, epochs)``.
Hyper-parameters live in ``__init__`` (so ``get_params``/``set_params`` and
``clone`` work); anything learned is created lazily with a trailing
underscore once the policy is bound to an environment.
"""

from __future__ import annotations

import itertools

import numpy as np
from sklearn.base import BaseEstimator

from .channel import db_to_linear
from .gp import (GaussianProcessSurrogate, SurrogateDataset, maximize_ei_over_rate,
                 select_rate_ei)
from .nn import Adam, Mlp
from .phy import ACK, dequantize_cqi, floor_rate, ideal_rate
from .td3 import (ReplayBuffers, Td3Agent, Transition, _Ring, build_state, cqi_rate_features,
                  last_rate_from_state, served_from_state, state_dim)


class Policy(BaseEstimator):
    """Base class; subclasses override :meth:`select` and optionally :meth:`observe`."""

    uses_olla = False
    olla_step = 0.09
    needs_oracle = False

    def start_episode(self, env):
        if not getattr(self, "bound_", False):
            self.bind(env)
            self.bound_ = True

    def bind(self, env):
        self.n_devices_ = env.K
        self.fbl_ = env.fbl
        self.codec_ = env.codec
        self.tau_ = env.tau
        self.r_max_ = env.r_max
        self.mcs_table_ = env.mcs_table
        self.cqi_values_ = cqi_rate_features(env.codec, env.fbl, env.r_max)

    def select(self, obs):
        raise NotImplementedError

    def observe(self, obs, device, rate, outcome, reward, next_obs, training):
        pass

    def predict(self, obs):
        return self.select(obs)

    def fit(self, env, epochs: int = 1, frames_per_epoch: int = 100, callback=None):
        """Run ``epochs`` training episodes on ``env``; per-epoch metrics kept in
        ``training_curve_``."""
        self.start_episode(env)
        self.plan(epochs * frames_per_epoch * env.K)
        self.training_curve_ = []
        for epoch in range(epochs):
            m = env.run_episode(self, frames_per_epoch, training=True,
                                keep_records=callback is not None)
            self.training_curve_.append(m)
            if callback is not None:
                callback(epoch, m)
        return self

    def plan(self, total_slots: int):
        pass


def unserved(obs) -> np.ndarray:
    return np.flatnonzero(~obs.served)


class IdealPolicy(Policy):
    """Exhaustive search over the serving order of the rest of the frame,
    with perfect knowledge of the true SNR in every remaining slot."""

    needs_oracle = True

    def _rate(self, snr):
        r = ideal_rate(snr, self.fbl_.bler_threshold, self.fbl_.blocklength)
        if self.mcs_table_ is not None:
            return floor_rate(r, self.mcs_table_)[1]
        return r

    def select(self, obs):
        free = unserved(obs)
        snr = obs.frame_snr
        table = np.array([[self._rate(snr[j, k]) for k in range(snr.shape[1])]
                          for j in range(len(free))])
        best, best_val = None, -np.inf
        for order in itertools.permutations(free):
            val = sum(table[j, k] for j, k in enumerate(order))
            if val > best_val + 1e-12:
                best, best_val = order, val
        k = int(best[0])
        return k, float(table[0, k])


class UcbArms:
    """UCB1 over devices restricted to the unserved ones."""

    def __init__(self, n_arms, c=np.sqrt(2.0)):
        self.c = c
        self.counts = np.zeros(n_arms)
        self.means = np.zeros(n_arms)

    def choose(self, available) -> int:
        available = np.asarray(available)
        untried = available[self.counts[available] == 0]
        if untried.size:
            return int(untried[0])
        total = self.counts.sum()
        ucb = self.means[available] + self.c * np.sqrt(np.log(total) / self.counts[available])
        return int(available[np.argmax(ucb)])

    def update(self, arm, reward):
        self.counts[arm] += 1
        self.means[arm] += (reward - self.means[arm]) / self.counts[arm]


class OllaCmabPolicy(Policy):
    """UCB1 device choice; rate from the latest CQI corrected by OLLA."""

    uses_olla = True

    def __init__(self, olla_step=0.01, ucb_c=np.sqrt(2.0)):
        self.olla_step = olla_step
        self.ucb_c = ucb_c

    def bind(self, env):
        super().bind(env)
        self.arms_ = UcbArms(env.K, self.ucb_c)

    def select(self, obs):
        k = self.arms_.choose(unserved(obs))
        snr_db = dequantize_cqi(int(obs.cqi_history[k, -1]), self.codec_)
        rate = ideal_rate(db_to_linear(snr_db), self.fbl_.bler_threshold, self.fbl_.blocklength)
        return k, float(rate)

    def observe(self, obs, device, rate, outcome, reward, next_obs, training):
        achieved = outcome.rate if outcome.feedback == ACK else 0.0
        self.arms_.update(device, achieved / self.r_max_)


class BoCmabPolicy(Policy):
    """UCB1 device choice; per-device GP-BO over the rate.

    The GP input is ``[rate, cqi_rate]`` where ``cqi_rate`` is the rate implied
    by the device's latest CQI (dropped when ``use_cqi`` is off), and the
    target is the same achieved rate the UCB arms are scored with. EI is taken
    against the best posterior mean on the current CQI slice.
    """

    def __init__(self, ucb_c=np.sqrt(2.0), capacity=128, noise_variance=0.1,
                 length_scale=1.0, grid_size=64, use_cqi=True):
        self.ucb_c = ucb_c
        self.capacity = capacity
        self.noise_variance = noise_variance
        self.length_scale = length_scale
        self.grid_size = grid_size
        self.use_cqi = use_cqi

    def bind(self, env):
        super().bind(env)
        self.arms_ = UcbArms(env.K, self.ucb_c)
        dim = 2 if self.use_cqi else 1
        self.data_ = [SurrogateDataset(dim, self.capacity) for _ in range(env.K)]
        self.gp_ = GaussianProcessSurrogate(length_scale=self.length_scale,
                                            noise_variance=self.noise_variance)

    def _context(self, obs, k) -> np.ndarray:
        if not self.use_cqi:
            return np.empty(0)
        return np.array([self.cqi_values_[int(obs.cqi_history[k, -1])]])

    def select(self, obs):
        k = self.arms_.choose(unserved(obs))
        data = self.data_[k]
        ctx = self._context(obs, k)
        if len(data) == 0:
            return k, select_rate_ei(self.gp_, data, ctx, None, self.r_max_,
                                     grid_size=self.grid_size)
        self.gp_.fit(data.X, data.y)
        grid = self.r_max_ * np.arange(1, self.grid_size + 1) / self.grid_size
        mean = self.gp_.rate_slice(ctx[None, :])(grid[None, :])[0]
        rates, _ = maximize_ei_over_rate(self.gp_, ctx[None, :], float(mean.max()),
                                         self.r_max_, grid_size=self.grid_size)
        return k, float(rates[0])

    def observe(self, obs, device, rate, outcome, reward, next_obs, training):
        achieved = outcome.rate if outcome.feedback == ACK else 0.0
        self.data_[device].add([outcome.rate, *self._context(obs, device)], achieved)
        self.arms_.update(device, achieved / self.r_max_)


class _EpsilonSchedule:
    def __init__(self, start, end, fraction):
        self.start, self.end, self.fraction = start, end, fraction
        self.horizon = 1

    def __call__(self, step):
        frac = min(step / max(self.fraction * self.horizon, 1.0), 1.0)
        return self.start + (self.end - self.start) * frac


class Td3Policy(Policy):
    """The BO-assisted TD3 scheduler with OLLA correction at execution time."""

    _training = False

    @property
    def uses_olla(self):
        # OLLA belongs to the execution phase; exploratory NACKs during
        # training would otherwise drive the offset to its floor
        return not self._training

    def __init__(self, hidden=(128, 128, 128), lr=1e-3, discount=0.99, polyak=0.5,
                 target_period=400, nack_period=5, batch_size=64, policy_delay=2,
                 delta_max=1.0, epsilon_start=0.5, epsilon_end=0.01, explore_fraction=0.5,
                 smoothing=True, use_bo=True, bo_batch=8, zeta_start=0.3, zeta_end=0.05,
                 olla_step=0.09, train_every=1, warmup_slots=1000, seed=0):
        self.hidden = hidden
        self.lr = lr
        self.discount = discount
        self.polyak = polyak
        self.target_period = target_period
        self.nack_period = nack_period
        self.batch_size = batch_size
        self.policy_delay = policy_delay
        self.delta_max = delta_max
        self.epsilon_start = epsilon_start
        self.epsilon_end = epsilon_end
        self.explore_fraction = explore_fraction
        self.smoothing = smoothing
        self.use_bo = use_bo
        self.bo_batch = bo_batch
        self.zeta_start = zeta_start
        self.zeta_end = zeta_end
        self.olla_step = olla_step
        self.train_every = train_every
        self.warmup_slots = warmup_slots
        self.seed = seed

    def bind(self, env):
        super().bind(env)
        self.rng_ = np.random.default_rng(self.seed)
        self.agent_ = Td3Agent(env.K, env.tau, env.r_max, hidden=self.hidden, lr=self.lr,
                               discount=self.discount, polyak=self.polyak,
                               target_period=self.target_period,
                               policy_delay=self.policy_delay, delta_max=self.delta_max,
                               smoothing=self.smoothing, use_bo=self.use_bo,
                               bo_batch=self.bo_batch, rng=self.rng_)
        self.buffers_ = ReplayBuffers(self.agent_.sdim, nack_period=self.nack_period,
                                      batch=self.batch_size)
        self.epsilon_ = _EpsilonSchedule(self.epsilon_start, self.epsilon_end,
                                         self.explore_fraction)
        self.step_ = 0

    def plan(self, total_slots):
        self.epsilon_.horizon = total_slots

    def state_of(self, obs):
        return build_state(obs.cqi_history, obs.last_feedback, obs.last_rate, obs.olla_delta,
                           obs.served, self.tau_, self.codec_.levels, self.r_max_,
                           self.cqi_values_)

    def _epsilon(self):
        if not self._training:
            return 0.0
        return 1.0 if self.step_ < self.warmup_slots else self.epsilon_(self.step_)

    def select(self, obs):
        s = self.state_of(obs)
        device, rate, _ = self.agent_.act(s, self._epsilon(), self.rng_)
        return device, rate

    def observe(self, obs, device, rate, outcome, reward, next_obs, training):
        if not training:
            return
        tr = Transition(self.state_of(obs), device, rate, reward, self.state_of(next_obs),
                        outcome.feedback)
        self.buffers_.push(tr)
        if self.agent_.gexp is not None and self.epsilon_.horizon > 1:
            frac = min(self.step_ / self.epsilon_.horizon, 1.0)
            self.agent_.gexp.bandit.exploration = (
                self.zeta_start + (self.zeta_end - self.zeta_start) * frac)
        if self.step_ % self.train_every == 0:
            batch = self.buffers_.sample(self.step_, self.rng_)
            if batch is not None:
                self.agent_.train_step(batch, self.rng_,
                                       update_actor=self.step_ >= self.warmup_slots)
        self.step_ += 1
        if self.step_ % self.target_period == 0:
            self.agent_.soft_update()

    def fit(self, env, epochs=1, frames_per_epoch=100, callback=None):
        self._training = True
        try:
            return super().fit(env, epochs, frames_per_epoch, callback)
        finally:
            self._training = False


class DqnPolicy(Policy):
    """Single (non-layered) DQN over ``device x rate-increment`` actions."""

    _training = False

    def __init__(self, hidden=(128, 128, 128), lr=1e-3, discount=0.99, n_increments=9,
                 delta_max=1.0, batch_size=64, target_period=400, epsilon_start=0.5,
                 epsilon_end=0.01, explore_fraction=0.5, buffer_size=50_000, seed=0):
        self.hidden = hidden
        self.lr = lr
        self.discount = discount
        self.n_increments = n_increments
        self.delta_max = delta_max
        self.batch_size = batch_size
        self.target_period = target_period
        self.epsilon_start = epsilon_start
        self.epsilon_end = epsilon_end
        self.explore_fraction = explore_fraction
        self.buffer_size = buffer_size
        self.seed = seed

    def bind(self, env):
        super().bind(env)
        self.rng_ = np.random.default_rng(self.seed)
        self.sdim_ = state_dim(env.K, env.tau)
        self.increments_ = np.linspace(-self.delta_max, self.delta_max, self.n_increments)
        n_out = env.K * self.n_increments
        self.q_ = Mlp([self.sdim_, *self.hidden, n_out], rng=self.rng_, output_scale=0.1)
        self.q_t_ = self.q_.copy()
        self.opt_ = Adam(self.q_, self.lr)
        self.buffer_ = _Ring(self.buffer_size, self.sdim_)
        self.epsilon_ = _EpsilonSchedule(self.epsilon_start, self.epsilon_end,
                                         self.explore_fraction)
        self.step_ = 0

    def plan(self, total_slots):
        self.epsilon_.horizon = total_slots

    def state_of(self, obs):
        return build_state(obs.cqi_history, obs.last_feedback, obs.last_rate, obs.olla_delta,
                           obs.served, self.tau_, self.codec_.levels, self.r_max_,
                           self.cqi_values_)

    def _valid(self, states):
        served = served_from_state(states, self.n_devices_)
        return np.repeat(~served, self.n_increments, axis=1)

    def greedy(self, states, net=None):
        net = net or self.q_
        q = net.forward(np.atleast_2d(states))
        q = np.where(self._valid(states), q, -np.inf)
        return np.argmax(q, axis=1), q

    def action_to_rate(self, state, action):
        k, l = divmod(int(action), self.n_increments)
        last = last_rate_from_state(state, self.n_devices_, self.tau_, self.r_max_)[0, k]
        return k, float(np.clip(last + self.increments_[l], 0.0, self.r_max_))

    def act(self, state, epsilon):
        valid = np.flatnonzero(self._valid(state)[0])
        if self.rng_.random() < epsilon:
            return int(self.rng_.choice(valid))
        return int(self.greedy(state)[0][0])

    def select(self, obs):
        s = self.state_of(obs)
        eps = self.epsilon_(self.step_) if self._training else 0.0
        self.last_action_ = self.act(s, eps)
        return self.action_to_rate(s, self.last_action_)

    def targets(self, rewards, next_states):
        _, q = self.greedy(next_states, self.q_t_)
        return rewards + self.discount * q.max(axis=1)

    def observe(self, obs, device, rate, outcome, reward, next_obs, training):
        if not training:
            return
        self.buffer_.push(Transition(self.state_of(obs), self.last_action_, rate, reward,
                                     self.state_of(next_obs), outcome.feedback))
        if self.buffer_.size >= self.batch_size:
            idx = self.rng_.integers(0, self.buffer_.size, self.batch_size)
            b = self.buffer_.take(idx)
            y = self.targets(b["r"], b["s2"])
            q, cache = self.q_.forward(b["s"], return_cache=True)
            rows = np.arange(self.batch_size)
            g = np.zeros_like(q)
            g[rows, b["dev"]] = 2.0 * (q[rows, b["dev"]] - y) / self.batch_size
            grads, _ = self.q_.backward(cache, g)
            self.opt_.step(self.q_, grads)
        self.step_ += 1
        if self.step_ % self.target_period == 0:
            self.q_t_ = self.q_.copy()

    def fit(self, env, epochs=1, frames_per_epoch=100, callback=None):
        self._training = True
        try:
            return super().fit(env, epochs, frames_per_epoch, callback)
        finally:
            self._training = False


SCHEMES = {
    "ideal": IdealPolicy,
    "proposed": Td3Policy,
    "dqn": DqnPolicy,
    "bo-cmab": BoCmabPolicy,
    "olla-cmab": OllaCmabPolicy,
}
