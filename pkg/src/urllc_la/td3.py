"""TD3 agent for joint device scheduling and rate selection.

The actor emits one score per device plus a rate increment; the critics
score ``(state, device one-hot, absolute rate)``. During training the
bootstrap target takes the better of the target actor's action and a
GEXP-BO proposal, both evaluated by the minimum of the twin target critics.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .gexp_bo import GexpBo
from .nn import Adam, Mlp
from .phy import ACK

log = logging.getLogger(__name__)


def block_size(tau: int) -> int:
    """Per-device state width: ``tau + 1`` CQI values, feedback, last rate, offset."""
    return tau + 4


def state_dim(n_devices: int, tau: int) -> int:
    return n_devices * block_size(tau) + n_devices


def build_state(history, feedback, last_rate, olla_delta, served, tau: int,
                cqi_levels: int = 16, r_max: float = 4.0, cqi_values=None) -> np.ndarray:
    """Flatten the observation into the agent's fixed-length state.

    Parameters
    ----------
    history : array (K, depth)
        Reported CQI indices per device, most recent last. Shorter histories
        are left-padded with the oldest available value.
    feedback : array (K,)
        +1 for a last ACK, -1 for a last NACK, 0 if never served.
    last_rate, olla_delta : array (K,)
    served : bool array (K,)
        Devices already served in this frame; their blocks are zeroed.
    cqi_values : array (cqi_levels,), optional
        Feature used for each CQI index; defaults to ``cqi / (levels - 1)``.

    The result is ``[block_1, ..., block_K, mask]`` with ``mask = 1`` for
    unserved devices.
    """
    history = np.atleast_2d(np.asarray(history, dtype=float))
    K, depth = history.shape
    need = tau + 1
    if depth < need:
        log.debug("CQI history of depth %d padded to %d", depth, need)
        pad = np.repeat(history[:, :1], need - depth, axis=1)
        history = np.concatenate([pad, history], axis=1)
    if cqi_values is None:
        cqi = history[:, -need:] / max(cqi_levels - 1, 1)
    else:
        cqi = np.asarray(cqi_values, dtype=float)[history[:, -need:].astype(int)]
    blocks = np.column_stack([cqi, np.asarray(feedback, dtype=float),
                              np.asarray(last_rate, dtype=float) / r_max,
                              np.asarray(olla_delta, dtype=float)])
    mask = 1.0 - np.asarray(served, dtype=float)
    blocks *= mask[:, None]
    return np.concatenate([blocks.ravel(), mask])


def cqi_rate_features(codec, fbl, r_max: float) -> np.ndarray:
    """Rate implied by each CQI index (bin midpoint), in units of ``r_max``.

    A monotone relabelling of the CQI alphabet that puts the reported channel
    on the same scale as the action.
    """
    from .channel import db_to_linear
    from .phy import dequantize_cqi, ideal_rate
    snr = db_to_linear(np.array([dequantize_cqi(c, codec) for c in range(codec.levels)]))
    return np.array([ideal_rate(g, fbl.bler_threshold, fbl.blocklength) for g in snr]) / r_max


def served_from_state(states, n_devices: int) -> np.ndarray:
    return np.atleast_2d(states)[:, -n_devices:] < 0.5


def last_rate_from_state(states, n_devices: int, tau: int, r_max: float) -> np.ndarray:
    """Un-normalised last rate of every device, shape (B, K)."""
    states = np.atleast_2d(states)
    bs = block_size(tau)
    blocks = states[:, : n_devices * bs].reshape(-1, n_devices, bs)
    return blocks[:, :, tau + 2] * r_max


def reward(rate: float, feedback: int, ack_fraction: float, beta: float = 4.0) -> float:
    """``beta + rate`` on ACK, ``ack_fraction * rate`` on NACK."""
    if not 0.0 <= ack_fraction <= 1.0:
        raise ValueError("ack_fraction must lie in [0, 1]")
    return beta + rate if feedback == ACK else ack_fraction * rate


@dataclass
class Transition:
    state: np.ndarray
    device: int
    rate: float
    reward: float
    next_state: np.ndarray
    feedback: int


class _Ring:
    def __init__(self, capacity, sdim):
        self.capacity = capacity
        self.s = np.zeros((capacity, sdim))
        self.s2 = np.zeros((capacity, sdim))
        self.dev = np.zeros(capacity, dtype=int)
        self.rate = np.zeros(capacity)
        self.rew = np.zeros(capacity)
        self.fb = np.zeros(capacity, dtype=int)
        self.next = 0
        self.size = 0

    def push(self, tr: Transition):
        i = self.next
        self.s[i], self.s2[i] = tr.state, tr.next_state
        self.dev[i], self.rate[i], self.rew[i], self.fb[i] = tr.device, tr.rate, tr.reward, tr.feedback
        self.next = (i + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def recent(self, n):
        """Indices of the ``n`` most recent entries, oldest first."""
        return (self.next - n + np.arange(n)) % self.capacity

    def take(self, idx) -> dict:
        return {"s": self.s[idx], "dev": self.dev[idx], "rate": self.rate[idx],
                "r": self.rew[idx], "s2": self.s2[idx], "fb": self.fb[idx]}


class ReplayBuffers:
    """Separate ACK and NACK stores with periodic NACK-only batches.

    Every ``nack_period`` slots (when the NACK store is non-empty) the whole
    batch comes from the NACK store; otherwise half the batch is drawn
    uniformly from the ACK store and the other half is its most recent
    entries.
    """

    def __init__(self, state_dim: int, ack_capacity=50_000, nack_capacity=10_000,
                 nack_period=5, batch=64):
        if batch < 2 or batch % 2:
            raise ValueError("batch must be an even number >= 2")
        self.ack = _Ring(ack_capacity, state_dim)
        self.nack = _Ring(nack_capacity, state_dim)
        self.nack_period = nack_period
        self.batch = batch

    def push(self, tr: Transition):
        (self.ack if tr.feedback == ACK else self.nack).push(tr)

    def sample(self, slot: int, rng: np.random.Generator):
        """A batch dict, or ``None`` when there is not enough data yet."""
        if slot % self.nack_period == 0 and self.nack.size > 0:
            idx = rng.integers(0, self.nack.size, self.batch)
            return self.nack.take(idx)
        half = self.batch // 2
        if self.ack.size < half:
            return None
        rand = rng.integers(0, self.ack.size, half)
        idx = np.concatenate([rand, self.ack.recent(half)])
        return self.ack.take(idx)


def sample_batch(buffers: ReplayBuffers, slot: int, rng):
    return buffers.sample(slot, rng)


def _masked_softmax(scores, served):
    z = np.where(served, -np.inf, scores)
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


class Td3Agent:
    """Actor, twin critics, their targets, optimisers and the GEXP-BO module.

    Parameters are plain attributes; see :class:`urllc_la.policies.Td3Policy`
    for the estimator-style wrapper used by the experiment harness.
    """

    def __init__(self, n_devices, tau, r_max=4.0, hidden=(128, 128, 128), lr=1e-3,
                 discount=0.99, polyak=0.5, target_period=400, policy_delay=2,
                 delta_max=1.0, smoothing=True, smooth_sigma=0.1, smooth_clip=0.25,
                 use_bo=True, bo_batch=8, head_penalty=1e-2, device_block=True,
                 gexp_kwargs=None, rng=None):
        self.K = n_devices
        self.tau = tau
        self.r_max = r_max
        self.discount = discount
        self.polyak = polyak
        self.target_period = target_period
        self.policy_delay = policy_delay
        self.delta_max = delta_max
        self.smoothing = smoothing
        self.smooth_sigma = smooth_sigma
        self.smooth_clip = smooth_clip
        self.use_bo = use_bo
        self.bo_batch = bo_batch
        self.head_penalty = head_penalty
        self.device_block = device_block
        self.rng = rng if rng is not None else np.random.default_rng(0)
        self.sdim = state_dim(n_devices, tau)
        hidden = list(hidden)
        self.actor = Mlp([self.sdim, *hidden, n_devices + 1], rng=self.rng, output_scale=0.1)
        self.bsize = block_size(tau)
        cdim = self.sdim + n_devices + (self.bsize if device_block else 0) + 1
        self.critic1 = Mlp([cdim, *hidden, 1], rng=self.rng)
        self.critic2 = Mlp([cdim, *hidden, 1], rng=self.rng)
        self.actor_t = self.actor.copy()
        self.critic1_t = self.critic1.copy()
        self.critic2_t = self.critic2.copy()
        self.opt_actor = Adam(self.actor, lr)
        self.opt_c1 = Adam(self.critic1, lr)
        self.opt_c2 = Adam(self.critic2, lr)
        self.gexp = GexpBo(n_devices, self.sdim, r_max, **(gexp_kwargs or {})) if use_bo else None
        self.updates = 0
        self.value_initialised = False
        self.last_stats = {}

    # -- action helpers ---------------------------------------------------
    def _blocks(self, states):
        return states[:, : self.K * self.bsize].reshape(-1, self.K, self.bsize)

    def _critic_input(self, states, device_vec, rates):
        """``[state, device weights, (selected device's block), rate / r_max]``.

        The selected block is the device-weighted sum of per-device blocks;
        it hands the critic the served device's own CQI history directly.
        """
        parts = [states, device_vec]
        if self.device_block:
            parts.append(np.einsum("bk,bkf->bf", device_vec, self._blocks(states)))
        parts.append((np.asarray(rates) / self.r_max)[:, None])
        return np.concatenate(parts, axis=1)

    def _onehot(self, devices):
        out = np.zeros((len(devices), self.K))
        out[np.arange(len(devices)), devices] = 1.0
        return out

    def policy(self, states, net=None):
        """Greedy ``(device, absolute rate, rate increment, scores)`` per state."""
        net = net or self.actor
        states = np.atleast_2d(states)
        out = net.forward(states)
        served = served_from_state(states, self.K)
        scores = np.where(served, -np.inf, out[:, : self.K])
        devices = np.argmax(scores, axis=1)
        inc = self.delta_max * np.tanh(out[:, self.K])
        last = last_rate_from_state(states, self.K, self.tau, self.r_max)
        rates = np.clip(last[np.arange(len(devices)), devices] + inc, 0.0, self.r_max)
        return devices, rates, inc, out[:, : self.K]

    def act(self, state, epsilon: float, rng: np.random.Generator):
        """Epsilon-greedy action for a single state: ``(device, rate, increment)``."""
        served = served_from_state(state, self.K)[0]
        if served.all():
            raise ValueError("every device has already been served")
        if rng.random() < epsilon:
            device = int(rng.choice(np.flatnonzero(~served)))
            inc = float(rng.uniform(-self.delta_max, self.delta_max))
            last = last_rate_from_state(state, self.K, self.tau, self.r_max)[0, device]
            return device, float(np.clip(last + inc, 0.0, self.r_max)), inc
        d, r, inc, _ = self.policy(state)
        return int(d[0]), float(r[0]), float(inc[0])

    def twin_q(self, states, devices, rates, target=True):
        c1, c2 = (self.critic1_t, self.critic2_t) if target else (self.critic1, self.critic2)
        x = self._critic_input(np.atleast_2d(states), self._onehot(np.asarray(devices)), rates)
        return c1.forward(x)[:, 0], c2.forward(x)[:, 0]

    # -- learning ---------------------------------------------------------
    def targets(self, batch, rng=None):
        """Bootstrap targets ``r + discount * max(Q_ac, Q_bo)`` and diagnostics."""
        rng = rng if rng is not None else self.rng
        s2 = batch["s2"]
        B = s2.shape[0]
        devices, _, inc, scores = self.policy(s2, self.actor_t)
        if self.smoothing:
            noise = np.clip(rng.normal(0.0, self.smooth_sigma, B), -self.smooth_clip,
                            self.smooth_clip)
            inc = np.clip(inc + noise, -self.delta_max, self.delta_max)
        last = last_rate_from_state(s2, self.K, self.tau, self.r_max)
        rates = np.clip(last[np.arange(B), devices] + inc, 0.0, self.r_max)
        q1, q2 = self.twin_q(s2, devices, rates)
        q_ac = np.minimum(q1, q2)
        q_best = q_ac.copy()
        if self.use_bo and self.bo_batch > 0:
            n = min(self.bo_batch, B)
            served = served_from_state(s2[:n], self.K)
            v = _masked_softmax(scores[:n], served)
            _, _, q_bo = self.gexp.step_batch(s2[:n], v, served, self.twin_q, rng)
            q_best[:n] = np.maximum(q_ac[:n], q_bo)
        y = batch["r"] + self.discount * q_best
        return y, q_ac

    def _init_value_level(self, rewards):
        # start the critics near the fixed point of the discounted sum so the
        # bootstrapped targets do not drift upward for the whole run
        level = float(np.mean(rewards)) / (1.0 - self.discount) if self.discount < 1 else 0.0
        for net in (self.critic1, self.critic2, self.critic1_t, self.critic2_t):
            net.biases[-1][:] = level
        self.value_initialised = True

    def train_step(self, batch, rng=None, update_actor=True):
        if not self.value_initialised:
            self._init_value_level(batch["r"])
        y, _ = self.targets(batch, rng)
        if not np.all(np.isfinite(y)):
            raise FloatingPointError(f"non-finite TD target (min={np.nanmin(y)}, max={np.nanmax(y)})")
        s = batch["s"]
        B = s.shape[0]
        x = self._critic_input(s, self._onehot(batch["dev"]), batch["rate"])
        losses = []
        for net, opt in ((self.critic1, self.opt_c1), (self.critic2, self.opt_c2)):
            q, cache = net.forward(x, return_cache=True)
            err = q[:, 0] - y
            losses.append(float(np.mean(err ** 2)))
            grads, _ = net.backward(cache, (2.0 / B) * err[:, None])
            opt.step(net, grads)
        if not np.all(np.isfinite(losses)):
            raise FloatingPointError(f"non-finite critic loss {losses}")
        self.updates += 1
        if update_actor and self.updates % self.policy_delay == 0:
            self._actor_step(s)
        self.last_stats = {"critic_loss": float(np.mean(losses)), "target_mean": float(y.mean())}
        return self.last_stats

    def _critic_grad(self, s, device_vec, rates):
        """Gradient of ``-mean(Q1)`` with respect to the device weights and the rates."""
        x = self._critic_input(s, device_vec, rates)
        _, cache = self.critic1.forward(x, return_cache=True)
        _, gx = self.critic1.backward(cache, np.full((len(x), 1), -1.0 / len(x)))
        g_dev = gx[:, self.sdim: self.sdim + self.K]
        if self.device_block:
            g_sel = gx[:, self.sdim + self.K: self.sdim + self.K + self.bsize]
            g_dev = g_dev + np.einsum("bf,bkf->bk", g_sel, self._blocks(s))
        return g_dev, gx[:, -1] / self.r_max

    def _actor_step(self, s):
        B = s.shape[0]
        out, a_cache = self.actor.forward(s, return_cache=True)
        served = served_from_state(s, self.K)
        probs = _masked_softmax(out[:, : self.K], served)
        hard = np.argmax(np.where(served, -np.inf, out[:, : self.K]), axis=1)
        th = np.tanh(out[:, self.K])
        last = last_rate_from_state(s, self.K, self.tau, self.r_max)[np.arange(B), hard]
        # critic sees the executable (clipped) rate; the gradient passes straight through
        rates = np.clip(last + self.delta_max * th, 0.0, self.r_max)
        g_dev, g_rate = self._critic_grad(s, probs, rates)
        g_scores = probs * (g_dev - (g_dev * probs).sum(axis=1, keepdims=True))
        g_out = np.zeros_like(out)
        g_out[:, : self.K] = g_scores
        g_out[:, self.K] = (g_rate * self.delta_max * (1.0 - th ** 2)
                            + 2.0 * self.head_penalty * out[:, self.K] / B)
        grads, _ = self.actor.backward(a_cache, g_out)
        self.opt_actor.step(self.actor, grads)

    def soft_update(self, tau=None):
        tau = self.polyak if tau is None else tau
        for tgt, src in ((self.actor_t, self.actor), (self.critic1_t, self.critic1),
                         (self.critic2_t, self.critic2)):
            tgt.soft_update(src, tau)

    # -- persistence ------------------------------------------------------
    def state_dict(self) -> dict:
        out = {}
        for name in ("actor", "critic1", "critic2", "actor_t", "critic1_t", "critic2_t"):
            for k, v in getattr(self, name).get_state().items():
                out[f"{name}/{k}"] = v
        return out

    def load_state_dict(self, state):
        for name in ("actor", "critic1", "critic2", "actor_t", "critic1_t", "critic2_t"):
            sub = {k.split("/", 1)[1]: state[k] for k in state if k.startswith(name + "/")}
            setattr(self, name, Mlp.from_state(sub))
        self.value_initialised = True
        # optimiser moments are not persisted; start them afresh for the loaded nets
        lr = self.opt_actor.lr
        self.opt_actor = Adam(self.actor, lr)
        self.opt_c1 = Adam(self.critic1, lr)
        self.opt_c2 = Adam(self.critic2, lr)


def soft_update(nets, targets, tau):
    for tgt, src in zip(targets, nets):
        tgt.soft_update(src, tau)
    return targets


def train_step(agent: Td3Agent, batch, rng=None):
    return agent.train_step(batch, rng)
