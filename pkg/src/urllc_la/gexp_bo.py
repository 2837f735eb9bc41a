"""Joint device/rate search against the target critics.

Devices are arms of an exponential-weights bandit whose sampling law is
tilted by learned preferences (gradient-bandit style) and by the actor's
device scores; the rate for the drawn device maximises expected improvement
under a GP fitted to previously evaluated ``(rate, state) -> Q`` pairs.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .gp import GaussianProcessSurrogate, SurrogateDataset, maximize_ei_over_rate

LOG_RENORM = np.log(1e6)


@dataclass
class GexpState:
    """Bandit state over ``n_devices`` arms.

    Weights are kept in the log domain; they are shifted down whenever the
    largest weight exceeds 1e6, which leaves the sampling law unchanged.
    """

    n_devices: int
    exploration: float = 0.3
    implicit_exploration: float = 1.0
    bandit_lr: float = 0.1
    pref_step: float = 0.05
    log_weights: np.ndarray = field(default=None)
    preferences: np.ndarray = field(default=None)
    mean_q: float = 0.0
    n_updates: int = 0

    def __post_init__(self):
        if not 0.0 < self.exploration <= 1.0:
            raise ValueError("exploration must lie in (0, 1]")
        if self.implicit_exploration <= 0:
            raise ValueError("implicit_exploration must be positive")
        if self.log_weights is None:
            self.log_weights = np.zeros(self.n_devices)
        if self.preferences is None:
            self.preferences = np.zeros(self.n_devices)

    @property
    def weights(self) -> np.ndarray:
        return np.exp(self.log_weights)


def device_probabilities(state: GexpState, actor_scores, served) -> np.ndarray:
    """Sampling law over devices; served devices get probability zero."""
    served = np.asarray(served, dtype=bool)
    if served.all():
        raise ValueError("every device has already been served")
    K = state.n_devices
    w = np.exp(state.log_weights - state.log_weights.max())
    p_hat = (1.0 - state.exploration) * w / w.sum() + state.exploration / (K + 1)
    p_hat = np.where(served, 0.0, p_hat)
    p_hat /= p_hat.sum()
    d = state.preferences * np.asarray(actor_scores, dtype=float)
    d = np.where(served, -np.inf, d)
    tilt = np.exp(d - d[~served].max())
    p = tilt * p_hat
    return p / p.sum()


def select_device(state: GexpState, actor_scores, served, rng: np.random.Generator):
    """Draw a device; returns ``(device, probabilities)``."""
    p = device_probabilities(state, actor_scores, served)
    # inverse-CDF draw; Generator.choice re-validates p on every call
    k = int(np.searchsorted(np.cumsum(p), rng.random() * p.sum(), side="right"))
    k = min(k, state.n_devices - 1)
    while p[k] == 0.0:  # only reachable through round-off at the top end
        k -= 1
    return k, p


def update_bandit(state: GexpState, chosen: int, q_obs: float, probs) -> GexpState:
    """Importance-weighted exponential update plus preference gradient step.

    ``probs`` is the full sampling law the choice was drawn from.
    """
    probs = np.asarray(probs, dtype=float)
    p_k = probs[chosen]
    if p_k <= 0:
        raise ValueError("chosen device had zero probability")
    K = state.n_devices
    est = q_obs / (p_k * state.implicit_exploration)
    state.log_weights[chosen] += state.bandit_lr * est / (K + 1)
    top = state.log_weights.max()
    if top > LOG_RENORM:
        state.log_weights -= top

    adv = q_obs - state.mean_q
    grad = -probs.copy()
    grad[chosen] += 1.0
    state.preferences += state.pref_step * adv * grad

    state.n_updates += 1
    state.mean_q += (q_obs - state.mean_q) / state.n_updates
    return state


class GexpBo:
    """Bandit + GP search used to propose target actions during training.

    ``critics(states, devices, rates) -> (q1, q2)`` evaluates the twin target
    critics; the proposal's value is ``min(q1, q2)``.
    """

    def __init__(self, n_devices: int, state_dim: int, r_max: float, capacity=128,
                 length_scale=None, noise_variance=1e-2, exploration=0.3,
                 implicit_exploration=1.0, bandit_lr=0.1, pref_step=0.05,
                 grid_size=64, n_starts=8, n_iter=8):
        self.n_devices = n_devices
        self.state_dim = state_dim
        self.r_max = r_max
        self.grid_size = grid_size
        self.n_starts = n_starts
        self.n_iter = n_iter
        if length_scale is None:
            # rate on its own scale; the state block treated as one unit
            length_scale = np.concatenate([[1.0], np.full(state_dim, np.sqrt(max(state_dim, 1)))])
        self.gp = GaussianProcessSurrogate(length_scale=length_scale,
                                           noise_variance=noise_variance)
        self.data = SurrogateDataset(1 + state_dim, capacity)
        self.bandit = GexpState(n_devices, exploration, implicit_exploration, bandit_lr,
                                pref_step)

    @property
    def incumbent(self) -> float:
        return float(self.data.y.max()) if len(self.data) else 0.0

    def propose_rates(self, states) -> np.ndarray:
        states = np.atleast_2d(states)
        if len(self.data) == 0:
            mid = (self.grid_size - 1) // 2 + 1
            return np.full(states.shape[0], self.r_max * mid / self.grid_size)
        self.gp.fit(self.data.X, self.data.y)
        rates, _ = maximize_ei_over_rate(self.gp, states, self.incumbent, self.r_max,
                                         self.grid_size, self.n_starts, self.n_iter)
        return rates

    def step_batch(self, states, actor_scores, served, critics, rng):
        """One GEXP-BO pass over a batch of states.

        The posterior is factorised once for the batch, devices are drawn and
        the bandit updated sample by sample, and all evaluated points are
        appended to the dataset afterwards. Returns ``(devices, rates, q)``.
        """
        states = np.atleast_2d(states)
        served = np.atleast_2d(served)
        actor_scores = np.atleast_2d(actor_scores)
        B = states.shape[0]
        devices = np.empty(B, dtype=int)
        probs = np.empty((B, self.n_devices))
        for b in range(B):
            devices[b], probs[b] = select_device(self.bandit, actor_scores[b], served[b], rng)
        rates = self.propose_rates(states)
        q1, q2 = critics(states, devices, rates)
        q = np.minimum(q1, q2)
        for b in range(B):
            update_bandit(self.bandit, devices[b], q[b], probs[b])
        self.data.extend(np.column_stack([rates, states]), q)
        return devices, rates, q

    def optimize_step(self, state, actor_scores, served, critics, rng):
        d, r, q = self.step_batch(np.atleast_2d(state), np.atleast_2d(actor_scores),
                                  np.atleast_2d(served), critics, rng)
        return int(d[0]), float(r[0]), float(q[0])
