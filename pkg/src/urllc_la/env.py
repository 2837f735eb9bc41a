"""TDMA frame orchestration: observation -> decision -> transmission -> feedback."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import olla as olla_mod
from .channel import ChannelSimulator, RicianParams, linear_to_db, sample_devices
from .phy import (ACK, CqiCodec, FblParams, McsTable, discretize_rate, exceeds,
                  quantize_cqi, transmit)
from .td3 import reward as reward_fn

LOG_COLUMNS = ("episode", "slot", "frame", "slot_in_frame", "device", "cqi", "true_snr_db",
               "policy_rate", "olla_delta", "rate", "mcs_index", "bler", "feedback",
               "reward", "exceeded")


class SchedulingViolation(RuntimeError):
    """A policy picked a device that was already served in the current frame."""


@dataclass
class Observation:
    """What a scheduler sees at the start of a slot.

    ``frame_snr`` (true linear SNR for the remaining slots of the frame,
    shape ``(remaining, K)``) is populated only for policies that declare
    ``needs_oracle``.
    """

    slot: int
    slot_in_frame: int
    served: np.ndarray
    cqi_history: np.ndarray  # (K, depth), most recent last
    last_feedback: np.ndarray
    last_rate: np.ndarray
    olla_delta: np.ndarray
    ack_fraction: np.ndarray
    frame_snr: np.ndarray | None = None


@dataclass
class FrameState:
    frame_index: int = 0
    slot_in_frame: int = 0
    served: np.ndarray = None


@dataclass
class EpisodeMetrics:
    """Aggregates of one episode; ``records`` holds the per-slot log rows."""

    frames: int
    rate_total: float = 0.0
    bler_total: float = 0.0
    exceeded_count: int = 0
    nack_count: int = 0
    slots: int = 0
    records: list = field(default_factory=list)

    @property
    def sum_rate(self) -> float:
        return self.rate_total / self.frames if self.frames else 0.0

    @property
    def avg_bler(self) -> float:
        return self.bler_total / self.slots if self.slots else 0.0

    def merge(self, other: "EpisodeMetrics") -> "EpisodeMetrics":
        return EpisodeMetrics(self.frames + other.frames, self.rate_total + other.rate_total,
                              self.bler_total + other.bler_total,
                              self.exceeded_count + other.exceeded_count,
                              self.nack_count + other.nack_count, self.slots + other.slots,
                              self.records + other.records)


class TdmaEnv:
    """Downlink TDMA system: ``K`` devices, one served per slot, ``K`` slots per frame.

    The channel runs continuously across episodes; an episode boundary only
    resets the frame bookkeeping and the OLLA offsets. ``seed`` fixes the
    deployment; a non-zero ``stream`` keeps it but draws a fresh fading trace.
    """

    def __init__(self, n_devices=4, rician: RicianParams | None = None,
                 fbl: FblParams | None = None, codec: CqiCodec | None = None,
                 tx_power_w=3.1623, noise_w=1e-14, tau=12, r_max=4.0, beta=4.0,
                 mcs_table: McsTable | None = None, slot_duration=1e-3,
                 ack_decay=0.99, initial_rate=1.0, seed=0, stream=0):
        self.K = n_devices
        self.rician = rician or RicianParams()
        self.fbl = fbl or FblParams()
        self.codec = codec or CqiCodec()
        self.tau = tau
        self.r_max = r_max
        self.beta = beta
        self.mcs_table = mcs_table
        self.ack_decay = ack_decay
        self.initial_rate = initial_rate
        self.rng = np.random.default_rng(seed)
        devices = sample_devices(n_devices, self.rng)
        if stream:
            # same deployment, independent fading realisation
            self.rng = np.random.default_rng([seed, stream])
        self.channel = ChannelSimulator(devices, self.rician, tx_power_w, noise_w, self.rng,
                                        slot_duration)
        self._snr = [self.channel.state.true_snr]  # index = absolute slot
        self.slot = 0
        self.episode = -1
        self.olla = olla_mod.OllaState(n_devices, target=self.fbl.bler_threshold,
                                       lower=-r_max)
        self.last_feedback = np.zeros(n_devices)
        self.last_rate = np.full(n_devices, float(initial_rate))
        self.ack_fraction = np.ones(n_devices)
        self.frame = FrameState(served=np.zeros(n_devices, dtype=bool))

    # -- channel trace ----------------------------------------------------
    def true_snr(self, slot: int) -> np.ndarray:
        while len(self._snr) <= slot:
            self._snr.append(self.channel.advance().true_snr)
        return self._snr[slot]

    def cqi_at(self, slot: int) -> np.ndarray:
        """CQI vector reported for ``slot`` (measured ``delay_slots`` earlier)."""
        src = max(slot - self.codec.delay_slots, 0)
        snr_db = linear_to_db(self.true_snr(src))
        return np.array([quantize_cqi(x, self.codec) for x in snr_db])

    def cqi_history(self, slot: int, depth: int) -> np.ndarray:
        cols = [self.cqi_at(max(slot - j, 0)) for j in range(depth - 1, -1, -1)]
        return np.column_stack(cols)

    # -- episode control --------------------------------------------------
    def reset(self, olla_step: float = 0.09, with_oracle: bool = False):
        self.episode += 1
        self.olla = olla_mod.OllaState(self.K, step=olla_step, target=self.fbl.bler_threshold,
                                       lower=-self.r_max)
        self.frame = FrameState(served=np.zeros(self.K, dtype=bool))
        return self.observe(with_oracle)

    def observe(self, with_oracle: bool) -> Observation:
        t = self.slot
        frame_snr = None
        if with_oracle:
            remaining = self.K - self.frame.slot_in_frame
            frame_snr = np.stack([self.true_snr(t + j) for j in range(remaining)])
        return Observation(slot=t, slot_in_frame=self.frame.slot_in_frame,
                           served=self.frame.served.copy(),
                           cqi_history=self.cqi_history(t, self.tau + 1),
                           last_feedback=self.last_feedback.copy(),
                           last_rate=self.last_rate.copy(),
                           olla_delta=self.olla.delta.copy(),
                           ack_fraction=self.ack_fraction.copy(), frame_snr=frame_snr)

    def run_slot(self, policy, obs: Observation | None = None, training=False):
        """Execute one slot with ``policy``; returns ``(outcome, record, next_obs)``."""
        if obs is None:
            obs = self.observe(getattr(policy, "needs_oracle", False))
        device, policy_rate = policy.select(obs)
        device = int(device)
        if not 0 <= device < self.K or self.frame.served[device]:
            raise SchedulingViolation(
                f"slot {self.slot}: device {device} is not available (served={self.frame.served})")
        policy_rate = max(float(policy_rate), 0.0)
        delta = float(self.olla.delta[device]) if policy.uses_olla else 0.0
        if policy.uses_olla:
            rate = olla_mod.apply(policy_rate, delta, self.mcs_table)
        elif self.mcs_table is not None:
            rate = discretize_rate(policy_rate, self.mcs_table)[1]
        else:
            rate = policy_rate
        mcs_index = -1
        if self.mcs_table is not None:
            mcs_index = discretize_rate(rate, self.mcs_table)[0]

        snr = float(self.true_snr(self.slot)[device])
        outcome = transmit(snr, rate, self.fbl, device=device, slot=self.slot)
        rew = reward_fn(rate, outcome.feedback, float(self.ack_fraction[device]), self.beta)
        exceeded = exceeds(outcome.bler, self.fbl.bler_threshold)
        record = {
            "episode": self.episode, "slot": self.slot,
            "frame": self.frame.frame_index, "slot_in_frame": self.frame.slot_in_frame,
            "device": device, "cqi": int(obs.cqi_history[device, -1]),
            "true_snr_db": float(linear_to_db(snr)), "policy_rate": policy_rate,
            "olla_delta": delta, "rate": rate, "mcs_index": mcs_index,
            "bler": float(outcome.bler), "feedback": "ACK" if outcome.ack else "NACK",
            "reward": rew, "exceeded": int(exceeded),
        }

        # feedback bookkeeping
        if policy.uses_olla:
            self.olla.record(device, outcome.feedback)
        ack = 1.0 if outcome.feedback == ACK else 0.0
        self.ack_fraction[device] = self.ack_decay * self.ack_fraction[device] + (1 - self.ack_decay) * ack
        self.last_feedback[device] = 1.0 if ack else -1.0
        self.last_rate[device] = policy_rate
        self.frame.served[device] = True
        self.frame.slot_in_frame += 1
        self.slot += 1
        if self.frame.slot_in_frame == self.K:
            self.frame = FrameState(self.frame.frame_index + 1, 0, np.zeros(self.K, dtype=bool))
        next_obs = self.observe(getattr(policy, "needs_oracle", False))
        policy.observe(obs, device, policy_rate, outcome, rew, next_obs, training)
        return outcome, record, next_obs

    def run_episode(self, policy, frames: int, training=False, keep_records=True):
        if frames < 1:
            raise ValueError("frames must be >= 1")
        obs = self.reset(getattr(policy, "olla_step", 0.09),
                         getattr(policy, "needs_oracle", False))
        policy.start_episode(self)
        metrics = EpisodeMetrics(frames=frames)
        for _ in range(frames * self.K):
            outcome, record, obs = self.run_slot(policy, obs, training)
            if outcome.ack:
                metrics.rate_total += record["rate"]
            metrics.bler_total += record["bler"]
            metrics.exceeded_count += record["exceeded"]
            metrics.nack_count += record["feedback"] == "NACK"
            metrics.slots += 1
            if keep_records:
                metrics.records.append(record)
        check_frame_constraints(metrics.records, self.K)
        return metrics


def check_frame_constraints(records, n_devices: int):
    """Every complete frame serves each device exactly once, one per slot."""
    frames = {}
    for rec in records:
        frames.setdefault((rec["episode"], rec["frame"]), []).append(rec)
    for key, recs in frames.items():
        slots = [r["slot_in_frame"] for r in recs]
        if len(set(slots)) != len(slots):
            raise SchedulingViolation(f"frame {key}: a slot served more than one device")
        devices = [r["device"] for r in recs]
        if len(set(devices)) != len(devices):
            raise SchedulingViolation(f"frame {key}: a device served twice")
        if len(recs) == n_devices and sorted(devices) != list(range(n_devices)):
            raise SchedulingViolation(f"frame {key}: not every device served")
    return True
