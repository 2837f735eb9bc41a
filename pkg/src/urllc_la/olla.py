"""Outer-loop link adaptation: an additive per-device rate offset driven by
ACK/NACK feedback."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .phy import ACK, McsTable, floor_rate


@dataclass
class OllaState:
    """Per-device corrective terms.

    Each ACK raises the offset by ``step * target / (1 - target)`` and each
    NACK lowers it by ``step``, so the offset is stationary exactly when the
    NACK fraction equals ``target``. The offset is clamped to
    ``[lower, upper]`` to stop windup on long ACK streaks.
    """

    n_devices: int
    step: float = 0.09
    target: float = 1e-3
    lower: float = -8.0
    upper: float = 2.0
    delta: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.step <= 0:
            raise ValueError("step must be positive")
        if not 0.0 < self.target < 1.0:
            raise ValueError("target must lie in (0, 1)")
        if self.delta is None:
            self.delta = np.zeros(self.n_devices)
        else:
            self.delta = np.asarray(self.delta, dtype=float).copy()

    def reset(self):
        self.delta[:] = 0.0

    def record(self, device: int, feedback: int) -> float:
        """In-place update for one feedback; returns the new offset."""
        f = 0.0 if feedback == ACK else 1.0
        d = self.delta[device] + self.step * (self.target - f) / (1.0 - self.target)
        self.delta[device] = min(max(d, self.lower), self.upper)
        return self.delta[device]

    def copy(self) -> "OllaState":
        return OllaState(self.n_devices, self.step, self.target, self.lower,
                         self.upper, self.delta)


def apply(rate: float, delta: float, table: McsTable | None = None) -> float:
    """Corrected rate: ``max(0, rate + delta)``, or the MCS floor in discrete mode."""
    r = max(0.0, rate + delta)
    if table is None:
        return r
    return floor_rate(r, table)[1]


def update(state: OllaState, device: int, feedback: int) -> OllaState:
    new = state.copy()
    new.record(device, feedback)
    return new
