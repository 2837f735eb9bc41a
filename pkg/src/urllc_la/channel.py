"""Device mobility and Rician/Gauss-Markov downlink channel generation.

The base station sits at the origin with a uniform linear array of ``M``
half-wavelength spaced antennas. Every device walks a circle around its own
center; the line-of-sight part of its channel follows the geometry slot by
slot while the scattered part evolves as a first-order Gauss-Markov process.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

TWO_PI = 2.0 * np.pi
PAUSE_AFTER_REVOLUTION = 0.1  # seconds


@dataclass(frozen=True)
class Device:
    """A device in uniform circular motion.

    ``phase`` is the angle along the orbit and ``travelled`` accumulates the
    angle covered in the current revolution so that a completed lap can be
    detected independently of the starting phase.
    """

    id: int
    center: tuple[float, float]
    orbit_radius: float
    speed: float
    phase: float = 0.0
    pause_timer: float = 0.0
    travelled: float = 0.0

    def __post_init__(self):
        if self.orbit_radius <= 0:
            raise ValueError("orbit_radius must be positive")
        if self.speed < 0:
            raise ValueError("speed must be non-negative")

    @property
    def position(self) -> np.ndarray:
        cx, cy = self.center
        return np.array([cx + self.orbit_radius * np.cos(self.phase),
                         cy + self.orbit_radius * np.sin(self.phase)])


@dataclass(frozen=True)
class RicianParams:
    rician_factor_db: float = 3.0
    pathloss_ref_db: float = -65.0
    pathloss_exponent: float = 2.2
    d0: float = 1.0
    rho: float = 0.99
    antennas: int = 4

    def __post_init__(self):
        if not 0.0 <= self.rho <= 1.0:
            raise ValueError("rho must lie in [0, 1]")
        if self.antennas < 1:
            raise ValueError("antennas must be >= 1")
        if self.d0 <= 0:
            raise ValueError("d0 must be positive")

    @property
    def kappa(self) -> float:
        return 10.0 ** (self.rician_factor_db / 10.0)


@dataclass(frozen=True)
class ChannelState:
    """Channel snapshot of all devices at one slot."""

    gains: np.ndarray  # (K, M) complex
    true_snr: np.ndarray  # (K,) linear
    slot: int


def db_to_linear(x_db):
    return 10.0 ** (np.asarray(x_db, dtype=float) / 10.0)


def linear_to_db(x):
    return 10.0 * np.log10(np.asarray(x, dtype=float))


def dbm_to_watt(x_dbm):
    return 10.0 ** ((np.asarray(x_dbm, dtype=float) - 30.0) / 10.0)


def step_mobility(devices: list[Device], dt: float) -> list[Device]:
    """Advance every device by ``dt`` seconds along its orbit.

    A device that completes a revolution stops for 0.1 s before moving on.
    Motion left over after the lap boundary is discarded rather than carried
    into the pause.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    out = []
    for dev in devices:
        if dev.pause_timer > 0:
            remaining = dev.pause_timer - dt
            if remaining > 1e-12:
                out.append(replace(dev, pause_timer=remaining))
                continue
            # pause expires inside this step; move for the leftover time
            move_time = -remaining
            dev = replace(dev, pause_timer=0.0)
        else:
            move_time = dt
        dphi = dev.speed * move_time / dev.orbit_radius
        travelled = dev.travelled + dphi
        if travelled >= TWO_PI - 1e-12 and dev.speed > 0:
            # land exactly on the lap boundary, then pause
            phase = np.mod(dev.phase + (TWO_PI - dev.travelled), TWO_PI)
            out.append(replace(dev, phase=float(phase), travelled=0.0,
                               pause_timer=PAUSE_AFTER_REVOLUTION))
        else:
            out.append(replace(dev, phase=float(np.mod(dev.phase + dphi, TWO_PI)),
                               travelled=travelled))
    return out


def pathloss(d, params: RicianParams):
    """Linear large-scale gain ``rho0 * (d / d0) ** -alpha``."""
    d = np.asarray(d, dtype=float)
    if np.any(d <= 0):
        raise ValueError("distance to the base station must be positive")
    return db_to_linear(params.pathloss_ref_db) * (d / params.d0) ** (-params.pathloss_exponent)


def steering_vector(position, bs_position, antennas: int) -> np.ndarray:
    dx = float(bs_position[0]) - float(position[0])
    dy = float(bs_position[1]) - float(position[1])
    dist = np.hypot(dx, dy)
    if dist <= 0:
        raise ValueError("device coincides with the base station")
    sin_a = dy / dist
    return np.exp(1j * np.pi * sin_a * np.arange(antennas))


def compose_channel(position, scatter: np.ndarray, params: RicianParams,
                    bs_position=(0.0, 0.0)) -> np.ndarray:
    """Mix a LoS steering vector with a unit-variance scattered component."""
    d = float(np.hypot(position[0] - bs_position[0], position[1] - bs_position[1]))
    L = float(pathloss(d, params))
    los = steering_vector(position, bs_position, params.antennas)
    los_w, nlos_w = _mixing_weights(params.kappa)
    return np.sqrt(L) * (los_w * los + nlos_w * scatter)


def _mixing_weights(kappa: float) -> tuple[float, float]:
    if np.isinf(kappa):
        return 1.0, 0.0
    return np.sqrt(kappa / (kappa + 1.0)), np.sqrt(1.0 / (kappa + 1.0))


def complex_normal(rng: np.random.Generator, size, variance: float = 1.0) -> np.ndarray:
    """Draws from CN(0, variance)."""
    scale = np.sqrt(variance / 2.0)
    return scale * (rng.standard_normal(size) + 1j * rng.standard_normal(size))


def draw_channel(device: Device, params: RicianParams, bs_position,
                 rng: np.random.Generator) -> np.ndarray:
    """One independent Rician draw for ``device`` at its current position."""
    scatter = complex_normal(rng, params.antennas)
    return compose_channel(device.position, scatter, params, bs_position)


def evolve_channel(prev: np.ndarray, rho: float, rng: np.random.Generator,
                   variance: float = 1.0) -> np.ndarray:
    """Gauss-Markov step ``rho * prev + sqrt(1 - rho**2) * e``.

    ``variance`` is the stationary per-entry variance of the process; the
    innovation is drawn from CN(0, variance) so that it is preserved.
    """
    if not 0.0 <= rho <= 1.0:
        raise ValueError("rho must lie in [0, 1]")
    prev = np.asarray(prev, dtype=complex)
    if rho == 1.0:
        return prev.copy()
    e = complex_normal(rng, prev.shape, variance)
    return rho * prev + np.sqrt(1.0 - rho * rho) * e


def zf_snr(h: np.ndarray, p: float, noise: float) -> float:
    """Receive SNR ``p * ||h||^2 / noise`` of the single served device.

    With one device per slot the zero-forcing beamformer
    ``h^H (h h^H)^-1`` is the normalised matched direction, so the gain is
    the squared channel norm.
    """
    g = float(np.vdot(h, h).real)
    if g <= 0:
        raise ValueError("zero-norm channel")
    return p * g / noise


def sample_devices(n: int, rng: np.random.Generator, center_range=(8.0, 13.0),
                   orbit_range=(1.5, 5.0), speed_range=(1.5, 2.5)) -> list[Device]:
    """Random deployment: centers in an annulus around the BS, random orbits."""
    devices = []
    for k in range(n):
        R = rng.uniform(*center_range)
        theta = rng.uniform(0.0, TWO_PI)
        r = rng.uniform(*orbit_range)
        v = rng.uniform(*speed_range)
        phase = rng.uniform(0.0, TWO_PI)
        devices.append(Device(id=k, center=(R * np.cos(theta), R * np.sin(theta)),
                              orbit_radius=r, speed=v, phase=float(phase)))
    return devices


class ChannelSimulator:
    """Slot-by-slot channel trace for a fixed set of devices.

    The scattered component of every device is a unit-variance Gauss-Markov
    process; mobility only changes the geometry (path loss and LoS steering).
    A pausing device keeps its position while its scatter keeps evolving.
    """

    def __init__(self, devices, params: RicianParams, tx_power_w: float, noise_w: float,
                 rng: np.random.Generator, slot_duration: float = 1e-3,
                 bs_position=(0.0, 0.0)):
        self.devices = list(devices)
        self.params = params
        self.tx_power_w = tx_power_w
        self.noise_w = noise_w
        self.rng = rng
        self.slot_duration = slot_duration
        self.bs_position = bs_position
        self.slot = 0
        self._scatter = complex_normal(rng, (len(self.devices), params.antennas))
        self.state = self._snapshot()

    def _snapshot(self) -> ChannelState:
        gains = np.stack([compose_channel(dev.position, self._scatter[k], self.params,
                                          self.bs_position)
                          for k, dev in enumerate(self.devices)])
        snr = np.array([zf_snr(h, self.tx_power_w, self.noise_w) for h in gains])
        return ChannelState(gains=gains, true_snr=snr, slot=self.slot)

    def advance(self) -> ChannelState:
        self.devices = step_mobility(self.devices, self.slot_duration)
        self._scatter = evolve_channel(self._scatter, self.params.rho, self.rng)
        self.slot += 1
        self.state = self._snapshot()
        return self.state
