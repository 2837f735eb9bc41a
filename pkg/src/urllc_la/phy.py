"""Finite-blocklength link abstraction, CQI feedback and MCS tables."""

from __future__ import annotations

from dataclasses import dataclass
from importlib import resources

import numpy as np
from scipy.special import erfc, erfcinv

ACK = 0
NACK = 1

# Relative slack on the BLER threshold. Rates produced by ``ideal_rate`` sit
# exactly on the threshold and must not flip to NACK on round-off.
BLER_RTOL = 1e-9


@dataclass(frozen=True)
class FblParams:
    blocklength: int = 192
    bler_threshold: float = 1e-3

    def __post_init__(self):
        if self.blocklength < 1:
            raise ValueError("blocklength must be >= 1")
        if not 0.0 < self.bler_threshold < 1.0:
            raise ValueError("bler_threshold must lie in (0, 1)")


@dataclass(frozen=True)
class CqiCodec:
    bits: int = 4
    snr_min_db: float = -10.0
    snr_max_db: float = 30.0
    delay_slots: int = 1
    error_radius: float = 0.0  # kept for reference, never enforced

    def __post_init__(self):
        if self.bits < 1:
            raise ValueError("bits must be >= 1")
        if not self.snr_min_db < self.snr_max_db:
            raise ValueError("snr_min_db must be below snr_max_db")
        if self.delay_slots < 1:
            raise ValueError("delay_slots must be >= 1")

    @property
    def levels(self) -> int:
        return 2 ** self.bits

    @property
    def bin_width_db(self) -> float:
        return (self.snr_max_db - self.snr_min_db) / (self.levels - 1)


@dataclass(frozen=True)
class LinkOutcome:
    device: int
    rate: float
    bler: float
    feedback: int  # ACK or NACK
    slot: int = -1
    reward: float = 0.0

    @property
    def ack(self) -> bool:
        return self.feedback == ACK


@dataclass(frozen=True)
class McsTable:
    indices: tuple[int, ...]
    rates: tuple[float, ...]

    def __post_init__(self):
        if len(self.indices) != len(self.rates) or not self.indices:
            raise ValueError("indices and rates must be non-empty and aligned")
        if any(b - a != 1 for a, b in zip(self.indices, self.indices[1:])):
            raise ValueError("MCS indices must be contiguous")
        if any(b <= a for a, b in zip(self.rates, self.rates[1:])):
            raise ValueError("MCS rates must increase strictly with the index")

    @property
    def index_min(self) -> int:
        return self.indices[0]

    @property
    def index_max(self) -> int:
        return self.indices[-1]

    def rate_of(self, index: int) -> float:
        return self.rates[index - self.index_min]

    @classmethod
    def nr_table3(cls) -> "McsTable":
        """NR PDSCH MCS table 3 restricted to indices 8..24."""
        text = resources.files("urllc_la").joinpath("data/mcs_table3.csv").read_text()
        idx, rates = [], []
        for line in text.splitlines():
            if not line.strip() or line.startswith("#"):
                continue
            i, qm, r1024, _ = line.split(",")
            idx.append(int(i))
            rates.append(int(qm) * int(r1024) / 1024.0)
        return cls(tuple(idx), tuple(rates))


def qfunc(x):
    return 0.5 * erfc(np.asarray(x, dtype=float) / np.sqrt(2.0))


def qfunc_inv(p):
    return np.sqrt(2.0) * erfcinv(2.0 * np.asarray(p, dtype=float))


def dispersion(snr):
    return 1.0 - (1.0 + snr) ** -2


def bler(snr, rate, m):
    """Normal-approximation block error probability.

    ``Q((log2(1 + snr) - rate) / sqrt(V / m))`` with channel dispersion
    ``V = 1 - (1 + snr) ** -2``. Broadcasts over array arguments.
    """
    snr = np.asarray(snr, dtype=float)
    if np.any(snr <= 0):
        raise ValueError("snr must be positive")
    if np.any(np.asarray(m) < 1):
        raise ValueError("blocklength must be >= 1")
    z = (np.log2(1.0 + snr) - rate) / np.sqrt(dispersion(snr) / m)
    out = qfunc(z)
    return float(out) if out.ndim == 0 else out


def ideal_rate(snr, eps, m):
    """Largest rate whose BLER does not exceed ``eps`` (clamped at 0)."""
    snr = np.asarray(snr, dtype=float)
    if np.any(snr <= 0):
        raise ValueError("snr must be positive")
    if not 0.0 < eps < 1.0:
        raise ValueError("eps must lie in (0, 1)")
    r = np.log2(1.0 + snr) - qfunc_inv(eps) * np.sqrt(dispersion(snr) / m)
    out = np.maximum(r, 0.0)
    return float(out) if out.ndim == 0 else out


def quantize_cqi(snr_db: float, codec: CqiCodec) -> int:
    if snr_db <= codec.snr_min_db:
        return 0
    if snr_db >= codec.snr_max_db:
        return codec.levels - 1
    span = codec.snr_max_db - codec.snr_min_db
    return int(np.floor((snr_db - codec.snr_min_db) * (codec.levels - 1) / span))


def dequantize_cqi(cqi: int, codec: CqiCodec) -> float:
    """Midpoint (dB) of the SNR bin reported by ``cqi``."""
    if not 0 <= cqi <= codec.levels - 1:
        raise ValueError(f"cqi {cqi} outside [0, {codec.levels - 1}]")
    return codec.snr_min_db + (cqi + 0.5) * codec.bin_width_db


def is_ack(eps: float, threshold: float) -> bool:
    return eps < threshold * (1.0 + BLER_RTOL)


def exceeds(eps: float, threshold: float) -> bool:
    return eps > threshold * (1.0 + BLER_RTOL)


def transmit(snr_true: float, rate: float, fbl: FblParams, device: int = 0,
             slot: int = -1) -> LinkOutcome:
    """Evaluate one transmission; feedback is the deterministic BLER test."""
    if rate < 0:
        raise ValueError("rate must be non-negative")
    eps = bler(snr_true, rate, fbl.blocklength)
    fb = ACK if is_ack(eps, fbl.bler_threshold) else NACK
    return LinkOutcome(device=device, rate=float(rate), bler=eps, feedback=fb, slot=slot)


def discretize_rate(rate: float, table: McsTable) -> tuple[int, float]:
    """Nearest table entry, ties toward the lower index, clamped to the table."""
    rates = np.asarray(table.rates)
    if rate <= rates[0]:
        return table.index_min, float(rates[0])
    if rate >= rates[-1]:
        return table.index_max, float(rates[-1])
    hi = int(np.searchsorted(rates, rate, side="left"))
    lo = hi - 1
    pick = lo if (rate - rates[lo]) <= (rates[hi] - rate) else hi
    return table.indices[pick], float(rates[pick])


def floor_rate(rate: float, table: McsTable) -> tuple[int, float]:
    """Highest entry not above ``rate``; the lowest entry when none is."""
    rates = np.asarray(table.rates)
    pick = int(np.searchsorted(rates, rate * (1.0 + 1e-12), side="right")) - 1
    pick = max(pick, 0)
    return table.indices[pick], float(rates[pick])
