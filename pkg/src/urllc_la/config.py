"""Flat ``key = value`` experiment configuration.

Files are parsed with :mod:`configparser` (a section header is implied), so
``#`` / ``;`` comments and blank lines are allowed. Every key is listed in
:data:`KEY_DOCS`; unknown keys are an error.
"""

from __future__ import annotations

import configparser
import dataclasses
import hashlib
from dataclasses import dataclass, fields

SCHEMES = ("proposed", "ideal", "dqn", "bo-cmab", "olla-cmab")
_SECTION = "experiment"


@dataclass(frozen=True)
class ExperimentConfig:
    # run control
    scheme: str = "proposed"
    seed: int = 0
    epochs: int = 100
    slots_per_epoch: int = 400
    eval_episodes: int = 100
    discrete_mcs: bool = False
    # radio
    n_antennas: int = 4
    n_devices: int = 4
    cqi_bits: int = 4
    cqi_delay: int = 1
    snr_min_db: float = -10.0
    snr_max_db: float = 30.0
    bler_threshold: float = 1e-3
    blocklength: int = 192
    pathloss_ref_db: float = -65.0
    ref_distance_m: float = 1.0
    pathloss_exponent: float = 2.2
    rician_factor_db: float = 3.0
    channel_correlation: float = 0.99
    tx_power_dbm: float = 35.0
    noise_dbm: float = -105.0
    bandwidth_hz: float = 3e5
    slot_duration_s: float = 1e-3
    # learning
    learning_rate: float = 1e-3
    discount: float = 0.99
    target_period: int = 400
    polyak: float = 0.5
    nack_period: int = 5
    batch_size: int = 64
    hidden: tuple = (128, 128, 128)
    delta_max: float = 1.0
    warmup_slots: int = 4000
    use_bo: bool = True
    bo_batch: int = 8
    # link adaptation / reward
    olla_step: float = 0.09
    olla_step_cmab: float = 0.01
    tau: int = 12
    beta: float = 4.0
    r_max: float = 4.0
    ack_decay: float = 0.99

    def __post_init__(self):
        validate(self)

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)

    @property
    def frames_per_epoch(self) -> int:
        return max(self.slots_per_epoch // self.n_devices, 1)

    def to_text(self) -> str:
        lines = [f"{f.name} = {_format(getattr(self, f.name))}" for f in fields(self)]
        return "\n".join(lines) + "\n"

    def run_hash(self) -> str:
        """Git blob id of the canonical serialisation, so ``git hash-object`` on a
        dumped config reproduces it."""
        data = self.to_text().encode("utf-8")
        return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()

    def as_dict(self) -> dict:
        out = dataclasses.asdict(self)
        out["hidden"] = list(self.hidden)
        return out


KEY_DOCS = {
    "scheme": "policy to run: " + ", ".join(SCHEMES),
    "seed": "master seed for geometry, channel and learners",
    "epochs": "training epochs (0 allowed)",
    "slots_per_epoch": "slots per epoch/episode; rounded down to whole frames",
    "eval_episodes": "test episodes after training",
    "discrete_mcs": "restrict rates to MCS indices 8..24 of the NR 64QAM table",
    "n_antennas": "base-station antennas M",
    "n_devices": "devices K (= slots per frame)",
    "cqi_bits": "CQI quantisation bits N",
    "cqi_delay": "age of the CQI report in slots",
    "snr_min_db": "lower CQI clipping bound",
    "snr_max_db": "upper CQI clipping bound",
    "bler_threshold": "target BLER epsilon_max",
    "blocklength": "channel uses per packet m",
    "pathloss_ref_db": "path loss at the reference distance",
    "ref_distance_m": "reference distance d0",
    "pathloss_exponent": "path-loss exponent alpha",
    "rician_factor_db": "Rician K-factor",
    "channel_correlation": "per-slot Gauss-Markov correlation of the scattered part",
    "tx_power_dbm": "transmit power",
    "noise_dbm": "noise power spectral density (dBm/Hz)",
    "bandwidth_hz": "receiver bandwidth multiplying the noise density",
    "slot_duration_s": "slot length used by the mobility model",
    "learning_rate": "Adam step size for every network",
    "discount": "TD discount factor",
    "target_period": "slots between soft target updates T_u",
    "polyak": "soft-update mixing weight",
    "nack_period": "every this many slots the batch is NACK-only (T_n)",
    "batch_size": "mini-batch size D_B (even)",
    "hidden": "comma-separated hidden widths of actor/critic/DQN",
    "delta_max": "largest per-service rate increment",
    "warmup_slots": "initial slots with random actions and no actor updates",
    "use_bo": "enable the GEXP-BO target proposal",
    "bo_batch": "transitions per batch that receive a GEXP-BO proposal",
    "olla_step": "OLLA step of the proposed scheme",
    "olla_step_cmab": "OLLA step of the OLLA-CMAB baseline",
    "tau": "CQI history length in the state",
    "beta": "reward bonus for a successful transmission",
    "r_max": "largest selectable rate (bits/symbol)",
    "ack_decay": "forgetting factor of the per-device ACK fraction",
}

_RANGES = {
    "epochs": (0, None), "slots_per_epoch": (1, None), "eval_episodes": (0, None),
    "n_antennas": (1, None), "n_devices": (1, 8), "cqi_bits": (1, 8), "cqi_delay": (1, None),
    "bler_threshold": (0.0, 1.0), "blocklength": (1, None), "ref_distance_m": (0.0, None),
    "pathloss_exponent": (0.0, None), "channel_correlation": (0.0, 1.0),
    "bandwidth_hz": (0.0, None), "slot_duration_s": (0.0, None),
    "learning_rate": (0.0, None), "discount": (0.0, 1.0), "target_period": (1, None),
    "polyak": (0.0, 1.0), "nack_period": (1, None), "batch_size": (2, None),
    "delta_max": (0.0, None), "warmup_slots": (0, None), "bo_batch": (0, None),
    "olla_step": (0.0, None), "olla_step_cmab": (0.0, None), "tau": (0, None),
    "beta": (0.0, None), "r_max": (0.0, None), "ack_decay": (0.0, 1.0),
}
_OPEN_LOW = {"bler_threshold", "ref_distance_m", "bandwidth_hz", "slot_duration_s",
             "learning_rate", "polyak", "r_max", "olla_step", "olla_step_cmab", "delta_max"}


def validate(cfg: ExperimentConfig):
    if cfg.scheme not in SCHEMES:
        raise ValueError(f"scheme must be one of {SCHEMES}, got {cfg.scheme!r}")
    if cfg.snr_min_db >= cfg.snr_max_db:
        raise ValueError("snr_min_db must be below snr_max_db")
    if cfg.batch_size % 2:
        raise ValueError("batch_size must be even")
    if not cfg.hidden or min(cfg.hidden) < 1:
        raise ValueError("hidden needs at least one positive width")
    for key, (lo, hi) in _RANGES.items():
        v = getattr(cfg, key)
        if lo is not None and (v < lo or (key in _OPEN_LOW and v == lo)):
            raise ValueError(f"{key}={v} below its allowed range")
        if hi is not None and v > hi:
            raise ValueError(f"{key}={v} above its allowed range")
    if cfg.bler_threshold >= 1.0:
        raise ValueError("bler_threshold must be < 1")


def _format(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ",".join(str(x) for x in v)
    return repr(v) if isinstance(v, float) else str(v)


def _parse_bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _coerce(name: str, text: str):
    kind = _TYPES[name]
    text = text.strip()
    if kind is bool:
        return _parse_bool(text)
    if kind is tuple:
        return tuple(int(x) for x in text.split(",") if x.strip())
    if kind is int:
        return int(text)
    if kind is float:
        return float(text)
    return text


_TYPES = {f.name: type(f.default) for f in fields(ExperimentConfig)}


def from_mapping(values: dict, base: ExperimentConfig | None = None) -> ExperimentConfig:
    """Build a config from string or typed values layered over ``base``."""
    unknown = sorted(set(values) - set(_TYPES))
    if unknown:
        raise KeyError(f"unknown config key(s): {', '.join(unknown)}")
    typed = {k: _coerce(k, v) if isinstance(v, str) else v for k, v in values.items()}
    if "hidden" in typed:
        typed["hidden"] = tuple(typed["hidden"])
    return dataclasses.replace(base or ExperimentConfig(), **typed)


def parse(text: str, base: ExperimentConfig | None = None) -> ExperimentConfig:
    parser = configparser.ConfigParser(interpolation=None, delimiters=("=",))
    parser.optionxform = str  # keep key case so typos are caught, not folded
    parser.read_string(f"[{_SECTION}]\n{text}")
    return from_mapping(dict(parser[_SECTION]), base)


def load(path, base: ExperimentConfig | None = None) -> ExperimentConfig:
    with open(path, encoding="utf-8") as fh:
        return parse(fh.read(), base)


def dump(cfg: ExperimentConfig, path):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(cfg.to_text())
