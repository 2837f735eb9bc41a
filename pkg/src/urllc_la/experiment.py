"""Experiment orchestration: build, train, evaluate, sweep and export.

Every function takes an :class:`~urllc_la.config.ExperimentConfig` and is
deterministic for a given config (the seed included).
"""

from __future__ import annotations

import csv
import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .channel import RicianParams, db_to_linear, dbm_to_watt
from .config import ExperimentConfig
from .env import LOG_COLUMNS, EpisodeMetrics, TdmaEnv, check_frame_constraints
from .nn import Adam, Mlp
from .phy import CqiCodec, FblParams, McsTable, floor_rate, ideal_rate
from .policies import (BoCmabPolicy, DqnPolicy, IdealPolicy, OllaCmabPolicy, Policy,
                       Td3Policy)

OUTPUT_ENV = "URLLC_LA_OUTPUT_DIR"
CHECKPOINT_VERSION = 1
TEST_STREAM = 1

TRAIN_COLUMNS = ("epoch", "scheme", "sum_rate", "avg_bler", "exceeded_count")
SUMMARY_COLUMNS = ("scheme", "sum_rate", "avg_bler", "exceeded_count", "slots", "episodes")
SWEEP_COLUMNS = ("axis", "point", "seed", "scheme", "sum_rate", "avg_bler", "exceeded_count")
HISTOGRAM_COLUMNS = ("mcs_index", "slots", "violations", "percent", "deviation_variance")

SWEEP_POINTS = {"devices": (2, 3, 4), "bler_threshold": (1e-5, 1e-4, 1e-3, 1e-2)}


def default_output_dir() -> Path:
    return Path(os.environ.get(OUTPUT_ENV, "runs"))


# -- construction -----------------------------------------------------------
def build_env(cfg: ExperimentConfig, stream: int = 0) -> TdmaEnv:
    """Environment for ``cfg``; ``stream=TEST_STREAM`` gives the held-out test trace."""
    rician = RicianParams(rician_factor_db=cfg.rician_factor_db,
                          pathloss_ref_db=cfg.pathloss_ref_db,
                          pathloss_exponent=cfg.pathloss_exponent, d0=cfg.ref_distance_m,
                          rho=cfg.channel_correlation, antennas=cfg.n_antennas)
    codec = CqiCodec(bits=cfg.cqi_bits, snr_min_db=cfg.snr_min_db, snr_max_db=cfg.snr_max_db,
                     delay_slots=cfg.cqi_delay)
    fbl = FblParams(blocklength=cfg.blocklength, bler_threshold=cfg.bler_threshold)
    return TdmaEnv(n_devices=cfg.n_devices, rician=rician, fbl=fbl, codec=codec,
                   tx_power_w=float(dbm_to_watt(cfg.tx_power_dbm)),
                   noise_w=float(dbm_to_watt(cfg.noise_dbm)) * cfg.bandwidth_hz,
                   tau=cfg.tau, r_max=cfg.r_max, beta=cfg.beta,
                   mcs_table=McsTable.nr_table3() if cfg.discrete_mcs else None,
                   slot_duration=cfg.slot_duration_s, ack_decay=cfg.ack_decay, seed=cfg.seed,
                   stream=stream)


def make_policy(cfg: ExperimentConfig) -> Policy:
    if cfg.scheme == "ideal":
        return IdealPolicy()
    if cfg.scheme == "olla-cmab":
        return OllaCmabPolicy(olla_step=cfg.olla_step_cmab)
    if cfg.scheme == "bo-cmab":
        return BoCmabPolicy()
    if cfg.scheme == "dqn":
        return DqnPolicy(hidden=cfg.hidden, lr=cfg.learning_rate, discount=cfg.discount,
                         delta_max=cfg.delta_max, batch_size=cfg.batch_size,
                         target_period=cfg.target_period, seed=cfg.seed)
    return Td3Policy(hidden=cfg.hidden, lr=cfg.learning_rate, discount=cfg.discount,
                     polyak=cfg.polyak, target_period=cfg.target_period,
                     nack_period=cfg.nack_period, batch_size=cfg.batch_size,
                     delta_max=cfg.delta_max, use_bo=cfg.use_bo, bo_batch=cfg.bo_batch,
                     olla_step=cfg.olla_step, warmup_slots=cfg.warmup_slots, seed=cfg.seed)


# -- CSV helpers --------------------------------------------------------------
def _cell(v) -> str:
    # repr keeps every float bit so rows parse back exactly
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


class CsvSink:
    """Append-only CSV writer with a fixed column order."""

    def __init__(self, path, columns):
        self.columns = tuple(columns)
        self._fh = open(path, "w", encoding="utf-8", newline="")
        self._writer = csv.writer(self._fh, lineterminator="\n")
        self._writer.writerow(self.columns)

    def write(self, row: dict):
        self._writer.writerow([_cell(row[c]) for c in self.columns])

    def close(self):
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def write_csv(path, columns, rows):
    with CsvSink(path, columns) as sink:
        for row in rows:
            sink.write(row)


_INT_COLUMNS = {"epoch", "exceeded_count", "slots", "episodes", "seed", "mcs_index",
                "violations", "episode", "slot", "frame", "slot_in_frame", "device", "cqi",
                "exceeded"}
_STR_COLUMNS = {"scheme", "axis", "feedback"}


def read_csv(path) -> list[dict]:
    """Read a CSV written by this module back into typed rows."""
    with open(path, encoding="utf-8", newline="") as fh:
        rows = list(csv.DictReader(fh))
    out = []
    for row in rows:
        typed = {}
        for k, v in row.items():
            if k in _STR_COLUMNS:
                typed[k] = v
            elif k in _INT_COLUMNS:
                typed[k] = int(v)
            else:
                typed[k] = float(v)
        out.append(typed)
    return out


def metrics_row(m: EpisodeMetrics) -> dict:
    return {"sum_rate": m.sum_rate, "avg_bler": m.avg_bler, "exceeded_count": m.exceeded_count}


# -- checkpoints ----------------------------------------------------------------
def _policy_arrays(policy: Policy) -> dict:
    if isinstance(policy, Td3Policy):
        return policy.agent_.state_dict()
    if isinstance(policy, DqnPolicy):
        out = {}
        for name in ("q_", "q_t_"):
            for k, v in getattr(policy, name).get_state().items():
                out[f"{name.rstrip('_')}/{k}"] = v
        return out
    if isinstance(policy, (OllaCmabPolicy, BoCmabPolicy)):
        out = {"arms/counts": policy.arms_.counts, "arms/means": policy.arms_.means}
        if isinstance(policy, BoCmabPolicy):
            # the stored observations are the whole BO model
            for k, data in enumerate(policy.data_):
                out[f"surrogate/{k}/X"] = data.X
                out[f"surrogate/{k}/y"] = data.y
        return out
    return {}


def save_checkpoint(path, cfg: ExperimentConfig, policy: Policy):
    """Write every learned parameter. Replay buffers and the proposed
    scheme's GP data are left out; BO-CMAB's GP observations are kept."""
    arrays = {f"params/{k}": np.asarray(v) for k, v in _policy_arrays(policy).items()}
    np.savez(path, format_version=np.array(CHECKPOINT_VERSION), scheme=np.array(cfg.scheme),
             config=np.array(cfg.to_text()), **arrays)


def load_checkpoint(path, cfg: ExperimentConfig, env: TdmaEnv) -> Policy:
    """Rebuild the policy for ``cfg`` on ``env`` and load the stored parameters."""
    with np.load(path, allow_pickle=False) as data:
        version = int(data["format_version"])
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        scheme = str(data["scheme"])
        if scheme != cfg.scheme:
            raise ValueError(f"checkpoint holds scheme {scheme!r}, config asks for {cfg.scheme!r}")
        params = {k.split("/", 1)[1]: data[k] for k in data.files if k.startswith("params/")}
    policy = make_policy(cfg)
    policy.start_episode(env)
    if isinstance(policy, Td3Policy):
        policy.agent_.load_state_dict(params)
    elif isinstance(policy, DqnPolicy):
        for name in ("q", "q_t"):
            sub = {k.split("/", 1)[1]: v for k, v in params.items() if k.startswith(name + "/")}
            setattr(policy, name + "_", Mlp.from_state(sub))
        policy.opt_ = Adam(policy.q_, policy.lr)
    elif isinstance(policy, (OllaCmabPolicy, BoCmabPolicy)):
        policy.arms_.counts = params["arms/counts"].copy()
        policy.arms_.means = params["arms/means"].copy()
        if isinstance(policy, BoCmabPolicy):
            for k, data in enumerate(policy.data_):
                data.extend(params[f"surrogate/{k}/X"], params[f"surrogate/{k}/y"])
    return policy


# -- runs -------------------------------------------------------------------------
@dataclass
class RunResult:
    cfg: ExperimentConfig
    env: TdmaEnv
    policy: Policy
    curve: list = field(default_factory=list)
    summary: dict | None = None
    files: dict = field(default_factory=dict)


def train(cfg: ExperimentConfig, out_dir=None, slot_log=True) -> RunResult:
    """Train ``cfg.scheme`` for ``cfg.epochs`` epochs.

    With ``out_dir`` set, writes ``training.csv``, ``training_slots.csv``
    (when ``slot_log``) and ``checkpoint.npz``.
    """
    env = build_env(cfg)
    policy = make_policy(cfg)
    result = RunResult(cfg, env, policy)
    sinks = []
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        result.files["training"] = str(out_dir / "training.csv")
        sinks.append(CsvSink(result.files["training"], TRAIN_COLUMNS))
        if slot_log:
            result.files["training_slots"] = str(out_dir / "training_slots.csv")
            sinks.append(CsvSink(result.files["training_slots"], LOG_COLUMNS))

    def on_epoch(epoch, m):
        row = {"epoch": epoch, "scheme": cfg.scheme, **metrics_row(m)}
        result.curve.append(row)
        if sinks:
            sinks[0].write(row)
        if len(sinks) > 1:
            for rec in m.records:
                sinks[1].write(rec)

    try:
        policy.fit(env, epochs=cfg.epochs, frames_per_epoch=cfg.frames_per_epoch,
                   callback=on_epoch)
    finally:
        for sink in sinks:
            sink.close()
    if out_dir is not None:
        result.files["checkpoint"] = str(out_dir / "checkpoint.npz")
        save_checkpoint(result.files["checkpoint"], cfg, policy)
    return result


def evaluate(cfg: ExperimentConfig, policy: Policy, env: TdmaEnv | None = None, episodes=None,
             slot_sink: CsvSink | None = None, keep_records=False):
    """Run test episodes; returns ``(summary_row, merged EpisodeMetrics)``.

    By default every scheme is tested on the same held-out fading trace of the
    training deployment, so rows for one seed are directly comparable.
    """
    episodes = cfg.eval_episodes if episodes is None else episodes
    if env is None:
        env = build_env(cfg, TEST_STREAM)
    total = EpisodeMetrics(frames=0)
    for _ in range(episodes):
        m = env.run_episode(policy, cfg.frames_per_epoch, training=False, keep_records=True)
        if slot_sink is not None:
            for rec in m.records:
                slot_sink.write(rec)
        if not keep_records:
            m.records = []
        total = total.merge(m)
    row = {"scheme": cfg.scheme, **metrics_row(total), "slots": total.slots,
           "episodes": episodes}
    return row, total


def train_and_evaluate(cfg: ExperimentConfig, episodes=None) -> RunResult:
    result = train(cfg)
    result.summary, _ = evaluate(cfg, result.policy, episodes=episodes)
    return result


# -- sweeps ---------------------------------------------------------------------------
def sweep(cfg: ExperimentConfig, axis: str, points=None, seeds=None, schemes=None,
          workers=None, episodes=None) -> list[dict]:
    """Train and evaluate every ``(seed, point, scheme)``; rows sorted by that key."""
    if axis not in SWEEP_POINTS:
        raise ValueError(f"axis must be one of {tuple(SWEEP_POINTS)}")
    points = tuple(points or SWEEP_POINTS[axis])
    seeds = tuple(seeds or (cfg.seed,))
    schemes = tuple(schemes or (cfg.scheme,))
    jobs = [(seed, point, scheme) for seed in seeds for point in points for scheme in schemes]

    def run(job):
        seed, point, scheme = job
        value = int(point) if axis == "devices" else float(point)
        key = "n_devices" if axis == "devices" else axis
        sub = cfg.replace(seed=seed, scheme=scheme, **{key: value})
        summary = train_and_evaluate(sub, episodes).summary
        return {"axis": axis, "point": float(point), "seed": seed, "scheme": scheme,
                "sum_rate": summary["sum_rate"], "avg_bler": summary["avg_bler"],
                "exceeded_count": summary["exceeded_count"]}

    with ThreadPoolExecutor(max_workers=workers) as pool:
        rows = list(pool.map(run, jobs))
    order = {s: i for i, s in enumerate(schemes)}
    return sorted(rows, key=lambda r: (r["seed"], r["point"], order[r["scheme"]]))


# -- MCS analysis ---------------------------------------------------------------------
def optimal_mcs_index(snr_db: float, cfg: ExperimentConfig, table: McsTable) -> int:
    """Highest table index whose rate meets the target BLER at the true SNR."""
    r = ideal_rate(db_to_linear(snr_db), cfg.bler_threshold, cfg.blocklength)
    return floor_rate(r, table)[0]


def mcs_histogram(records, cfg: ExperimentConfig) -> list[dict]:
    """Per optimal MCS index: slots, threshold violations, their share and the
    variance of ``selected - optimal`` over those slots."""
    table = McsTable.nr_table3()
    groups: dict[int, list] = {i: [] for i in table.indices}
    for rec in records:
        if rec["mcs_index"] < 0:
            raise ValueError("MCS histogram needs a discrete-MCS run")
        opt = optimal_mcs_index(rec["true_snr_db"], cfg, table)
        groups[opt].append((rec["mcs_index"] - opt, rec["exceeded"]))
    rows = []
    for idx in table.indices:
        g = groups[idx]
        dev = np.array([d for d, _ in g], dtype=float)
        violations = int(sum(e for _, e in g))
        rows.append({"mcs_index": idx, "slots": len(g), "violations": violations,
                     "percent": 100.0 * violations / len(g) if g else 0.0,
                     "deviation_variance": float(dev.var()) if g else 0.0})
    return rows


# -- metrics JSON -----------------------------------------------------------------------
def write_metrics(path, cfg: ExperimentConfig, command: str, results, files=None):
    payload = {"command": command, "run_hash": cfg.run_hash(), "config": cfg.as_dict(),
               "results": results, "files": files or {}}
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return payload


def check_log(path, n_devices: int) -> int:
    """Re-read a per-slot CSV and assert the frame constraints; returns the row count."""
    rows = read_csv(path)
    check_frame_constraints(rows, n_devices)
    return len(rows)

