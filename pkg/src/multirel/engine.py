"""Multi-chain MCMC orchestration, checkpoints, traces, MAP selection and reports."""
from __future__ import annotations

import concurrent.futures
import hashlib
import json
import math
import os
import zipfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from .fileio import atomic_open, atomic_write_json
from .model import EdgeCountPanel, HyperParams, ModelError, Partition
from .samplers import (
    GAMMA_HYPER_BOUNDS,
    Algo8Config,
    ChainState,
    SliceConfig,
    SweepConfig,
    deviation_posterior_mean,
    emission_table,
    rng_stream,
    sample_deviation_factors,
    sweep,
)

CHECKPOINT_VERSION = 1


class EngineError(RuntimeError):
    pass


class CheckpointError(EngineError):
    pass


@dataclass
class RunConfig:
    hypers: HyperParams
    n_chains: int = 3
    n_iterations: int = 5000
    burn_in: int = 1000
    thin: int = 10
    seed: int = 0
    slice: SliceConfig = field(default_factory=SliceConfig)
    algo8: Algo8Config = field(default_factory=Algo8Config)
    checkpoint_every: int = 0
    debug: bool = False

    def __post_init__(self):
        if self.n_chains < 1:
            raise ValueError("n_chains must be >= 1")
        if self.n_iterations < 1:
            raise ValueError("n_iterations must be >= 1")
        if not 0 <= self.burn_in < self.n_iterations:
            raise ValueError("burn_in must satisfy 0 <= burn_in < n_iterations")
        if self.thin < 1:
            raise ValueError("thin must be >= 1")
        if self.checkpoint_every < 0:
            raise ValueError("checkpoint_every must be >= 0")

    def sweep_config(self) -> SweepConfig:
        return SweepConfig(slice=self.slice, algo8=self.algo8, debug=self.debug)

    def digest(self) -> str:
        payload = {
            "hypers": self.hypers.to_dict(), "burn_in": self.burn_in, "thin": self.thin, "seed": self.seed,
            "slice": self.slice.__dict__, "m_aux": self.algo8.m_aux,
        }
        return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()


@dataclass
class SampleRecord:
    iteration: int
    chain: int
    joint_logprob: float
    partition: Partition
    paths: np.ndarray
    base_rates: np.ndarray
    theta: np.ndarray
    gamma_hypers: tuple[float, float]

    @property
    def G(self) -> int:
        return self.partition.G

    def summary(self) -> dict:
        return {"iteration": self.iteration, "chain": self.chain,
                "joint_logprob": self.joint_logprob, "G": self.G,
                "partition": self.partition.assignment.tolist()}

    def to_dict(self) -> dict:
        d = self.summary()
        d.update(paths=self.paths.tolist(), base_rates=self.base_rates.tolist(),
                 theta=self.theta.tolist(), gamma_hypers=list(self.gamma_hypers))
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SampleRecord":
        return cls(int(d["iteration"]), int(d["chain"]), float(d["joint_logprob"]),
                   Partition(d["partition"]), np.asarray(d["paths"], dtype=np.int64),
                   np.asarray(d["base_rates"], dtype=float),
                   np.asarray(d["theta"], dtype=float), tuple(d["gamma_hypers"]))

    @classmethod
    def from_state(cls, state: ChainState, iteration: int, chain: int,
                   joint: float | None = None) -> "SampleRecord":
        if joint is None:
            joint = state.joint_logprob()
        return cls(iteration, chain, joint, state.partition(), state.paths.copy(),
                   state.rates.copy(), state.theta.copy(),
                   (state.gamma_shape, state.gamma_scale))


INIT_ROUNDS = 10


def initial_state(panel: EdgeCountPanel, hypers: HyperParams) -> ChainState:
    """One group, moment-based rates and path, moment-based Gamma hyperparameters.

    Rates start from each edge's mean over the quieter half of slices, ranked
    by total count, divided by the state-0 mean deviation. The single group's
    path takes, slice by slice, the state with the larger collapsed marginal
    under those rates; rates are then re-estimated from the state-0 slices and
    the two steps repeat. Starting rates and path consistent keeps the first
    rate update from absorbing bursts into the baseline.
    """
    spike_mean = hypers.shape[0] * hypers.scale[0]
    sum_y = panel.counts.sum(axis=0, dtype=float)[None, :]
    quiet = sum_y[0] <= np.median(sum_y[0])
    rates = np.maximum(panel.counts[:, quiet].mean(axis=1) / spike_mean, 0.01)
    paths = emission_table(sum_y, [rates.sum()], hypers).argmax(axis=2)
    for _ in range(INIT_ROUNDS):
        base = paths[0] == 0
        if not base.any():
            break
        rates = np.maximum(panel.counts[:, base].mean(axis=1) / spike_mean, 0.01)
        prev, paths = paths, emission_table(sum_y, [rates.sum()], hypers).argmax(axis=2)
        if np.array_equal(prev, paths):
            break
    theta = hypers.dirichlet / hypers.dirichlet.sum(axis=1, keepdims=True)
    m, v = rates.mean(), rates.var()
    lo, hi = GAMMA_HYPER_BOUNDS
    if v > 0:
        shape, scale = m * m / v, v / m
    else:
        shape, scale = 1.0, m
    shape = float(np.clip(shape, lo, hi))
    scale = float(np.clip(scale, lo, hi))
    return ChainState(panel, hypers, np.zeros(panel.n_edges, dtype=np.int64),
                      paths.astype(np.int64), rates, theta, shape, scale)


def state_from_record(panel: EdgeCountPanel, hypers: HyperParams,
                      record: SampleRecord) -> ChainState:
    return ChainState(panel, hypers, record.partition.assignment, record.paths,
                      record.base_rates, record.theta, *record.gamma_hypers)


# -- checkpoints -------------------------------------------------------------

def _array_digest(arrays: dict) -> str:
    h = hashlib.sha256()
    for key in sorted(arrays):
        a = np.ascontiguousarray(arrays[key])
        h.update(key.encode())
        h.update(str(a.dtype).encode())
        h.update(str(a.shape).encode())
        h.update(a.tobytes())
    return h.hexdigest()


def save_checkpoint(path, state: ChainState, rng: np.random.Generator, iteration: int,
                    chain: int, config: RunConfig, best: SampleRecord | None,
                    n_records: int):
    arrays = {
        "labels": state.labels, "paths": state.paths, "rates": state.rates,
        "theta": state.theta, "gamma": np.array([state.gamma_shape, state.gamma_scale]),
    }
    meta = {
        "format": "multirel-checkpoint", "version": CHECKPOINT_VERSION,
        "iteration": iteration, "chain": chain, "config_digest": config.digest(),
        "rng_state": rng.bit_generator.state, "n_records": n_records,
        "diagnostics": state.diagnostics.to_dict(),
        "best": None if best is None else best.to_dict(),
        "array_digest": _array_digest(arrays),
    }
    with atomic_open(path, "wb") as fh:
        np.savez(fh, meta=np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8), **arrays)


def load_checkpoint(path, panel: EdgeCountPanel, config: RunConfig):
    """Returns (state, rng, iteration, chain, best, n_records)."""
    try:
        with np.load(path) as data:
            arrays = {k: data[k] for k in data.files if k != "meta"}
            meta = json.loads(data["meta"].tobytes().decode())
    except (OSError, ValueError, KeyError, zipfile.BadZipFile) as exc:
        raise CheckpointError(f"{path}: unreadable checkpoint ({exc})") from exc
    if meta.get("format") != "multirel-checkpoint" or meta.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint format/version")
    if meta["array_digest"] != _array_digest(arrays):
        raise CheckpointError(f"{path}: checkpoint digest mismatch (corrupted file?)")
    if meta["config_digest"] != config.digest():
        raise CheckpointError(f"{path}: checkpoint was written with a different configuration")
    state = ChainState(panel, config.hypers, arrays["labels"], arrays["paths"],
                       arrays["rates"], arrays["theta"], *arrays["gamma"].tolist())
    for k, v in meta["diagnostics"].items():
        setattr(state.diagnostics, k, v)
    rng = np.random.Generator(np.random.PCG64())
    rng.bit_generator.state = meta["rng_state"]
    best = None if meta["best"] is None else SampleRecord.from_dict(meta["best"])
    return (state, rng, int(meta["iteration"]), int(meta["chain"]), best,
            int(meta["n_records"]))


# -- running chains ------------------------------------------------------------

def _better(a: SampleRecord, b: SampleRecord | None) -> bool:
    if b is None:
        return True
    return (-a.joint_logprob, a.chain, a.iteration) < (-b.joint_logprob, b.chain, b.iteration)


def select_map(records) -> SampleRecord:
    """Record with the highest joint log probability; ties go to the lowest (chain, iteration)."""
    best = None
    for r in records:
        if _better(r, best):
            best = r
    if best is None:
        raise EngineError("select_map needs at least one sample record")
    return best


class ChainRun:
    """Stateful driver of one chain; iterate it to receive emitted records.

    ``best`` tracks the highest-joint sample over every post-burn-in
    iteration, thinned or not.
    """

    def __init__(self, panel: EdgeCountPanel, config: RunConfig, chain: int = 0,
                 state: ChainState | None = None):
        self.panel = panel
        self.config = config
        self.chain = chain
        self.state = state if state is not None else initial_state(panel, config.hypers)
        self.rng = rng_stream(config.seed, chain)
        self.iteration = 0
        self.best: SampleRecord | None = None
        self.n_records = 0

    @classmethod
    def resume(cls, path, panel: EdgeCountPanel, config: RunConfig) -> "ChainRun":
        state, rng, iteration, chain, best, n_records = load_checkpoint(path, panel, config)
        run = cls(panel, config, chain, state)
        run.rng, run.iteration, run.best, run.n_records = rng, iteration, best, n_records
        return run

    @property
    def done(self) -> bool:
        return self.iteration >= self.config.n_iterations

    def step(self) -> SampleRecord | None:
        cfg = self.config
        try:
            sweep(self.state, self.rng, cfg.sweep_config())
        except (ModelError, ArithmeticError) as exc:
            raise EngineError(f"chain {self.chain}, iteration {self.iteration + 1}: {exc}") from exc
        self.iteration += 1
        if self.iteration <= cfg.burn_in:
            return None
        joint = self.state.joint_logprob()
        record = None
        if (self.iteration - cfg.burn_in) % cfg.thin == 0:
            record = SampleRecord.from_state(self.state, self.iteration, self.chain, joint)
            self.n_records += 1
        if self.best is None or joint > self.best.joint_logprob:
            self.best = record or SampleRecord.from_state(self.state, self.iteration,
                                                          self.chain, joint)
        return record

    def checkpoint(self, path):
        save_checkpoint(path, self.state, self.rng, self.iteration, self.chain,
                        self.config, self.best, self.n_records)

    def __iter__(self) -> Iterator[SampleRecord]:
        while not self.done:
            rec = self.step()
            if rec is not None:
                yield rec


def run_chain(panel: EdgeCountPanel, config: RunConfig, chain: int = 0,
              state: ChainState | None = None) -> Iterator[SampleRecord]:
    """Run one chain in memory, yielding every thinned post-burn-in record."""
    return iter(ChainRun(panel, config, chain, state))


def chain_paths(out_dir, chain: int) -> tuple[Path, Path]:
    out_dir = Path(out_dir)
    return out_dir / f"trace.chain{chain}.ndjson", out_dir / f"checkpoint.chain{chain}.npz"


@dataclass
class ChainResult:
    chain: int
    best: SampleRecord
    trace_path: Path
    n_records: int
    diagnostics: dict
    joint_trace: list[float]


def _truncate_trace(path: Path, upto_iteration: int, expected: int):
    kept = []
    if path.exists():
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                if line.strip() and json.loads(line)["iteration"] <= upto_iteration:
                    kept.append(line if line.endswith("\n") else line + "\n")
    if len(kept) != expected:
        raise CheckpointError(
            f"{path}: trace has {len(kept)} records up to iteration {upto_iteration}, "
            f"checkpoint expects {expected}")
    with atomic_open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.writelines(kept)


def fit_chain(panel: EdgeCountPanel, config: RunConfig, chain: int, out_dir,
              resume: bool = False, stop_after: int | None = None,
              on_record=None) -> ChainResult | None:
    """Run one chain writing its trace and checkpoints under ``out_dir``.

    The trace is written to ``<trace>.partial`` and renamed on completion.
    ``stop_after`` halts (after checkpointing) at that iteration and returns
    None, which is how interrupted runs are simulated.
    """
    trace_path, ckpt_path = chain_paths(out_dir, chain)
    partial = trace_path.with_name(trace_path.name + ".partial")
    Path(out_dir).mkdir(parents=True, exist_ok=True)
    if resume and ckpt_path.exists():
        run = ChainRun.resume(ckpt_path, panel, config)
        if run.chain != chain:
            raise CheckpointError(f"{ckpt_path}: belongs to chain {run.chain}")
        if run.done and trace_path.exists():
            return ChainResult(chain, run.best, trace_path, run.n_records,
                               run.state.diagnostics.to_dict(), _joint_trace(trace_path))
        _truncate_trace(partial, run.iteration, run.n_records)
        mode = "a"
    else:
        run = ChainRun(panel, config, chain)
        mode = "w"
    every = config.checkpoint_every
    with open(partial, mode, encoding="utf-8", newline="\n") as sink:
        while not run.done:
            rec = run.step()
            if rec is not None:
                sink.write(json.dumps(rec.summary()) + "\n")
                if on_record is not None:
                    on_record(rec, run.state)
            at_stop = stop_after is not None and run.iteration >= stop_after
            if (every and run.iteration % every == 0) or at_stop or run.done:
                sink.flush()
                try:
                    run.checkpoint(ckpt_path)
                except OSError as exc:
                    raise CheckpointError(
                        f"chain {chain}: checkpoint write failed at iteration "
                        f"{run.iteration} ({exc}); last good checkpoint: {ckpt_path}") from exc
            if at_stop and not run.done:
                return None
    os.replace(partial, trace_path)
    if run.best is None:
        raise EngineError(f"chain {chain} produced no post-burn-in samples")
    return ChainResult(chain, run.best, trace_path, run.n_records,
                       run.state.diagnostics.to_dict(), _joint_trace(trace_path))


def _joint_trace(path) -> list[float]:
    return [r["joint_logprob"] for r in read_trace(path)]


def read_trace(path) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def scan_trace_map(paths) -> dict:
    """Re-scan persisted traces for the maximal-joint summary line."""
    best = None
    for p in paths:
        for r in read_trace(p):
            key = (-r["joint_logprob"], r["chain"], r["iteration"])
            if best is None or key < best[0]:
                best = (key, r)
    if best is None:
        raise EngineError("no records in traces")
    return best[1]


def _fit_chain_job(args):
    return fit_chain(*args)


def fit(panel: EdgeCountPanel, config: RunConfig, out_dir, resume: bool = False,
        workers: int = 1) -> tuple[SampleRecord, list[ChainResult]]:
    """Run all chains (in parallel when ``workers > 1``) and select the MAP sample."""
    jobs = [(panel, config, c, out_dir, resume) for c in range(config.n_chains)]
    if workers > 1 and config.n_chains > 1:
        with concurrent.futures.ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_fit_chain_job, jobs))
    else:
        results = [_fit_chain_job(j) for j in jobs]
    return select_map(r.best for r in results), results


def split_rhat(traces) -> float:
    """Split-chain potential scale reduction of a scalar trace (e.g. joint log prob)."""
    halves = []
    for tr in traces:
        tr = np.asarray(tr, dtype=float)
        n = tr.size // 2
        if n >= 2:
            halves += [tr[:n], tr[tr.size - n:]]
    if len(halves) < 2:
        return math.nan
    n = min(h.size for h in halves)
    x = np.array([h[-n:] for h in halves])
    w = x.var(axis=1, ddof=1).mean()
    b = n * x.mean(axis=1).var(ddof=1)
    if w == 0:
        return math.nan
    return float(math.sqrt(((n - 1) / n * w + b / n) / w))


def map_summary(best: SampleRecord, panel: EdgeCountPanel, config: RunConfig,
                results: list[ChainResult] | None = None) -> dict:
    d = best.to_dict()
    d["format"] = "multirel-map v1"
    d["edges"] = [list(e) for e in panel.edges]
    d["hypers"] = config.hypers.to_dict()
    if results:
        d["chains"] = [{"chain": r.chain, "records": r.n_records,
                        "best_joint_logprob": r.best.joint_logprob,
                        "diagnostics": r.diagnostics} for r in results]
        rhat = split_rhat([r.joint_trace for r in results])
        d["rhat_joint_logprob"] = None if math.isnan(rhat) else rhat
    return d


def write_map_summary(path, summary: dict):
    atomic_write_json(path, summary)


def load_map_summary(path) -> tuple[SampleRecord, HyperParams, dict]:
    with open(path, encoding="utf-8") as fh:
        d = json.load(fh)
    if d.get("format") != "multirel-map v1":
        raise EngineError(f"{path}: not a MAP summary")
    return SampleRecord.from_dict(d), HyperParams.from_dict(d["hypers"]), d


# -- reporting -----------------------------------------------------------------

@dataclass
class GroupReport:
    label: int
    members: list[int]
    edges: list[tuple[str, str]]
    deviation_mean: np.ndarray
    states: np.ndarray
    series: np.ndarray
    deviation_interval: np.ndarray | None = None

    @property
    def size(self) -> int:
        return len(self.members)


def posterior_group_report(record: SampleRecord, panel: EdgeCountPanel,
                           hypers: HyperParams, n_delta_draws: int = 0,
                           rng: np.random.Generator | None = None) -> list[GroupReport]:
    """Per-group deviation summaries under the MAP sample, largest group first.

    The posterior mean deviation at each time is ``c' * d'`` under the
    sample's state path; with ``n_delta_draws`` > 0 a central 90% interval
    from Gamma posterior draws is attached too.
    """
    part = record.partition
    rates = record.base_rates
    reports = []
    for g in range(part.G):
        members = part.members(g)
        sum_y = panel.counts[members].sum(axis=0)
        sum_lam = float(rates[members].sum())
        path = record.paths[g]
        mean = deviation_posterior_mean(sum_y, sum_lam, path, hypers)
        interval = None
        if n_delta_draws > 0:
            draws = sample_deviation_factors(sum_y, sum_lam, path, hypers,
                                             rng or rng_stream(0, g), size=n_delta_draws)
            interval = np.quantile(draws, [0.05, 0.95], axis=0)
        reports.append(GroupReport(g, members.tolist(), [panel.edges[i] for i in members],
                                   mean, path.copy(), panel.counts[members].copy(), interval))
    reports.sort(key=lambda r: (-r.size, r.label))
    return reports


def format_series_table(report: GroupReport, panel: EdgeCountPanel) -> str:
    names = [f"{panel.name(a)}->{panel.name(b)}" for a, b in report.edges]
    lines = [",".join(["t", *names])]
    for t in range(report.series.shape[1]):
        lines.append(",".join([str(t), *map(str, report.series[:, t].tolist())]))
    return "\n".join(lines) + "\n"


def format_deviation_table(report: GroupReport) -> str:
    header = ["t", "deviation_mean", "state"]
    if report.deviation_interval is not None:
        header += ["deviation_q05", "deviation_q95"]
    lines = [",".join(header)]
    for t in range(report.states.size):
        row = [str(t), repr(float(report.deviation_mean[t])), str(int(report.states[t]))]
        if report.deviation_interval is not None:
            row += [repr(float(x)) for x in report.deviation_interval[:, t]]
        lines.append(",".join(row))
    return "\n".join(lines) + "\n"
