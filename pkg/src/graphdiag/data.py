"""Simulation runs: CSV ingestion, standard-score normalisation, windowing,
run-level splits and a synthetic VAR process with injected faults.
"""
from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .io import atomic_write_text

logger = logging.getLogger(__name__)

FAULT_KINDS = ("step", "random_variation", "slow_drift", "sticking")
TEP_CHANGE_POINT = 600
SAMPLE_PERIOD_MINUTES = 3.0


class DataFormatError(ValueError):
    pass


@dataclass
class SimulationRun:
    run_id: str
    state_id: int
    change_point: int
    samples: np.ndarray  # [T, N]
    sample_period: float = SAMPLE_PERIOD_MINUTES

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 2:
            raise ValueError(f"run {self.run_id}: samples must be [T, N], got shape {self.samples.shape}")
        if self.state_id != 0 and not 0 <= self.change_point < len(self.samples):
            raise ValueError(f"run {self.run_id}: change point {self.change_point} outside [0, {len(self.samples)})")

    @property
    def n_samples(self) -> int:
        return self.samples.shape[0]

    @property
    def n_channels(self) -> int:
        return self.samples.shape[1]

    @property
    def is_faulty(self) -> bool:
        return self.state_id != 0


# ---------------------------------------------------------------------------
# CSV
# ---------------------------------------------------------------------------


def write_runs_csv(runs: Sequence[SimulationRun], path=None) -> str:
    """Long-format CSV: ``run_id,state_id,sample,ch_0,...``; returns the text."""
    if not runs:
        raise ValueError("no runs to write")
    n = runs[0].n_channels
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["run_id", "state_id", "sample"] + [f"ch_{i}" for i in range(n)])
    for run in runs:
        if run.n_channels != n:
            raise ValueError(f"run {run.run_id} has {run.n_channels} channels, expected {n}")
        for t, row in enumerate(run.samples):
            writer.writerow([run.run_id, run.state_id, t] + [repr(float(v)) for v in row])
    text = buf.getvalue()
    if path is not None:
        atomic_write_text(path, text)
    return text


def load_runs_csv(path, change_point: int = TEP_CHANGE_POINT) -> list[SimulationRun]:
    with open(path, newline="") as fh:
        return parse_runs_csv(fh, change_point)


def parse_runs_csv(lines: Iterable[str], change_point: int = TEP_CHANGE_POINT) -> list[SimulationRun]:
    reader = csv.reader(lines)
    try:
        header = next(reader)
    except StopIteration:
        raise DataFormatError("line 1: empty file") from None
    header = [h.strip() for h in header]
    if header[:3] != ["run_id", "state_id", "sample"] or len(header) < 4:
        raise DataFormatError(f"line 1: header must start with run_id,state_id,sample,ch_0,... got {header[:4]}")
    n = len(header) - 3
    expected = [f"ch_{i}" for i in range(n)]
    if header[3:] != expected:
        raise DataFormatError(f"line 1: channel columns must be ch_0..ch_{n - 1}")
    order: list[str] = []
    states: dict[str, int] = {}
    rows: dict[str, list[list[float]]] = {}
    last_sample: dict[str, int] = {}
    for lineno, rec in enumerate(reader, start=2):
        if not rec:
            continue
        if len(rec) != n + 3:
            raise DataFormatError(f"line {lineno}: expected {n + 3} fields, got {len(rec)}")
        run_id = rec[0]
        try:
            state = int(rec[1])
            sample = int(rec[2])
            values = [float(v) for v in rec[3:]]
        except ValueError as exc:
            raise DataFormatError(f"line {lineno}: {exc}") from None
        if run_id not in rows:
            order.append(run_id)
            rows[run_id] = []
            states[run_id] = state
        elif states[run_id] != state:
            raise DataFormatError(f"line {lineno}: run {run_id} changes state from {states[run_id]} to {state}")
        elif sample <= last_sample[run_id]:
            raise DataFormatError(f"line {lineno}: sample index {sample} is not increasing in run {run_id}")
        last_sample[run_id] = sample
        rows[run_id].append(values)
    runs = []
    for run_id in order:
        state = states[run_id]
        runs.append(SimulationRun(run_id, state, change_point if state else 0, np.array(rows[run_id])))
    return runs


# ---------------------------------------------------------------------------
# normalisation
# ---------------------------------------------------------------------------


@dataclass
class NormStats:
    mean: np.ndarray
    std: np.ndarray

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.mean, dtype=np.float64).tobytes())
        h.update(np.ascontiguousarray(self.std, dtype=np.float64).tobytes())
        return h.hexdigest()

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_dict(cls, obj: dict) -> "NormStats":
        return cls(np.asarray(obj["mean"], dtype=np.float64), np.asarray(obj["std"], dtype=np.float64))


def fit_norm(runs: Sequence[SimulationRun]) -> NormStats:
    data = np.concatenate([r.samples for r in runs]) if runs else np.empty((0, 0))
    if data.shape[0] < 2:
        raise ValueError("need at least two samples to fit normalisation statistics")
    mean = data.mean(axis=0)
    std = data.std(axis=0)
    dead = std == 0
    if dead.any():
        logger.warning("channels %s have zero variance; std clamped to 1", np.flatnonzero(dead).tolist())
        std = np.where(dead, 1.0, std)
    return NormStats(mean, std)


def apply_norm(runs: Sequence[SimulationRun], stats: NormStats) -> list[SimulationRun]:
    out = []
    for r in runs:
        if r.n_channels != stats.mean.size:
            raise ValueError(f"run {r.run_id} has {r.n_channels} channels, stats cover {stats.mean.size}")
        out.append(SimulationRun(r.run_id, r.state_id, r.change_point, (r.samples - stats.mean) / stats.std,
                                 r.sample_period))
    return out


# ---------------------------------------------------------------------------
# windows
# ---------------------------------------------------------------------------


@dataclass
class WindowSample:
    features: np.ndarray  # [N, m]
    label: int
    run_id: str
    end_index: int


def window_label(run: SimulationRun, end_index) -> np.ndarray:
    """Label of windows ending at ``end_index``: the run state once the fault is active."""
    end_index = np.asarray(end_index)
    if not run.is_faulty:
        return np.zeros(end_index.shape, dtype=np.int64)
    return np.where(end_index >= run.change_point, run.state_id, 0).astype(np.int64)


def window_ends(run: SimulationRun, m: int, stride: int = 1) -> np.ndarray:
    if m < 1 or stride < 1:
        raise ValueError("window size and stride must be positive")
    return np.arange(m - 1, run.n_samples, stride)


def make_windows(run: SimulationRun, m: int, stride: int = 1) -> list[WindowSample]:
    if run.n_samples < m:
        logger.warning("run %s has %d samples, fewer than window %d", run.run_id, run.n_samples, m)
        return []
    ends = window_ends(run, m, stride)
    labels = window_label(run, ends)
    return [WindowSample(run.samples[e - m + 1 : e + 1].T.copy(), int(lab), run.run_id, int(e))
            for e, lab in zip(ends, labels)]


def run_windows(run: SimulationRun, m: int, stride: int = 1) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Vectorised windows of one run: ``(X [W, N, m], labels [W], end_index [W])``."""
    if run.n_samples < m:
        logger.warning("run %s has %d samples, fewer than window %d", run.run_id, run.n_samples, m)
        return np.empty((0, run.n_channels, m)), np.empty(0, dtype=np.int64), np.empty(0, dtype=np.int64)
    view = sliding_window_view(run.samples, m, axis=0)  # [T-m+1, N, m]
    ends = window_ends(run, m, stride)
    return view[ends - m + 1], window_label(run, ends), ends


def build_windows(runs: Sequence[SimulationRun], m: int, stride: int = 1) -> tuple[np.ndarray, np.ndarray]:
    xs, ys = [], []
    for run in runs:
        x, y, _ = run_windows(run, m, stride)
        xs.append(x)
        ys.append(y)
    if not xs:
        raise ValueError("no runs to window")
    return np.ascontiguousarray(np.concatenate(xs)), np.concatenate(ys)


# ---------------------------------------------------------------------------
# splits
# ---------------------------------------------------------------------------


def split_runs(runs: Sequence[SimulationRun], train_fraction: float = 0.8, seed: int = 0
               ) -> tuple[list[SimulationRun], list[SimulationRun]]:
    """Stratified run-level split; windows of one run never straddle the split."""
    if not 0 < train_fraction <= 1:
        raise ValueError(f"train_fraction must be in (0, 1], got {train_fraction}")
    rng = np.random.default_rng(seed)
    by_state: dict[int, list[SimulationRun]] = {}
    for r in runs:
        by_state.setdefault(r.state_id, []).append(r)
    train, test = [], []
    for state in sorted(by_state):
        group = by_state[state]
        if len(group) == 1:
            logger.warning("state %d has a single run; it goes to the training split", state)
            train.extend(group)
            continue
        order = rng.permutation(len(group))
        n_train = int(round(train_fraction * len(group)))
        train.extend(group[i] for i in order[:n_train])
        test.extend(group[i] for i in order[n_train:])
    if not test:
        logger.warning("test split is empty (train_fraction=%s)", train_fraction)
    return train, test


def subsample_runs(runs: Sequence[SimulationRun], fraction: float, seed: int = 0) -> list[SimulationRun]:
    """Keep ``fraction`` of the runs of every state (at least one each)."""
    if not 0 < fraction <= 1:
        raise ValueError(f"fraction must be in (0, 1], got {fraction}")
    if fraction == 1:
        return list(runs)
    rng = np.random.default_rng(seed)
    by_state: dict[int, list[SimulationRun]] = {}
    for r in runs:
        by_state.setdefault(r.state_id, []).append(r)
    out = []
    for state in sorted(by_state):
        group = by_state[state]
        keep = max(1, int(round(fraction * len(group))))
        out.extend(group[i] for i in sorted(rng.permutation(len(group))[:keep]))
    return out


# ---------------------------------------------------------------------------
# synthetic process
# ---------------------------------------------------------------------------


@dataclass
class FaultSpec:
    state_id: int
    kind: str
    channels: tuple[int, ...]
    magnitude: float = 1.0

    def __post_init__(self):
        if self.kind not in FAULT_KINDS:
            raise ValueError(f"fault kind must be one of {FAULT_KINDS}, got {self.kind!r}")
        self.channels = tuple(int(c) for c in self.channels)


def default_faults(n_nodes: int = 12) -> list[FaultSpec]:
    """Two faults of each kind on distinct channels, states 1..8."""
    plan = [
        ("step", 2.0), ("step", 2.0),
        ("random_variation", 2.0), ("random_variation", 2.0),
        ("slow_drift", 3.0), ("slow_drift", 3.0),
        ("sticking", 0.0), ("sticking", 0.0),
    ]
    return [FaultSpec(i + 1, kind, ((i * 5) % n_nodes,), mag) for i, (kind, mag) in enumerate(plan)]


def random_ground_truth(n_nodes: int, density: float = 0.15, self_weight: float = 0.7,
                        weight_range=(0.1, 0.2), seed: int = 0) -> np.ndarray:
    """Sparse VAR(1) coefficient matrix; ``G[i, j] != 0`` means channel j drives channel i."""
    rng = np.random.default_rng(seed)
    g = np.zeros((n_nodes, n_nodes))
    off = ~np.eye(n_nodes, dtype=bool)
    edges = off & (rng.random((n_nodes, n_nodes)) < density)
    g[edges] = rng.uniform(*weight_range, edges.sum()) * rng.choice([-1.0, 1.0], edges.sum())
    np.fill_diagonal(g, self_weight)
    return g


def spectral_radius(g: np.ndarray) -> float:
    return float(np.max(np.abs(np.linalg.eigvals(g)))) if g.size else 0.0


@dataclass
class SynthSpec:
    n_nodes: int = 12
    n_samples: int = 800
    change_point: int = 300
    noise_scale: float = 1.0
    density: float = 0.15
    faults: list[FaultSpec] = field(default_factory=list)
    ground_truth: np.ndarray | None = None
    seed: int = 0

    def __post_init__(self):
        if not self.faults:
            self.faults = default_faults(self.n_nodes)
        if self.ground_truth is None:
            self.ground_truth = random_ground_truth(self.n_nodes, self.density, seed=self.seed)
        self.ground_truth = np.asarray(self.ground_truth, dtype=np.float64)
        if self.ground_truth.shape != (self.n_nodes, self.n_nodes):
            raise ValueError(f"ground truth must be {self.n_nodes}x{self.n_nodes}")
        if not 0 < self.change_point < self.n_samples:
            raise ValueError("change point must lie strictly inside the run")
        for f in self.faults:
            if any(not 0 <= c < self.n_nodes for c in f.channels):
                raise ValueError(f"fault {f.state_id} targets a channel outside [0, {self.n_nodes})")

    @property
    def n_states(self) -> int:
        return 1 + len(self.faults)

    def to_dict(self) -> dict:
        return {
            "n_nodes": self.n_nodes,
            "n_samples": self.n_samples,
            "change_point": self.change_point,
            "noise_scale": self.noise_scale,
            "density": self.density,
            "seed": self.seed,
            "faults": [{"state_id": f.state_id, "kind": f.kind, "channels": list(f.channels),
                        "magnitude": f.magnitude} for f in self.faults],
            "ground_truth": self.ground_truth.tolist(),
        }


class UnstableProcessError(ValueError):
    def __init__(self, radius: float):
        super().__init__(f"ground-truth matrix is unstable: spectral radius {radius:.6f} >= 1")
        self.radius = radius


def simulate_run(spec: SynthSpec, fault: FaultSpec | None, rng: np.random.Generator, burn_in: int = 100) -> np.ndarray:
    """One ``[T, N]`` trajectory of ``x_t = G x_{t-1} + e_t`` with an optional fault."""
    g = spec.ground_truth
    n, total = spec.n_nodes, spec.n_samples
    noise = rng.normal(0.0, spec.noise_scale, (burn_in + total, n))
    extra = rng.normal(0.0, 1.0, (total, n))
    x = np.zeros(n)
    for t in range(burn_in):
        x = g @ x + noise[t]
    out = np.empty((total, n))
    cp = spec.change_point
    chans = list(fault.channels) if fault else []
    for t in range(total):
        x = g @ x + noise[burn_in + t]
        if fault is not None and t >= cp:
            if fault.kind == "step":
                x[chans] += fault.magnitude
            elif fault.kind == "random_variation":
                x[chans] += fault.magnitude * extra[t, chans]
            elif fault.kind == "slow_drift":
                x[chans] += fault.magnitude * (t - cp + 1) / (total - cp)
            else:
                x[chans] = out[cp - 1, chans]
        out[t] = x
    return out


def generate_synthetic(spec: SynthSpec, n_runs_per_state: int = 20) -> tuple[list[SimulationRun], np.ndarray]:
    """Normal plus faulty runs of the configured process, and its ground-truth matrix."""
    radius = spectral_radius(spec.ground_truth)
    if radius >= 1:
        raise UnstableProcessError(radius)
    rng = np.random.default_rng(spec.seed)
    runs = []
    states: list[FaultSpec | None] = [None] + list(spec.faults)
    for fault in states:
        state = 0 if fault is None else fault.state_id
        for k in range(n_runs_per_state):
            samples = simulate_run(spec, fault, rng)
            cp = spec.change_point if fault is not None else 0
            runs.append(SimulationRun(f"s{state}_r{k}", state, cp, samples))
    return runs, spec.ground_truth.copy()


# ---------------------------------------------------------------------------
# manifest
# ---------------------------------------------------------------------------


def dataset_manifest(n_channels: int, n_states: int, window: int, stride: int, change_point: int,
                     stats: NormStats, split_seed: int) -> str:
    return json.dumps({
        "n_channels": n_channels,
        "n_states": n_states,
        "window": window,
        "stride": stride,
        "change_point": change_point,
        "normalization": stats.to_dict(),
        "split_seed": split_seed,
    }, indent=2)
