"""Fault-diagnosis evaluation: per-fault and detection TPR/FPR, average
detection delay, confusion counts, node importance and graph recovery.

Conventions
-----------
* A window is *faulty* when its true label is non-zero; every other window,
  including pre-change windows of faulty runs, counts as normal.
* Per-class FPR is one-vs-rest over all normal windows.
* A faulty run that is never flagged contributes its largest observable
  delay, ``T - change_point``.
"""
from __future__ import annotations

import json
import logging
import math
import warnings
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
from scipy import stats as sps

from .data import SAMPLE_PERIOD_MINUTES, SimulationRun, run_windows
from .graph import AdjacencyMatrix
from .models import count_parameters, predict

logger = logging.getLogger(__name__)

REPORT_VERSION = "fddreport-v1"
CONVENTION = (
    "normal windows = normal runs + pre-change windows of faulty runs; "
    "per-class FPR is one-vs-rest over normal windows; "
    "undetected faulty runs count T - change_point toward ADD"
)


@dataclass
class PredictionStream:
    run_id: str
    state_id: int
    change_point: int
    n_samples: int
    end_index: np.ndarray
    predicted: np.ndarray
    true: np.ndarray

    def __post_init__(self):
        self.end_index = np.asarray(self.end_index, dtype=np.int64)
        self.predicted = np.asarray(self.predicted, dtype=np.int64)
        self.true = np.asarray(self.true, dtype=np.int64)
        if not (len(self.end_index) == len(self.predicted) == len(self.true)):
            raise ValueError("stream arrays must have equal length")
        if np.any(np.diff(self.end_index) <= 0):
            raise ValueError(f"end indices of run {self.run_id} must be strictly increasing")

    def __len__(self) -> int:
        return len(self.end_index)


def classify_stream(model, run: SimulationRun, m: int, batch_size: int = 1024) -> PredictionStream:
    """Stride-1 inference over one (already normalised) run."""
    x, y, ends = run_windows(run, m, 1)
    pred = predict(model, x, batch_size=batch_size) if len(x) else np.empty(0, dtype=np.int64)
    return PredictionStream(run.run_id, run.state_id, run.change_point, run.n_samples, ends, pred, y)


def _stack(streams: Sequence[PredictionStream]) -> tuple[np.ndarray, np.ndarray]:
    if not streams:
        return np.empty(0, dtype=np.int64), np.empty(0, dtype=np.int64)
    return np.concatenate([s.true for s in streams]), np.concatenate([s.predicted for s in streams])


def confusion_matrix(streams: Sequence[PredictionStream], n_classes: int) -> np.ndarray:
    true, pred = _stack(streams)
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (true, pred), 1)
    return cm


def per_fault_metrics(streams: Sequence[PredictionStream], n_classes: int) -> tuple[np.ndarray, np.ndarray]:
    """TPR and FPR for each fault class ``1..C-1`` (index ``c-1``); NaN where undefined."""
    cm = confusion_matrix(streams, n_classes)
    faulty = cm.sum(axis=1)
    normal_total = faulty[0]
    tpr = np.full(n_classes - 1, np.nan)
    fpr = np.full(n_classes - 1, np.nan)
    for c in range(1, n_classes):
        if faulty[c]:
            tpr[c - 1] = cm[c, c] / faulty[c]
        if normal_total:
            fpr[c - 1] = cm[0, c] / normal_total
    return tpr, fpr


def detection_metrics(streams: Sequence[PredictionStream]) -> tuple[float, float]:
    """Binary normal-vs-any-fault TPR and FPR, ignoring which fault was named."""
    true, pred = _stack(streams)
    faulty = true != 0
    flagged = pred != 0
    tpr = float(flagged[faulty].mean()) if faulty.any() else math.nan
    fpr = float(flagged[~faulty].mean()) if (~faulty).any() else math.nan
    return tpr, fpr


def run_delay(stream: PredictionStream) -> int:
    after = (stream.end_index >= stream.change_point) & (stream.predicted != 0)
    hits = np.flatnonzero(after)
    if hits.size == 0:
        return stream.n_samples - stream.change_point
    return int(stream.end_index[hits[0]] - stream.change_point)


def average_detection_delay(streams: Sequence[PredictionStream], change_points: Sequence[int] | None = None) -> float:
    """Mean first-flag delay (in samples) over the faulty runs among ``streams``."""
    faulty = [s for s in streams if s.state_id != 0]
    if change_points is not None:
        cps = list(change_points)
        if len(cps) != len(faulty):
            raise ValueError(f"{len(cps)} change points for {len(faulty)} faulty runs")
        faulty = [PredictionStream(s.run_id, s.state_id, cp, s.n_samples, s.end_index, s.predicted, s.true)
                  for s, cp in zip(faulty, cps)]
    if not faulty:
        return math.nan
    return float(np.mean([run_delay(s) for s in faulty]))


# ---------------------------------------------------------------------------
# report
# ---------------------------------------------------------------------------


def _clean(x):
    if isinstance(x, float) and math.isnan(x):
        return None
    return x


def _unclean(x):
    return math.nan if x is None else float(x)


@dataclass
class FddReport:
    model: str
    n_classes: int
    tpr: list[float]
    fpr: list[float]
    detection_tpr: float
    detection_fpr: float
    add_points: float
    confusion: list[list[int]]
    n_parameters: int | None = None
    sample_period: float = SAMPLE_PERIOD_MINUTES
    convention: str = CONVENTION
    extra: dict = field(default_factory=dict)

    @property
    def add_minutes(self) -> float:
        return self.add_points * self.sample_period

    def to_dict(self) -> dict:
        d = asdict(self)
        d["version"] = REPORT_VERSION
        d["add_minutes"] = self.add_minutes
        for key in ("detection_tpr", "detection_fpr", "add_points", "add_minutes"):
            d[key] = _clean(d[key])
        d["tpr"] = [_clean(v) for v in self.tpr]
        d["fpr"] = [_clean(v) for v in self.fpr]
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_json(cls, text: str) -> "FddReport":
        d = json.loads(text)
        if d.pop("version", None) != REPORT_VERSION:
            raise ValueError("not an fddreport-v1 document")
        d.pop("add_minutes", None)
        for key in ("detection_tpr", "detection_fpr", "add_points"):
            d[key] = _unclean(d[key])
        d["tpr"] = [_unclean(v) for v in d["tpr"]]
        d["fpr"] = [_unclean(v) for v in d["fpr"]]
        return cls(**d)

    def summary_row(self) -> str:
        params = "" if self.n_parameters is None else str(self.n_parameters)
        return (f"{self.model:<28} {_fmt(self.detection_tpr):>13} {_fmt(self.detection_fpr):>13} "
                f"{_fmt(self.add_points, 2):>8} {params:>12}")

    def to_text(self) -> str:
        lines = [f"# {self.convention}", summary_header(), self.summary_row(), "",
                 f"{'Fault ID':>8}  TPR/FPR"]
        for c, (t, f) in enumerate(zip(self.tpr, self.fpr), start=1):
            lines.append(f"{c:>8}  {_fmt(t, 2)}/{_fmt(f, 2)}")
        lines.append(f"\nADD: {_fmt(self.add_points, 2)} points = {_fmt(self.add_minutes, 2)} minutes")
        return "\n".join(lines) + "\n"


def summary_header() -> str:
    return f"{'Model':<28} {'Detection TPR':>13} {'Detection FPR':>13} {'ADD':>8} {'Num. params':>12}"


def _fmt(x: float, digits: int = 4) -> str:
    return "n/a" if x is None or (isinstance(x, float) and math.isnan(x)) else f"{x:.{digits}f}"


def build_report(streams: Sequence[PredictionStream], n_classes: int, model: str = "model",
                 n_parameters: int | None = None) -> FddReport:
    tpr, fpr = per_fault_metrics(streams, n_classes)
    dtpr, dfpr = detection_metrics(streams)
    return FddReport(
        model=model,
        n_classes=n_classes,
        tpr=tpr.tolist(),
        fpr=fpr.tolist(),
        detection_tpr=dtpr,
        detection_fpr=dfpr,
        add_points=average_detection_delay(streams),
        confusion=confusion_matrix(streams, n_classes).tolist(),
        n_parameters=n_parameters,
    )


def evaluate_model(model, runs: Sequence[SimulationRun], m: int, n_classes: int, name: str = "model") -> FddReport:
    streams = [classify_stream(model, r, m) for r in runs]
    return build_report(streams, n_classes, name, count_parameters(model))


def mean_report(reports: Sequence[FddReport], model: str | None = None) -> FddReport:
    """Element-wise mean of rates and ADD; confusion counts are summed."""
    if not reports:
        raise ValueError("no reports to average")
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)  # all-NaN columns stay NaN
        tpr = np.nanmean([r.tpr for r in reports], axis=0) if _any_finite([r.tpr for r in reports]) else None
        fpr = np.nanmean([r.fpr for r in reports], axis=0) if _any_finite([r.fpr for r in reports]) else None
    first = reports[0]
    return FddReport(
        model=model or f"{first.model} (mean of {len(reports)})",
        n_classes=first.n_classes,
        tpr=(tpr if tpr is not None else np.full(first.n_classes - 1, np.nan)).tolist(),
        fpr=(fpr if fpr is not None else np.full(first.n_classes - 1, np.nan)).tolist(),
        detection_tpr=float(np.mean([r.detection_tpr for r in reports])),
        detection_fpr=float(np.mean([r.detection_fpr for r in reports])),
        add_points=float(np.mean([r.add_points for r in reports])),
        confusion=np.sum([r.confusion for r in reports], axis=0).tolist(),
        n_parameters=first.n_parameters,
    )


def _any_finite(rows) -> bool:
    return bool(np.isfinite(np.asarray(rows, dtype=float)).any())


# ---------------------------------------------------------------------------
# graphs
# ---------------------------------------------------------------------------


def node_importance(a) -> np.ndarray:
    """Per-node sum of absolute outgoing edge weights (self-loop excluded)."""
    w = a.weights if isinstance(a, AdjacencyMatrix) else np.asarray(a, dtype=np.float64)
    w = np.abs(w)
    return w.sum(axis=1) - np.diag(w)


def importance_rank_correlation(a, b) -> float:
    return float(sps.spearmanr(node_importance(a), node_importance(b)).statistic)


def _offdiag_edges(weights: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    n = weights.shape[0]
    rows, cols = np.nonzero(~np.eye(n, dtype=bool))
    return rows, cols


def graph_recovery_precision(a, g: np.ndarray, k: int) -> float:
    """Fraction of the ``k`` strongest learned off-diagonal edges present in ``g``."""
    w = a.weights if isinstance(a, AdjacencyMatrix) else np.asarray(a, dtype=np.float64)
    g = np.asarray(g, dtype=np.float64)
    if w.shape != g.shape:
        raise ValueError(f"shape mismatch: learned {w.shape}, ground truth {g.shape}")
    rows, cols = _offdiag_edges(w)
    truth = g[rows, cols] != 0
    if truth.sum() == 0:
        raise ValueError("ground truth has no off-diagonal edges")
    if not 1 <= k <= truth.sum():
        raise ValueError(f"k={k} must lie in [1, {int(truth.sum())}] (true edge count)")
    order = np.argsort(-np.abs(w[rows, cols]), kind="stable")[:k]
    return float(truth[order].mean())


def random_recovery_expectation(g: np.ndarray, k: int, trials: int = 10_000, seed: int = 0) -> float:
    """Monte-Carlo precision of choosing ``k`` off-diagonal edges uniformly at random."""
    g = np.asarray(g, dtype=np.float64)
    rows, cols = _offdiag_edges(g)
    truth = g[rows, cols] != 0
    rng = np.random.default_rng(seed)
    hits = 0
    for _ in range(trials):
        hits += truth[rng.choice(truth.size, size=k, replace=False)].sum()
    return hits / (trials * k)


def importance_csv(importance: np.ndarray) -> str:
    lines = ["node,importance"] + [f"{i},{repr(float(v))}" for i, v in enumerate(importance)]
    return "\n".join(lines) + "\n"


def heatmap_csv(a: AdjacencyMatrix) -> str:
    lines = ["row,col,weight"]
    for i, row in enumerate(a.weights):
        lines.extend(f"{i},{j},{repr(float(v))}" for j, v in enumerate(row))
    return "\n".join(lines) + "\n"
