"""Accuracy, precision-recall sweep, AUC / F1, and per-stage latency measurement."""

from __future__ import annotations

import json
from collections.abc import Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from .appearance import VladParams
from .core import ObjectObservation, RoomDatabase
from .errors import UsageError
from .geometry import GeometryNetParams
from .relocalizer import RelocConfig, RelocResult, StageTimes, relocalize

DEFAULT_THRESHOLDS = tuple(np.linspace(0.0, 1.0, 101).round(10).tolist())
STAGES = ("encode", "appearance", "geometry", "overall")


def accuracy(results: Sequence[tuple[RelocResult, str]]) -> float:
    """Fraction of queries whose top-ranked room is the true room."""
    if len(results) == 0:
        raise UsageError("accuracy of an empty query set")
    return sum(r.top == truth for r, truth in results) / len(results)


def normalized_candidates(result: RelocResult, true_room: str) -> list[tuple[str, float, bool]]:
    """Min-max normalize one query's final scores over its candidate rooms.

    A query whose candidates all tie maps every candidate to 1.
    """
    if not result.ranked:
        return []
    scores = np.array([s for _, s in result.ranked], dtype=np.float64)
    lo, hi = scores.min(), scores.max()
    norm = (scores - lo) / (hi - lo) if hi > lo else np.ones_like(scores)
    return [(room, float(v), room == true_room) for (room, _), v in zip(result.ranked, norm)]


@dataclass(frozen=True)
class PRPoint:
    threshold: float
    precision: float
    recall: float

    @property
    def f1(self) -> float:
        s = self.precision + self.recall
        return 0.0 if s == 0 else 2 * self.precision * self.recall / s


@dataclass(frozen=True)
class PRCurve:
    points: list[PRPoint]
    auc: float
    best_f1: float


def pr_counts(scored: Sequence[tuple[str, float, bool]], threshold: float) -> tuple[int, int, int]:
    """(TP, FP, FN) when every candidate with score >= threshold counts as a match."""
    scores = np.array([s for _, s, _ in scored], dtype=np.float64)
    truth = np.array([m for *_, m in scored], dtype=bool)
    pred = scores >= threshold
    return int(np.sum(pred & truth)), int(np.sum(pred & ~truth)), int(np.sum(~pred & truth))


def pr_auc(points: Sequence[PRPoint]) -> float:
    """Trapezoid area under precision over recall.

    Points are traced from the highest threshold down; the curve is extended
    flat to recall 0 from its lowest-recall point.
    """
    if not points:
        return 0.0
    ordered = sorted(points, key=lambda p: (p.recall, -p.threshold))
    rec = np.array([0.0] + [p.recall for p in ordered])
    prec = np.array([ordered[0].precision] + [p.precision for p in ordered])
    return float(np.sum(np.diff(rec) * (prec[1:] + prec[:-1]) / 2.0))


def pr_sweep(
    scored: Sequence[tuple[str, float, bool]], thresholds: Sequence[float] = DEFAULT_THRESHOLDS
) -> PRCurve:
    """One-to-many matching over (room, normalized score, is_match) candidates."""
    truth = np.array([m for *_, m in scored], dtype=bool)
    if not truth.any():
        raise UsageError("precision-recall needs at least one positive candidate")
    scores = np.array([s for _, s, _ in scored], dtype=np.float64)
    n_pos = int(truth.sum())
    points = []
    for rho in thresholds:
        pred = scores >= rho
        tp = int(np.sum(pred & truth))
        fp = int(np.sum(pred & ~truth))
        precision = tp / (tp + fp) if tp + fp else 1.0
        points.append(PRPoint(float(rho), precision, tp / n_pos))
    return PRCurve(points, pr_auc(points), max(p.f1 for p in points))


@dataclass
class EvalReport:
    n_queries: int
    accuracy: float
    auc: float
    best_f1: float
    geometry_fraction: float  # share of queries that took the geometry path
    pr_points: list[PRPoint]
    latency_ms: dict[str, float] = field(default_factory=dict)

    def to_dict(self, include_timing: bool = False) -> dict:
        d = {
            "version": 1,
            "n_queries": self.n_queries,
            "accuracy": self.accuracy,
            "auc": self.auc,
            "best_f1": self.best_f1,
            "geometry_fraction": self.geometry_fraction,
            "pr": [asdict(p) for p in self.pr_points],
        }
        if include_timing:
            d["latency_ms"] = self.latency_ms
        return d

    def dumps(self, include_timing: bool = False) -> str:
        return json.dumps(self.to_dict(include_timing), indent=1) + "\n"

    def pr_table(self) -> str:
        rows = ["rho,precision,recall"]
        rows += [f"{p.threshold!r},{p.precision!r},{p.recall!r}" for p in self.pr_points]
        return "\n".join(rows) + "\n"


def _mean_latencies(times: Sequence[StageTimes], used: Sequence[bool]) -> dict[str, float]:
    if not times:
        return {s: 0.0 for s in STAGES}
    out = {s: 1e3 * float(np.mean([getattr(t, s) for t in times])) for s in STAGES if s != "geometry"}
    geo = [t.geometry for t, u in zip(times, used) if u]
    # amortized over the queries that actually ran the geometry network
    out["geometry"] = 1e3 * float(np.mean(geo)) if geo else 0.0
    return {s: out[s] for s in STAGES}


def time_stages(
    db: RoomDatabase,
    queries: Sequence[Sequence[ObjectObservation]],
    vlad: VladParams,
    geom: GeometryNetParams | None,
    cfg: RelocConfig = RelocConfig(),
    warmup: int = 3,
) -> tuple[dict[str, float], list[RelocResult]]:
    """Mean per-stage latency in milliseconds over single-threaded queries."""
    for q in queries[:warmup]:
        relocalize(q, db, vlad, geom, cfg)
    times, results = [], []
    for q in queries:
        t = StageTimes()
        results.append(relocalize(q, db, vlad, geom, cfg, times=t))
        times.append(t)
    return _mean_latencies(times, [r.used_geometry for r in results]), results


def evaluate(
    db: RoomDatabase,
    queries: Sequence[tuple[Sequence[ObjectObservation], str]],
    vlad: VladParams,
    geom: GeometryNetParams | None,
    cfg: RelocConfig = RelocConfig(),
    thresholds: Sequence[float] = DEFAULT_THRESHOLDS,
    jobs: int = 1,
) -> EvalReport:
    """Run every query and reduce to an EvalReport.

    Latencies are only measured with ``jobs == 1``; parallel runs report none.
    """
    if not queries:
        raise UsageError("no queries to evaluate")
    obs_lists = [q for q, _ in queries]
    truths = [t for _, t in queries]
    if jobs == 1:
        latency, results = time_stages(db, obs_lists, vlad, geom, cfg)
    else:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(lambda q: relocalize(q, db, vlad, geom, cfg), obs_lists))
        latency = {}
    pairs = list(zip(results, truths))
    scored = [c for r, t in pairs for c in normalized_candidates(r, t)]
    curve = pr_sweep(scored, thresholds)
    return EvalReport(
        n_queries=len(pairs),
        accuracy=accuracy(pairs),
        auc=curve.auc,
        best_f1=curve.best_f1,
        geometry_fraction=float(np.mean([r.used_geometry for r in results])),
        pr_points=curve.points,
        latency_ms=latency,
    )
