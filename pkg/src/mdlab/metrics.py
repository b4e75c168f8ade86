"""Accuracy/AUC aggregates and decision-boundary grids."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.stats import rankdata

from .errors import DimensionError, UndefinedMetricError
from .models import Model, predict


@dataclass
class MetricRecord:
    """Per-domain scores with macro (unweighted) and micro (pooled) aggregates."""

    per_domain: list[float]
    average: float
    worst: float
    best: float
    pooled: float | None = None
    kind: str = "accuracy"

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "per_domain": list(self.per_domain),
            "average": self.average,
            "worst": self.worst,
            "best": self.best,
            "pooled": self.pooled,
        }


def accuracy_metrics(predictions: Sequence[np.ndarray], labels: Sequence[np.ndarray]) -> MetricRecord:
    """Per-domain accuracy, their unweighted mean, min and max, plus the pooled accuracy."""
    if len(predictions) != len(labels) or not predictions:
        raise DimensionError("need one prediction array per domain")
    accs, correct, total = [], 0, 0
    for p, y in zip(predictions, labels):
        p, y = np.asarray(p), np.asarray(y)
        if p.shape != y.shape or p.size == 0:
            raise DimensionError(f"prediction/label shapes differ or are empty: {p.shape} vs {y.shape}")
        hits = int(np.sum(p == y))
        accs.append(hits / y.size)
        correct += hits
        total += y.size
    return summarize(accs, pooled=correct / total)


def summarize(values: Sequence[float], pooled: float | None = None, kind: str = "accuracy") -> MetricRecord:
    vals = [float(v) for v in values]
    return MetricRecord(vals, float(np.mean(vals)), min(vals), max(vals), pooled, kind)


def auc(scores, labels) -> float:
    """Mann-Whitney AUC via rank sums; tied scores share their mid-rank."""
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    y = np.asarray(labels).reshape(-1)
    if s.shape != y.shape:
        raise DimensionError(f"scores {s.shape} and labels {y.shape} differ")
    pos = y == 1
    n_pos = int(pos.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUC needs both positive and negative labels")
    ranks = rankdata(s, method="average")
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def auc_aggregates(scores: Sequence[np.ndarray], labels: Sequence[np.ndarray]) -> tuple[float, float]:
    """``(AUC_d, AUC_s)``: mean of per-domain AUCs, and AUC over all samples pooled."""
    per = [auc(s, y) for s, y in zip(scores, labels)]
    pooled = auc(np.concatenate([np.ravel(s) for s in scores]), np.concatenate([np.ravel(y) for y in labels]))
    return float(np.mean(per)), pooled


def auc_metrics(scores: Sequence[np.ndarray], labels: Sequence[np.ndarray]) -> MetricRecord:
    per = [auc(s, y) for s, y in zip(scores, labels)]
    _, pooled = auc_aggregates(scores, labels)
    return summarize(per, pooled=pooled, kind="auc")


# ---------------------------------------------------------------------------
# decision boundaries

@dataclass
class BoundaryGrid:
    """Predicted class on a ``resolution x resolution`` grid, one grid per domain head."""

    xs: np.ndarray
    ys: np.ndarray
    predictions: np.ndarray  # [T, resolution, resolution], row = y index
    accuracy: list[float]
    names: list[str] = field(default_factory=list)

    @property
    def resolution(self) -> int:
        return len(self.xs)

    @property
    def conflict_mask(self) -> np.ndarray:
        """Cells where the domain heads do not all agree."""
        p = self.predictions
        return np.any(p != p[:1], axis=0)

    @property
    def conflict_cells(self) -> int:
        return int(self.conflict_mask.sum())

    def domain_csv(self, t: int) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["x", "y", "domain", "predicted_class", "in_conflict"])
        conflict = self.conflict_mask
        name = self.names[t] if self.names else str(t)
        for i, yv in enumerate(self.ys):
            for j, xv in enumerate(self.xs):
                w.writerow([repr(float(xv)), repr(float(yv)), name, int(self.predictions[t, i, j]), int(conflict[i, j])])
        return buf.getvalue()


def default_extents(features: Sequence[np.ndarray], pad: float = 0.1) -> tuple[float, float, float, float]:
    pts = np.concatenate(features)
    lo, hi = pts.min(axis=0), pts.max(axis=0)
    span = np.where(hi > lo, hi - lo, 1.0)
    lo, hi = lo - pad * span, hi + pad * span
    return float(lo[0]), float(hi[0]), float(lo[1]), float(hi[1])


def boundary_grid(
    model: Model,
    extents: tuple[float, float, float, float] | None = None,
    resolution: int = 200,
    data=None,
) -> BoundaryGrid:
    """Evaluate every domain head at cell centers of a 2-d grid.

    ``data`` (a :class:`~mdlab.data.DomainDataset`) supplies the default
    extents (bounding box padded by 10%) and each domain's test accuracy.
    """
    if model.spec.input_dim != 2:
        raise DimensionError("decision boundaries need a 2-d input space")
    if extents is None:
        if data is None:
            raise DimensionError("need extents or data")
        extents = default_extents(data.features)
    x0, x1, y0, y1 = extents
    dx, dy = (x1 - x0) / resolution, (y1 - y0) / resolution
    xs = x0 + dx * (np.arange(resolution) + 0.5)
    ys = y0 + dy * (np.arange(resolution) + 0.5)
    gx, gy = np.meshgrid(xs, ys)
    pts = np.stack([gx.ravel(), gy.ravel()], axis=1)
    T = model.spec.num_domains
    preds = np.stack([predict(model, pts, t).reshape(resolution, resolution) for t in range(T)])
    acc = []
    if data is not None:
        for t in range(T):
            x, y = data.split(t, "test")
            if len(y) == 0:
                x, y = data.split(t, "all")
            acc.append(float(np.mean(predict(model, x, t) == y)))
    names = list(data.names) if data is not None else []
    return BoundaryGrid(xs, ys, preds, acc, names)

