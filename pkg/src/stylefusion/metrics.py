"""Exact-arithmetic consistency, depth and style metrics for multiview feature stacks.

These are stand-ins for network-based scores: the cycle metric replaces a
learned multiview consistency score, ``depth_delta`` compares exact synthetic
depth fields (or a linear depth probe's readout) instead of a monocular
depth network, and ``style_alignment`` compares channel statistics instead of
image embeddings. Every report records this in its metadata.

All "L2" values are root-mean-square differences over the entries of a view,
then averaged over pairs or views.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .tensor_core import DomainError, FeatureMap, ShapeError, as_array

SUBSTITUTE_NOTE = "desk-scale analog; not comparable to network-based scores"


@dataclass
class MetricReport:
    """``aggregate == scale * mean(per_view)``."""

    name: str
    aggregate: float
    per_view: list[float]
    scale: float = 1.0
    metadata: dict = field(default_factory=dict)

    def csv_rows(self):
        for i, v in enumerate(self.per_view):
            yield [self.name, repr(self.aggregate), i, repr(float(v))]


def _report(name: str, per_view, scale: float = 1.0, **meta) -> MetricReport:
    per_view = [float(v) for v in per_view]
    meta.setdefault("note", SUBSTITUTE_NOTE)
    meta.setdefault("n_views", len(per_view))
    return MetricReport(name, float(scale * np.mean(per_view)), per_view, scale, meta)


def _views_first(x) -> np.ndarray:
    """FeatureMaps put views on axis 1; plain arrays are taken as views-first."""
    if isinstance(x, FeatureMap):
        return np.ascontiguousarray(np.moveaxis(x.data, 1, 0))
    return np.asarray(x, dtype=np.float64)


def _rms(a: np.ndarray) -> float:
    return float(np.sqrt(np.mean(a * a)))


def cycle_consistency(views) -> MetricReport:
    """RMS difference of consecutive views (0,1), ..., (N-2,N-1) and the wrap pair (N-1,0), times 100."""
    v = _views_first(views)
    n = v.shape[0]
    if n < 2:
        raise DomainError(f"cycle consistency needs at least 2 views, got {n}")
    per_pair = [_rms(v[i] - v[(i + 1) % n]) for i in range(n)]
    return _report("cycle_consistency", per_pair, scale=100.0, pairs=[[i, (i + 1) % n] for i in range(n)])


def depth_delta(generated_depths, reference_depths) -> MetricReport:
    g = _views_first(generated_depths)
    r = _views_first(reference_depths)
    if g.shape != r.shape:
        raise ShapeError(f"depth shapes differ: {g.shape} vs {r.shape}")
    return _report("depth_delta", [_rms(g[i] - r[i]) for i in range(g.shape[0])])


def _stats(v: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    x = v.reshape(-1, v.shape[-1])
    return x.mean(axis=0), x.std(axis=0)


def _similarity(a: np.ndarray, b: np.ndarray) -> float:
    mu_a, sd_a = _stats(a)
    mu_b, sd_b = _stats(b)
    dist = np.sqrt(np.mean((mu_a - mu_b) ** 2 + (sd_a - sd_b) ** 2))
    return float(1.0 / (1.0 + dist))


def style_alignment(output, style_ref) -> MetricReport:
    """Similarity 1/(1+d) of per-channel (mean, std), d the RMS over channels of both differences.

    Views are compared pairwise when both stacks have the same view count;
    otherwise one pooled comparison is reported.
    """
    o = _views_first(output)
    s = _views_first(style_ref)
    if o.shape[-1] != s.shape[-1]:
        raise ShapeError(f"channel mismatch: {o.shape[-1]} vs {s.shape[-1]}")
    if o.shape[0] == s.shape[0]:
        return _report("style_alignment", [_similarity(o[i], s[i]) for i in range(o.shape[0])])
    return _report("style_alignment", [_similarity(o, s)], pooled=True)


def content_error(output, content) -> MetricReport:
    """Per-view mean squared difference to the unstylized content."""
    o = _views_first(output)
    c = _views_first(content)
    if o.shape != c.shape:
        raise ShapeError(f"shapes differ: {o.shape} vs {c.shape}")
    return _report("content_mse", [float(np.mean((o[i] - c[i]) ** 2)) for i in range(o.shape[0])])


@dataclass(frozen=True)
class DepthProbe:
    """Linear read-out ``depth = features @ weight + bias`` fit by least squares."""

    weight: np.ndarray
    bias: float

    @classmethod
    def fit(cls, features, depths) -> "DepthProbe":
        x = np.concatenate([as_array(f).reshape(-1, as_array(f).shape[-1]) for f in features])
        y = np.concatenate([as_array(d).reshape(-1) for d in depths])
        design = np.hstack([x, np.ones((x.shape[0], 1))])
        coef, *_ = np.linalg.lstsq(design, y, rcond=None)
        return cls(coef[:-1], float(coef[-1]))

    def __call__(self, features) -> FeatureMap:
        f = as_array(features)
        return FeatureMap((f @ self.weight + self.bias)[..., None])


def write_reports(reports, csv_path, json_path=None) -> None:
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["name", "aggregate", "view_index", "value"])
        for r in reports:
            w.writerows(r.csv_rows())
    if json_path is not None:
        summary = {r.name: {"aggregate": r.aggregate, "scale": r.scale, "metadata": r.metadata} for r in reports}
        Path(json_path).write_text(json.dumps(summary, indent=1, sort_keys=True))
