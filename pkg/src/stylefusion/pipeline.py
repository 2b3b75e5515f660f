"""Evaluation on held-out identities and the key-scaling sweep."""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .autodiff import ParamVector, model_logits
from .fusion import BLOCKS, FusionConfig, ProjectionSet
from .metrics import DepthProbe, MetricReport, content_error, cycle_consistency, depth_delta, style_alignment
from .trainer import infer

PROBE_FIT_SAMPLES = 12


def fit_depth_probe(dataset, n: int = PROBE_FIT_SAMPLES) -> DepthProbe:
    """Linear depth read-out fit on unstylized front content views."""
    picks = [dataset[i] for i in range(min(n, len(dataset)))]
    return DepthProbe.fit([s.content_views.data[0] for s in picks], [s.depth_views.data[0] for s in picks])


def heldout_samples(synth, n_domains: int | None = None):
    n_domains = synth.n_styles if n_domains is None else n_domains
    return [synth.heldout(d) for d in range(n_domains)]


def evaluate(params: ParamVector, content: ProjectionSet, samples, fusion: FusionConfig, probe: DepthProbe,
             cfg_weight: float = 1.0) -> dict[str, MetricReport]:
    """Metrics for each sample's guided output, averaged over samples.

    The per_view list of each returned report is the per-view mean across samples.
    """
    per = {k: [] for k in ("style_alignment", "cycle_consistency", "depth_delta", "content_mse")}
    mass = []
    for s in samples:
        out, cond = infer(params, content, s, fusion, cfg_weight)
        per["style_alignment"].append(style_alignment(out, s.style_views))
        per["cycle_consistency"].append(cycle_consistency(out))
        per["depth_delta"].append(depth_delta(probe(out), s.depth_views))
        per["content_mse"].append(content_error(out, s.content_views.stream(0)))
        mass.append(cond.block_mass)
    reports = {}
    for name, reps in per.items():
        pv = np.mean([r.per_view for r in reps], axis=0)
        first = reps[0]
        reports[name] = MetricReport(name, float(np.mean([r.aggregate for r in reps])), pv.tolist(), first.scale,
                                     {**first.metadata, "n_samples": len(reps)})
    m = np.mean([x.mean(axis=(0, 1, 2)) for x in mass], axis=0)
    reports["block_mass"] = MetricReport("block_mass", float(m[2]), m.tolist(), 1.0,
                                         {"blocks": list(BLOCKS), "aggregate": "scaled_style"})
    return reports


def probe_query_flag(params: ParamVector, content: ProjectionSet, sample, fusion: FusionConfig) -> bool:
    """True when query 0 of view 0, head 0 has its largest logit on a positive scaled-style key."""
    row = model_logits(params, content, sample.content_views, sample.style_views, fusion)[0, 0, 0]
    n_lat = sample.content_views.shape[2] * sample.content_views.shape[3]
    n_app = (row.size - n_lat) // 2
    j = int(np.argmax(row))
    return j >= n_lat + n_app and row[j] > 0


@dataclass
class SweepRow:
    tau: float
    style_alignment: float
    cycle_consistency: float
    depth_delta: float
    content_mse: float
    scaled_style_mass: float
    probe_style_max: bool


def sweep_tau(params: ParamVector, content: ProjectionSet, samples, taus, base: FusionConfig,
              probe: DepthProbe, cfg_weight: float = 1.0) -> list[SweepRow]:
    taus = list(taus)
    if not taus or any(not t > 0 for t in taus):
        raise ValueError("sweep needs a non-empty list of positive tau values")
    rows = []
    for t in taus:
        fusion = base.with_(tau=float(t))
        r = evaluate(params, content, samples, fusion, probe, cfg_weight)
        rows.append(SweepRow(
            tau=float(t),
            style_alignment=r["style_alignment"].aggregate,
            cycle_consistency=r["cycle_consistency"].aggregate,
            depth_delta=r["depth_delta"].aggregate,
            content_mse=r["content_mse"].aggregate,
            scaled_style_mass=r["block_mass"].aggregate,
            probe_style_max=probe_query_flag(params, content, samples[0], fusion),
        ))
    return rows


def write_sweep(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["tau", "style_alignment", "cycle_consistency", "depth_delta", "content_mse",
                    "scaled_style_mass", "probe_style_max"])
        for r in rows:
            w.writerow([repr(r.tau), repr(r.style_alignment), repr(r.cycle_consistency), repr(r.depth_delta),
                        repr(r.content_mse), repr(r.scaled_style_mass), int(r.probe_style_max)])
