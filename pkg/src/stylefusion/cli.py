"""Command-line front end.

Commands: gen-data, train, fuse, interpolate, localize, eval, gradcheck, sweep-tau.
Exit codes: 0 ok, 2 missing input file, 3 invalid configuration (or refused
overwrite), 4 numeric failure. Failures print one JSON line on stderr.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import os
import shutil
import sys
from pathlib import Path

import numpy as np

from . import pgm
from .autodiff import micro_instance, model_forward
from .fusion import DEFAULT_TAU, MASK_MODES, PAIRINGS, BLOCKS, FusionConfig, StyleMask, load_config
from .metrics import write_reports
from .pipeline import evaluate, fit_depth_probe, heldout_samples, sweep_tau, write_sweep
from .synth import DiskDataset, make_dataset, write_dataset
from .tensor_core import DomainError, FeatureMap, NumericError, ShapeError, write_feature_map
from .trainer import (
    TrainConfig,
    cfg_combine,
    content_projections,
    load_checkpoint,
    save_checkpoint,
    train_style_path,
)

EXIT_MISSING = 2
EXIT_CONFIG = 3
EXIT_NUMERIC = 4
MAX_TAU = 4.0
DATA_ENV = "SFA_DATA_DIR"

log = logging.getLogger("stylefusion")


class CliError(Exception):
    def __init__(self, code: int, kind: str, message: str):
        super().__init__(message)
        self.code = code
        self.kind = kind


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError(EXIT_CONFIG, "usage", message)


def _fail(code, kind, message):
    raise CliError(code, kind, message)


def _need(path, what: str) -> Path:
    if path is None:
        _fail(EXIT_CONFIG, "config", f"{what} is required")
    p = Path(path)
    if not p.exists():
        _fail(EXIT_MISSING, "missing_file", f"{what} not found: {p}")
    return p


def _writable(path, force: bool, is_dir: bool = False) -> Path:
    p = Path(path)
    if p.exists():
        if not force:
            _fail(EXIT_CONFIG, "exists", f"{p} exists; pass --force to overwrite")
        if is_dir and p.is_dir():
            shutil.rmtree(p)
        elif p.is_file():
            p.unlink()
    if is_dir:
        p.mkdir(parents=True)
    else:
        p.parent.mkdir(parents=True, exist_ok=True)
    return p


# -- configuration ----------------------------------------------------------------


def _fusion_config(args) -> FusionConfig:
    base = FusionConfig()
    if args.config:
        base, _ = load_config(_need(args.config, "config file"))
    kw = {}
    for name in ("tau", "alpha", "mask_mode", "pairing_mode"):
        val = getattr(args, name, None)
        if val is not None:
            kw[name] = val
    if getattr(args, "mask", None):
        kw["mask"] = StyleMask.from_pgm(_need(args.mask, "mask file"))
    cfg = base.with_(**kw)
    if not cfg.tau <= MAX_TAU:
        _fail(EXIT_CONFIG, "config", f"tau must lie in (0, {MAX_TAU}], got {cfg.tau}")
    return cfg


def _data(args) -> DiskDataset:
    root = args.data or os.environ.get(DATA_ENV)
    root = _need(root, f"dataset directory (--data or ${DATA_ENV})")
    _need(root / "manifest.json", "dataset manifest")
    return DiskDataset(root)


def _sample(ds: DiskDataset, k: int):
    if not 0 <= k < len(ds):
        _fail(EXIT_CONFIG, "config", f"sample index {k} outside [0, {len(ds)})")
    return ds[k]


def _cfg_weight(args, header) -> float:
    w = args.cfg_weight if args.cfg_weight is not None else header["config"]["cfg_weight"]
    if not (math.isfinite(w) and w > 0):
        _fail(EXIT_CONFIG, "config", f"cfg weight must be positive, got {w}")
    return w


# -- commands -----------------------------------------------------------------------


def cmd_gen_data(args):
    ds = make_dataset(args.identities, args.styles, args.views, args.seed)
    out = _writable(args.out, args.force, is_dir=True)
    write_dataset(ds, out)
    return {"samples": len(ds), "out": str(out)}


def cmd_train(args):
    ds = _data(args)
    kw = {"seed": args.seed, "views_per_batch": args.views or ds.n_views}
    for flag, field in (("steps", "steps"), ("lr", "learning_rate"), ("cfg_weight", "cfg_weight"),
                        ("pairing_mode", "pairing_mode")):
        if getattr(args, flag) is not None:
            kw[field] = getattr(args, flag)
    cfg = TrainConfig(**kw)
    out = _writable(args.out, args.force)
    content = content_projections(ds.channels, args.heads, scale=ds.manifest["scale"])
    state = train_style_path(ds, cfg, content)
    save_checkpoint(out, state, cfg, {"data_scale": ds.manifest["scale"]})
    return {"steps": state.step, "probe_initial": state.probe_initial, "probe_final": state.probe_final,
            "out": str(out)}


def _write_outputs(out: Path, features: FeatureMap, mass: np.ndarray):
    for v in range(features.views):
        view = FeatureMap(features.data[:, v : v + 1])
        write_feature_map(out / f"view_{v:02d}.sfa", view)
        pgm.write_pgm(out / f"view_{v:02d}.pgm", pgm.to_preview(view.data[0, 0, :, :, 0]))
    with open(out / "block_masses.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["view", "head", *BLOCKS])
        per = mass.mean(axis=2)
        for v in range(per.shape[0]):
            for h in range(per.shape[1]):
                w.writerow([v, h, *(repr(float(x)) for x in per[v, h])])


def _run_fusion(args, cfg: FusionConfig, second=None):
    params, content, header = load_checkpoint(_need(args.checkpoint, "checkpoint"))
    ds = _data(args)
    sample = _sample(ds, args.sample)
    w = _cfg_weight(args, header)
    sv2 = _sample(ds, second).style_views if second is not None else None
    run = dict(cfg=cfg, style_views_2=sv2, baseline=args.baseline)
    cond = model_forward(params, content, sample.content_views, sample.style_views, **run)
    features = cond.features
    if w != 1.0:
        uncond = model_forward(params, content, sample.content_views, sample.style_views, drop_style=True, **run)
        features = cfg_combine(uncond.features, cond.features, w)
    out = _writable(args.out, args.force, is_dir=True)
    _write_outputs(out, features, cond.block_mass)
    return {"views": features.views, "out": str(out), **cond.attention_summary}


def cmd_fuse(args):
    return _run_fusion(args, _fusion_config(args).with_(alpha=None))


def cmd_interpolate(args):
    cfg = _fusion_config(args)
    if cfg.alpha is None:
        _fail(EXIT_CONFIG, "config", "interpolate needs --alpha")
    if args.sample2 is None:
        _fail(EXIT_CONFIG, "config", "interpolate needs --sample2")
    return _run_fusion(args, cfg, second=args.sample2)


def cmd_localize(args):
    cfg = _fusion_config(args)
    if cfg.mask is None:
        _fail(EXIT_CONFIG, "config", "localize needs --mask (or mask_path in --config)")
    return _run_fusion(args, cfg.with_(alpha=None))


def _eval_setup(args):
    params, content, header = load_checkpoint(_need(args.checkpoint, "checkpoint"))
    ds = _data(args)
    synth = ds.synthetic()
    return params, content, header, ds, heldout_samples(synth), fit_depth_probe(ds)


def cmd_eval(args):
    params, content, header, _, samples, probe = _eval_setup(args)
    cfg = _fusion_config(args)
    reports = evaluate(params, content, samples, cfg.with_(alpha=None, mask=None), probe, _cfg_weight(args, header))
    out = _writable(args.out, args.force, is_dir=True)
    write_reports(list(reports.values()), out / "metrics.csv", out / "summary.json")
    return {name: r.aggregate for name, r in reports.items()}


def cmd_sweep_tau(args):
    params, content, header, _, samples, probe = _eval_setup(args)
    try:
        taus = [float(t) for t in args.taus.split(",")]
    except ValueError:
        _fail(EXIT_CONFIG, "config", f"cannot parse --taus {args.taus!r}")
    if not taus or any(not (0 < t <= MAX_TAU) for t in taus):
        _fail(EXIT_CONFIG, "config", f"every tau must lie in (0, {MAX_TAU}]")
    base = _fusion_config(args).with_(alpha=None, mask=None)
    rows = sweep_tau(params, content, samples, taus, base, probe, _cfg_weight(args, header))
    out = _writable(args.out, args.force)
    write_sweep(rows, out)
    return {"rows": len(rows), "out": str(out)}


def cmd_gradcheck(args):
    reports = [micro_instance(args.seed + i).check() for i in range(args.instances)]
    worst = max(r.max_rel_err for r in reports)
    if args.out:
        out = _writable(args.out, args.force)
        reports[int(np.argmax([r.max_rel_err for r in reports]))].to_csv(out)
    return {"instances": len(reports), "max_rel_err": worst, "passed": bool(worst <= 1e-4)}


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "fuse": cmd_fuse,
    "interpolate": cmd_interpolate,
    "localize": cmd_localize,
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
    "sweep-tau": cmd_sweep_tau,
}


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="stylefusion", description="Style fusion attention on synthetic multiview features.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, out_required=True):
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--out", required=out_required)
        sp.add_argument("--force", action="store_true")

    def fusion_flags(sp):
        sp.add_argument("--config")
        sp.add_argument("--tau", type=float, help=f"key scale, default {DEFAULT_TAU}")
        sp.add_argument("--alpha", type=float)
        sp.add_argument("--mask")
        sp.add_argument("--mask-mode", choices=MASK_MODES)
        sp.add_argument("--pairing-mode", choices=PAIRINGS)
        sp.add_argument("--cfg-weight", type=float, help="default: the checkpoint's training value")
        sp.add_argument("--checkpoint", required=True)
        sp.add_argument("--data")

    sp = sub.add_parser("gen-data", help="write a synthetic dataset directory")
    common(sp)
    sp.add_argument("--identities", type=int, default=150)
    sp.add_argument("--styles", type=int, default=6)
    sp.add_argument("--views", type=int, default=16)

    sp = sub.add_parser("train", help="fine-tune the style path")
    common(sp)
    sp.add_argument("--data")
    sp.add_argument("--steps", type=int)
    sp.add_argument("--lr", type=float)
    sp.add_argument("--cfg-weight", type=float)
    sp.add_argument("--views", type=int, help="views per batch (default: all views of a sample)")
    sp.add_argument("--pairing-mode", choices=PAIRINGS)
    sp.add_argument("--heads", type=int, default=2)

    for name in ("fuse", "interpolate", "localize"):
        sp = sub.add_parser(name)
        common(sp)
        fusion_flags(sp)
        sp.add_argument("--sample", type=int, default=0)
        sp.add_argument("--baseline", action="store_true", help="unmodified path (no tau, mask)")
        if name == "interpolate":
            sp.add_argument("--sample2", type=int)

    sp = sub.add_parser("eval", help="metrics on held-out identities")
    common(sp)
    fusion_flags(sp)

    sp = sub.add_parser("sweep-tau", help="metrics across key scales")
    common(sp)
    fusion_flags(sp)
    sp.add_argument("--taus", default="1.0,1.05,1.1")

    sp = sub.add_parser("gradcheck", help="analytic vs finite-difference gradients")
    common(sp, out_required=False)
    sp.add_argument("--instances", type=int, default=20)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr)
        result = COMMANDS[args.command](args)
    except CliError as e:
        return _report_error(e.code, e.kind, str(e))
    except FileNotFoundError as e:
        return _report_error(EXIT_MISSING, "missing_file", str(e))
    except NumericError as e:
        return _report_error(EXIT_NUMERIC, "numeric", str(e))
    except (DomainError, ShapeError, ValueError, KeyError, json.JSONDecodeError) as e:
        return _report_error(EXIT_CONFIG, "config", str(e))
    print(json.dumps({"status": "ok", "command": args.command, **result}, sort_keys=True))
    return 0


def _report_error(code: int, kind: str, message: str) -> int:
    print(json.dumps({"status": "error", "code": code, "kind": kind, "message": message}), file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
