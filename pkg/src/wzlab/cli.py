"""Command line entry point: ``wzlab {train,sweep,bounds,visualize,report}``.

Exit codes: 0 success, 2 configuration error, 3 run failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import bounds, checkpoint, config, evaluation, trainer
from .sources import KINDS, LAPLACE_SIGN, ConfigError, SourceSpec

log = logging.getLogger("wzlab")

EXIT_OK, EXIT_CONFIG, EXIT_RUN = 0, 2, 3


class RunFailure(RuntimeError):
    pass


def _lambda_list(text: str) -> list[float]:
    try:
        vals = [float(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise ConfigError(f"lambda: cannot parse {text!r}") from None
    if not vals:
        raise ConfigError("lambda: empty --lambda list")
    return vals


def _load_experiment(args) -> config.ExperimentConfig:
    cfg = config.load(args.config)
    lambdas = _lambda_list(args.lambda_) if getattr(args, "lambda_", None) else None
    return config.with_overrides(cfg, seed=args.seed, lambdas=lambdas, out_dir=args.out)


# --- train / sweep ------------------------------------------------------------------

def _read_manifest(path: Path) -> dict | None:
    if not path.exists():
        return None
    try:
        return json.loads(path.read_text())
    except json.JSONDecodeError:
        return None


def _sweep(cfg: config.ExperimentConfig, lambdas, parallel: int = 1) -> int:
    template = cfg.require_train()
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest_path = out / "manifest.json"
    h = cfg.hash
    old = _read_manifest(manifest_path)
    done = {}
    if old and old.get("config_hash") == h:
        done = {r["run_id"]: r for r in old.get("runs", []) if r.get("status") == "ok"}

    records = trainer.lambda_sweep(cfg.source, lambdas, template, cfg.eval_samples,
                                   cfg.eval_seed, cfg.eval_n, parallel, skip=set(done))
    runs = dict(done)
    for rec in records:
        tc = trainer.TrainConfig.from_dict(rec["config"])
        rid = trainer.run_id(tc)
        run_dir = out / "runs" / rid
        entry = {"run_id": rid, "lambda": tc.lam, "seed": tc.seed, "status": rec["status"],
                 "config_hash": cfg.run_hash(tc)}
        if rec["status"] == "ok":
            meta = {"run_id": rid, "lambda": tc.lam, "seed": tc.seed}
            for p in rec["points"]:
                p.meta.update(meta)
            files = [
                checkpoint.save(rec["model"], run_dir / "checkpoint.json", entry["config_hash"],
                                {"seed": tc.seed, "source": cfg.source.to_dict(),
                                 "train": tc.to_dict()}),
                evaluation.export_points(rec["points"], run_dir / "rd_points.csv", entry["config_hash"]),
                evaluation.write_csv(run_dir / "loss_trace.csv", ["epoch", "loss"],
                                     [{"epoch": i, "loss": v} for i, v in enumerate(rec["loss_trace"])],
                                     entry["config_hash"]),
            ]
            entry["files"] = [str(f.relative_to(out)) for f in files]
        else:
            entry["error"] = rec["error"]
        runs[rid] = entry

    points = []
    for rid, entry in runs.items():
        if entry["status"] == "ok":
            points.extend(evaluation.read_points(out / "runs" / rid / "rd_points.csv"))
    # order runs by their primary (cross-entropy) rate; the plug-in row follows its run
    primary = {p.meta["run_id"]: p.rate_bits for p in points if p.rate_kind != evaluation.PLUGIN}
    points.sort(key=lambda p: (primary.get(p.meta["run_id"], np.inf), p.meta["run_id"],
                               p.rate_kind == evaluation.PLUGIN))
    rd = evaluation.export_points(points, out / "rd_points.csv", h)
    (out / "experiment.cfg").write_text(f"# config_hash={h}\n" + config.dumps(cfg))
    files = [rd, out / "experiment.cfg"] + [out / f for e in runs.values() for f in e.get("files", [])]
    ordered = sorted(runs.values(), key=lambda e: e["lambda"])
    evaluation.write_manifest(manifest_path, h, files,
                              {"source": cfg.source.to_dict(), "runs": ordered,
                               "eval": cfg.experiment_dict()["eval"]})
    failed = [e["run_id"] for e in ordered if e["status"] != "ok"]
    if failed:
        raise RunFailure(f"{len(failed)} run(s) failed: {', '.join(failed)}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _load_experiment(args)
    train = cfg.require_train()
    return _sweep(cfg, [train.lam])


def cmd_sweep(args) -> int:
    cfg = _load_experiment(args)
    if args.parallel < 1:
        raise ConfigError("parallel: must be >= 1")
    return _sweep(cfg, cfg.sweep_lambdas(), args.parallel)


# --- bounds -------------------------------------------------------------------------

def cmd_bounds(args) -> int:
    out = Path(args.out or "bounds")
    if args.method in ("wz-gaussian", "gaussian", "ba"):
        if args.source not in KINDS or args.source == LAPLACE_SIGN and args.method != "ba":
            raise ConfigError("source: a Gaussian source kind is required for this method")
        noise = args.noise_var if args.noise_var is not None else 0.0
        try:
            spec = SourceSpec(args.source, noise)
        except ConfigError as exc:
            raise ConfigError(f"noise_var: {exc}") from None
    params = {"method": args.method, "source": args.source, "noise_var": args.noise_var,
              "points": args.points, "cells": args.cells}
    h = trainer.config_hash(params)
    if args.method == "wz-gaussian":
        var = spec.cond_var_x_given_y
        D = var * np.logspace(-3, 0, args.points)
        curve = bounds.RdCurve([bounds.wz_gaussian_rate(d, var) for d in D], D, "wz_gaussian",
                               spec.kind, {"cond_var": var})
    elif args.method == "gaussian":
        D = spec.x_var * np.logspace(-3, 0, args.points)
        curve = bounds.RdCurve([bounds.gaussian_rate(d, spec.x_var) for d in D], D, "gaussian",
                               spec.kind, {"var": spec.x_var})
    elif args.method == "ba":
        grid, masses = bounds.source_masses(spec, cells=args.cells)
        curve = bounds.ba_curve(masses, grid, np.logspace(-0.5, 2.5, args.points) / spec.x_var,
                                source=spec.kind)
    elif args.method == "ecsq":
        if args.source not in ("exponential", "laplace", "laplace_sign_si"):
            raise ConfigError("source: ecsq needs exponential, laplace or laplace_sign_si")
        curve = bounds.ecsq_curve_for(args.source, np.logspace(-0.5, 2.0, args.points))
    else:
        raise ConfigError(f"method: unknown {args.method!r}")
    path = evaluation.export_rd_curve(curve, out / f"{args.method}.csv", h)
    evaluation.write_manifest(out / f"{args.method}.manifest.json", h, [path], {"params": params})
    return EXIT_OK


# --- visualize / report -------------------------------------------------------------

def cmd_visualize(args) -> int:
    try:
        model, meta, h = checkpoint.load(args.checkpoint)
    except (OSError, ValueError, KeyError) as exc:
        raise ConfigError(f"checkpoint: {exc}") from None
    if "source" not in meta:
        raise ConfigError("source: checkpoint has no source description")
    if meta.get("variant") == "ntc":
        raise ConfigError("checkpoint: visualize needs a WZ model checkpoint")
    source = SourceSpec.from_dict(meta["source"])
    out = Path(args.out or Path(args.checkpoint).parent / "visualize")
    binmap = evaluation.extract_bins(model, source, seed=args.seed or 0)
    half = 6.0 * source.x_scale
    y_grid = np.linspace(-half, half, args.curve_points)
    curves = evaluation.decoder_curves(model, y_grid)
    files = [evaluation.export_bins(binmap, out / "bins.csv", h),
             evaluation.export_curves(curves, y_grid, out / "curves.csv", h)]
    counts = binmap.interval_counts()
    extra = {"interval_counts": {str(k): v for k, v in sorted(counts.items())},
             "binned_indices": binmap.binned_indices(),
             "discontiguous": bool(binmap.binned_indices())}
    if source.kind != LAPLACE_SIGN:
        fits = evaluation.decoder_slope_analysis(model, binmap, source)
        files.append(evaluation.export_slopes(fits, out / "slopes.csv", h))
        extra["slopes"] = evaluation.slope_summary(fits)
    else:
        extra["symmetry"] = evaluation.symmetry_offsets(binmap)
    evaluation.write_manifest(out / "manifest.json", h, files, extra)
    return EXIT_OK


REPORT_COLUMNS = ["run_id", "rate_kind", "rate_bits", "distortion_db", "bound", "bound_db", "gap_db"]


def _bound_curves(source: SourceSpec):
    """(name, rate -> distortion dB or nan) pairs for the report."""
    if source.kind == LAPLACE_SIGN:
        lams = np.logspace(-0.5, 2.0, 24)
        out = []
        for name, kind in (("ecsq_exponential", "laplace_sign_si"), ("ecsq_laplace", "laplace")):
            curve = bounds.ecsq_curve_for(kind, lams)
            out.append((name, lambda r, c=curve: float(np.interp(r, c.rates, c.distortions_db,
                                                                  left=np.nan, right=np.nan))))
        return out
    cv, xv = source.cond_var_x_given_y, source.x_var
    return [("wz_gaussian", lambda r: float(bounds.to_db(cv * 2.0 ** (-2 * r)))),
            ("gaussian", lambda r: float(bounds.to_db(xv * 2.0 ** (-2 * r))))]


def cmd_report(args) -> int:
    out = Path(args.out)
    manifest = _read_manifest(out / "manifest.json")
    if manifest is None or "source" not in manifest:
        raise ConfigError(f"out: no sweep manifest in {out}")
    source = SourceSpec.from_dict(manifest["source"])
    points = evaluation.read_points(out / "rd_points.csv")
    rows = []
    curves = _bound_curves(source)
    for p in points:
        for name, f in curves:
            b = f(p.rate_bits)
            rows.append({"run_id": p.meta["run_id"], "rate_kind": p.rate_kind,
                         "rate_bits": p.rate_bits, "distortion_db": p.distortion_db,
                         "bound": name, "bound_db": b, "gap_db": p.distortion_db - b})
    h = manifest["config_hash"]
    path = evaluation.write_csv(out / "report.csv", REPORT_COLUMNS, rows, h)
    manifest_files = sorted(set(manifest.get("files", [])) | {"report.csv"})
    evaluation.write_manifest(out / "manifest.json", h, [out / f for f in manifest_files],
                              {k: v for k, v in manifest.items() if k not in ("files", "config_hash")})
    print(path)
    return EXIT_OK


# --- entry point --------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-v", "--verbose", action="store_true", help="log progress")
    p = argparse.ArgumentParser(prog="wzlab", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    for name, fn, helptext in (("train", cmd_train, "train and evaluate one model"),
                               ("sweep", cmd_sweep, "train and evaluate one model per lambda")):
        s = sub.add_parser(name, help=helptext, parents=[common])
        s.add_argument("--config", required=True)
        s.add_argument("--out")
        s.add_argument("--seed", type=int)
        s.add_argument("--lambda", dest="lambda_", help="comma separated lambda override")
        if name == "sweep":
            s.add_argument("--parallel", type=int, default=1)
        s.set_defaults(func=fn)

    b = sub.add_parser("bounds", help="write a reference R-D curve", parents=[common])
    b.add_argument("--method", required=True, choices=["wz-gaussian", "gaussian", "ba", "ecsq"])
    b.add_argument("--source", required=True,
                   help=f"{', '.join(KINDS)} (ecsq: exponential, laplace, laplace_sign_si)")
    b.add_argument("--noise-var", type=float)
    b.add_argument("--points", type=int, default=20)
    b.add_argument("--cells", type=int, default=1024)
    b.add_argument("--out")
    b.set_defaults(func=cmd_bounds)

    v = sub.add_parser("visualize", help="export bins, decoder curves and slope fits", parents=[common])
    v.add_argument("--checkpoint", required=True)
    v.add_argument("--out")
    v.add_argument("--seed", type=int)
    v.add_argument("--curve-points", type=int, default=513)
    v.set_defaults(func=cmd_visualize)

    r = sub.add_parser("report", help="compare a sweep's points with reference curves", parents=[common])
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (RunFailure, trainer.TrainingError, OSError) as exc:
        print(f"run failed: {exc}", file=sys.stderr)
        return EXIT_RUN


if __name__ == "__main__":
    sys.exit(main())
