"""Rate/distortion estimation, bin extraction, decoder curves and exports."""
from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import models, ntc
from .models import CONDITIONAL, MARGINAL, DecoderTable, PriorTable, WzModel
from .sources import (GAUSSIAN_X_FROM_Y, GAUSSIAN_Y_FROM_X, LAPLACE_SIGN, SourceSpec,
                      conditional_y, density_grid, sample_pairs)

DB_FLOOR = -120.0
MIN_EVAL_SAMPLES = 10_000
MASS_THRESHOLD = 1e-3

MARGINAL_CE = "marginal-cross-entropy"
PLUGIN = "plug-in-entropy"
CONDITIONAL_CE = "conditional-cross-entropy"

_EVAL_BLOCK = 1 << 15


def mse_to_db(mse: float) -> float:
    """10 log10(mse), clamped below at the -120 dB floor."""
    if mse <= 0:
        return DB_FLOOR
    return max(DB_FLOOR, 10.0 * np.log10(mse))


def plugin_entropy(u: np.ndarray) -> float:
    counts = np.bincount(np.asarray(u).ravel() - np.min(u))
    p = counts[counts > 0] / counts.sum()
    return float(-(p * np.log2(p)).sum())


@dataclass
class RdPoint:
    rate_bits: float
    rate_kind: str
    distortion_db: float
    samples: int
    meta: dict = field(default_factory=dict)
    mse: float = float("nan")

    def row(self) -> dict:
        return {"run_id": self.meta.get("run_id", ""), "variant": self.meta.get("variant", ""),
                "lambda": self.meta.get("lambda", ""), "seed": self.meta.get("seed", ""),
                "rate_kind": self.rate_kind, "rate_bits": self.rate_bits,
                "distortion_db": self.distortion_db, "samples": self.samples}


def _check_samples(M):
    if M < MIN_EVAL_SAMPLES:
        raise ValueError(f"evaluation needs at least {MIN_EVAL_SAMPLES} samples, got {M}")


def _eval_rngs(seed):
    pairs, enc = np.random.SeedSequence(seed).spawn(2)
    return np.random.default_rng(pairs), np.random.default_rng(enc)


def encode_and_decode(model: WzModel, source: SourceSpec, x, y, rng, n_samples=None):
    """Encode ``x`` with fresh conditional samples and decode with the paired ``y``.

    Returns (u, x_hat, log2 q of the emitted index).
    """
    n = model.n_samples if n_samples is None else n_samples
    u = np.empty(x.size, dtype=np.int64)
    xhat = np.empty(x.size)
    lq = np.empty(x.size)
    table = prior = None
    log2_marg = models.log2_probs(model) if model.variant == MARGINAL else None
    for i in range(0, x.size, _EVAL_BLOCK):
        xb, yb = x[i:i + _EVAL_BLOCK], y[i:i + _EVAL_BLOCK]
        ys = models.draw_encoder_samples(source, xb, n, rng)
        lo, hi = min(ys.min(), yb.min()), max(ys.max(), yb.max())
        if table is None or not (table.covers(ys) and table.covers(yb)):
            # widen generously so one table usually serves every block
            table = DecoderTable(model, lo - 1.0, hi + 1.0)
            if model.variant == CONDITIONAL:
                prior = PriorTable(model, lo - 1.0, hi + 1.0)
        ub = models.encode_with_samples(model, xb, ys, table, prior)
        u[i:i + ub.size] = ub
        xhat[i:i + ub.size] = table.decode(ub, yb)
        if model.variant == MARGINAL:
            lq[i:i + ub.size] = log2_marg[ub]
        else:
            lq[i:i + ub.size] = prior.log2_probs(yb)[np.arange(ub.size), ub]
    return u, xhat, lq


def evaluate(model: WzModel, source: SourceSpec, M: int = 1 << 20, seed=0,
             n_samples: int | None = None, meta: dict | None = None) -> list[RdPoint]:
    """Operational rate and distortion of a WZ model on M fresh pairs.

    Returns the cross-entropy point (marginal or conditional, by variant)
    followed by the plug-in entropy point for the same encoded indices.
    """
    _check_samples(M)
    pair_rng, enc_rng = _eval_rngs(seed)
    x, y = sample_pairs(source, M, pair_rng)
    n = model.n_samples if n_samples is None else n_samples
    u, xhat, lq = encode_and_decode(model, source, x, y, enc_rng, n)
    mse = float(np.mean((x - xhat) ** 2))
    db = mse_to_db(mse)
    info = {**model.meta(), "eval_n_samples": n, "eval_seed": seed, **(meta or {})}
    kind = MARGINAL_CE if model.variant == MARGINAL else CONDITIONAL_CE
    ce = float(-np.mean(lq))
    return [RdPoint(ce, kind, db, M, dict(info), mse),
            RdPoint(plugin_entropy(u), PLUGIN, db, M, dict(info), mse)]


def ntc_evaluate(model: ntc.NtcModel, source: SourceSpec, M: int = 1 << 20, seed=0,
                 meta: dict | None = None) -> list[RdPoint]:
    """Hard-quantized NTC: rate under the learned CDF, plus plug-in entropy."""
    _check_samples(M)
    pair_rng, _ = _eval_rngs(seed)
    x, y = sample_pairs(source, M, pair_rng)
    u = ntc.encode(model, x)
    xhat = ntc.decode(model, u, y)
    mse = float(np.mean((x - xhat) ** 2))
    db = mse_to_db(mse)
    values, inverse = np.unique(u, return_inverse=True)
    rate = float(np.mean(ntc.latent_rate_bits(model, values)[inverse]))
    info = {**model.meta(), "eval_seed": seed, **(meta or {})}
    return [RdPoint(rate, MARGINAL_CE, db, M, dict(info), mse),
            RdPoint(plugin_entropy(u), PLUGIN, db, M, dict(info), mse)]


def evaluate_any(model, source, M=1 << 20, seed=0, n_samples=None, meta=None) -> list[RdPoint]:
    if isinstance(model, ntc.NtcModel):
        return ntc_evaluate(model, source, M, seed, meta)
    return evaluate(model, source, M, seed, n_samples, meta)


# --- bins ---------------------------------------------------------------------------

@dataclass
class BinMap:
    """Encoder indices on an x-grid, merged into maximal constant-index intervals."""

    grid: np.ndarray
    index: np.ndarray
    cell_mass: np.ndarray
    edges: np.ndarray = field(repr=False, default=None)

    def __post_init__(self):
        if self.edges is None:
            w = np.diff(self.grid)
            self.edges = np.concatenate([[self.grid[0] - w[0] / 2],
                                         (self.grid[1:] + self.grid[:-1]) / 2,
                                         [self.grid[-1] + w[-1] / 2]])

    def runs(self) -> list[tuple[int, int, int]]:
        """(first cell, last cell + 1, index) for every maximal run."""
        change = np.flatnonzero(np.diff(self.index)) + 1
        starts = np.concatenate([[0], change])
        stops = np.concatenate([change, [self.index.size]])
        return [(int(a), int(b), int(self.index[a])) for a, b in zip(starts, stops)]

    def intervals(self) -> list[dict]:
        return [{"x_lo": float(self.edges[a]), "x_hi": float(self.edges[b]), "index": k,
                 "mass": float(self.cell_mass[a:b].sum()), "cells": (a, b)}
                for a, b, k in self.runs()]

    def interval_counts(self, min_mass: float = MASS_THRESHOLD) -> dict[int, int]:
        """Number of disjoint intervals of mass >= ``min_mass`` owned by each index."""
        out: dict[int, int] = {}
        for iv in self.intervals():
            if iv["mass"] >= min_mass:
                out[iv["index"]] = out.get(iv["index"], 0) + 1
        return out

    def index_mass(self) -> dict[int, float]:
        out: dict[int, float] = {}
        for iv in self.intervals():
            out[iv["index"]] = out.get(iv["index"], 0.0) + iv["mass"]
        return out

    def binned_indices(self, min_mass: float = MASS_THRESHOLD) -> list[int]:
        """Indices owning two or more disjoint intervals of non-negligible mass."""
        return sorted(k for k, c in self.interval_counts(min_mass).items() if c >= 2)


def bin_grid(source: SourceSpec, cells: int = 4096, scales: float = 6.0) -> np.ndarray:
    half = scales * source.x_scale
    w = 2 * half / cells
    return -half + w * (np.arange(cells) + 0.5)


def extract_bins(model: WzModel, source: SourceSpec, grid: np.ndarray | None = None,
                 seed=0, n_samples: int | None = None) -> BinMap:
    """Encoder map on an x-grid.

    Every cell uses the same standard-normal noise vector to form its
    conditional y-samples (common random numbers), so the map reflects the
    model rather than sampling jitter between neighbouring cells.
    """
    grid = bin_grid(source) if grid is None else np.asarray(grid, dtype=np.float64)
    n = model.n_samples if n_samples is None else n_samples
    if source.deterministic_side_info:
        n = 1
    noise = np.random.default_rng(seed).standard_normal(n)
    ys = conditional_y(source, grid, noise)
    u = models.encode_with_samples(model, grid, ys)
    return BinMap(grid, u, density_grid(source, grid))


def symmetry_offsets(binmap: BinMap, min_mass: float = MASS_THRESHOLD) -> dict:
    """Compare the map with its mirror image x -> -x.

    For each boundary between intervals of mass >= ``min_mass`` on the
    positive side, reports the distance (in cells) to the nearest boundary on
    the negative side after mirroring, and whether the index at every
    significant cell matches the index at its mirrored cell.
    """
    n = binmap.index.size
    runs = [r for r in binmap.runs()]
    sig = [r for r in runs if binmap.cell_mass[r[0]:r[1]].sum() >= min_mass]
    cells = np.concatenate([np.arange(a, b) for a, b, _ in sig]) if sig else np.array([], int)
    bounds = np.array([a for a, _, _ in runs[1:]])
    # a boundary at cell index a sits between cells a-1 and a; its mirror is n - a
    lo, hi = (min(r[0] for r in sig), max(r[1] for r in sig)) if sig else (0, 0)
    inner = bounds[(bounds > lo) & (bounds < hi)]
    pos = inner[inner > n // 2]
    neg = inner[inner <= n // 2]
    offsets = [int(np.min(np.abs((n - b) - neg))) if neg.size else n for b in pos]
    mirrored = binmap.index[cells] == binmap.index[n - 1 - cells]
    return {"max_boundary_offset": max(offsets) if offsets else 0,
            "boundary_offsets": offsets,
            "mirrored_fraction": float(mirrored.mean()) if cells.size else 1.0,
            "boundaries_pos": int(pos.size), "boundaries_neg": int(neg.size)}


# --- decoder curves -----------------------------------------------------------------

def decoder_curves(model: WzModel, y_grid) -> np.ndarray:
    """(K, len(y_grid)) array of g(u, y)."""
    y = np.asarray(y_grid, dtype=np.float64)
    return np.stack([models.decode(model, k, y) for k in range(model.K)])


def _posterior_y_mean(source: SourceSpec, x):
    if source.kind == GAUSSIAN_X_FROM_Y:
        return np.asarray(x) / (1.0 + source.noise_var)
    if source.kind == GAUSSIAN_Y_FROM_X:
        return np.asarray(x)
    raise ValueError("slope analysis needs a Gaussian source")


@dataclass
class BranchFit:
    index: int
    x_lo: float
    x_hi: float
    mass: float
    points: int
    slope: float = float("nan")
    intercept: float = float("nan")
    r2: float = float("nan")
    skipped: bool = False


def linear_fit(y: np.ndarray, v: np.ndarray) -> tuple[float, float, float]:
    """Least-squares slope, intercept and R^2 of v against y."""
    A = np.stack([y, np.ones_like(y)], axis=1)
    (slope, intercept), *_ = np.linalg.lstsq(A, v, rcond=None)
    resid = v - (slope * y + intercept)
    ss = float(np.sum((v - v.mean()) ** 2))
    r2 = 1.0 - float(resid @ resid) / ss if ss > 0 else 1.0
    return float(slope), float(intercept), r2


def decoder_slope_analysis(model: WzModel, binmap: BinMap, source: SourceSpec,
                           step: float | None = None, min_points: int = 16,
                           min_mass: float = MASS_THRESHOLD) -> list[BranchFit]:
    """Straight-line fit of y -> g(u, y) for each significant interval of u.

    The fit region is the interval's x-range mapped to y through the
    posterior mean E[Y | X = x], sampled with the bin-grid spacing (or
    ``step``). Regions with fewer than ``min_points`` samples are skipped.
    """
    step = float(np.diff(binmap.grid[:2])[0]) if step is None else step
    fits = []
    for iv in binmap.intervals():
        if iv["mass"] < min_mass:
            continue
        a, b = _posterior_y_mean(source, [iv["x_lo"], iv["x_hi"]])
        y = np.arange(a + step / 2, b, step)
        fit = BranchFit(iv["index"], iv["x_lo"], iv["x_hi"], iv["mass"], int(y.size))
        if y.size < min_points:
            fit.skipped = True
        else:
            fit.slope, fit.intercept, fit.r2 = linear_fit(y, models.decode(model, iv["index"], y))
        fits.append(fit)
    return fits


def slope_summary(fits: list[BranchFit]) -> dict:
    used = [f for f in fits if not f.skipped]
    if not used:
        return {"branches": 0, "skipped": len(fits), "median_slope": float("nan"),
                "median_r2": float("nan")}
    return {"branches": len(used), "skipped": len(fits) - len(used),
            "median_slope": float(np.median([f.slope for f in used])),
            "median_r2": float(np.median([f.r2 for f in used]))}


# --- export -------------------------------------------------------------------------

RD_COLUMNS = ["run_id", "variant", "lambda", "seed", "rate_kind", "rate_bits", "distortion_db", "samples"]
BIN_COLUMNS = ["x_lo", "x_hi", "index", "mass"]
CURVE_COLUMNS = ["index", "y", "x_hat"]
SLOPE_COLUMNS = ["index", "x_lo", "x_hi", "mass", "points", "slope", "intercept", "r2", "skipped"]
CURVE_CSV_COLUMNS = ["rate_bits", "distortion_db", "method", "params"]


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def write_csv(path, columns, rows, config_hash: str = "") -> Path:
    """CSV with a leading ``# config_hash=...`` line; floats as exact reprs."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        if config_hash:
            fh.write(f"# config_hash={config_hash}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for row in rows:
            w.writerow([_fmt(row[c]) for c in columns])
    return path


def read_csv(path) -> tuple[list[dict], str]:
    """Rows as dicts of strings plus the embedded config hash ('' if absent)."""
    lines = Path(path).read_text().splitlines()
    h = ""
    while lines and lines[0].startswith("#"):
        head = lines.pop(0)[1:].strip()
        if head.startswith("config_hash="):
            h = head.split("=", 1)[1]
    return list(csv.DictReader(lines)), h


def export_points(points: list[RdPoint], path, config_hash="") -> Path:
    return write_csv(path, RD_COLUMNS, [p.row() for p in points], config_hash)


def read_points(path) -> list[RdPoint]:
    rows, _ = read_csv(path)
    out = []
    for r in rows:
        meta = {"run_id": r["run_id"], "variant": r["variant"],
                "lambda": float(r["lambda"]) if r["lambda"] else "",
                "seed": int(r["seed"]) if r["seed"] else ""}
        out.append(RdPoint(float(r["rate_bits"]), r["rate_kind"], float(r["distortion_db"]),
                           int(r["samples"]), meta))
    return out


def export_bins(binmap: BinMap, path, config_hash="") -> Path:
    return write_csv(path, BIN_COLUMNS, binmap.intervals(), config_hash)


def export_curves(curves: np.ndarray, y_grid, path, config_hash="") -> Path:
    rows = ({"index": k, "y": float(y), "x_hat": float(v)}
            for k in range(curves.shape[0]) for y, v in zip(y_grid, curves[k]))
    return write_csv(path, CURVE_COLUMNS, rows, config_hash)


def export_slopes(fits: list[BranchFit], path, config_hash="") -> Path:
    return write_csv(path, SLOPE_COLUMNS, [asdict(f) for f in fits], config_hash)


def export_rd_curve(curve, path, config_hash="") -> Path:
    params = json.dumps(curve.params, sort_keys=True)
    rows = ({"rate_bits": r, "distortion_db": d, "method": curve.method, "params": params}
            for r, d in curve.rows())
    return write_csv(path, CURVE_CSV_COLUMNS, rows, config_hash)


def write_manifest(path, config_hash: str, files, extra: dict | None = None) -> Path:
    """JSON manifest listing every emitted file relative to the manifest's directory."""
    path = Path(path)
    base = path.parent
    doc = {"config_hash": config_hash,
           "files": sorted(str(Path(f).resolve().relative_to(base.resolve())) for f in files),
           **(extra or {})}
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return path
