"""Reference rate-distortion curves.

Closed forms for the quadratic-Gaussian case, Blahut-Arimoto on a
discretised source, and an entropy-constrained Lloyd design of scalar
quantizers. Rates are in bits, distortion is mean squared error unless a
column says dB.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .sources import SourceSpec, density_grid, exponential_grid, masses_from_pdf

log = logging.getLogger(__name__)


def to_db(mse):
    return 10.0 * np.log10(mse)


def from_db(db):
    return 10.0 ** (np.asarray(db) / 10.0)


def wz_gaussian_rate(D: float, cond_var: float) -> float:
    """Wyner-Ziv rate for the quadratic-Gaussian case: 1/2 log2(var_{x|y} / D)."""
    if not 0.0 < D <= cond_var:
        raise ValueError(f"D={D} outside (0, {cond_var}]")
    return 0.5 * np.log2(cond_var / D)


def gaussian_rate(D: float, var: float) -> float:
    """Point-to-point Gaussian R(D), zero for D >= var."""
    if D <= 0:
        raise ValueError("D must be positive")
    return max(0.0, 0.5 * np.log2(var / D))


def gaussian_distortion(R: float, var: float) -> float:
    return var * 2.0 ** (-2.0 * R)


@dataclass
class RdCurve:
    """(rate bits, distortion MSE) points sorted by rate, with provenance."""

    rates: np.ndarray
    distortions: np.ndarray
    method: str
    source: str = ""
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        r = np.asarray(self.rates, dtype=np.float64)
        d = np.asarray(self.distortions, dtype=np.float64)
        order = np.argsort(r, kind="stable")
        self.rates, self.distortions = r[order], d[order]

    @property
    def distortions_db(self) -> np.ndarray:
        return to_db(self.distortions)

    def db_at_rate(self, rate: float) -> float:
        """Distortion in dB at ``rate``, linear in (rate, dB) between points."""
        if not self.rates[0] <= rate <= self.rates[-1]:
            raise ValueError(f"rate {rate} outside curve range [{self.rates[0]}, {self.rates[-1]}]")
        return float(np.interp(rate, self.rates, self.distortions_db))

    def rows(self):
        for r, d in zip(self.rates, self.distortions_db):
            yield float(r), float(d)


# --- Blahut-Arimoto -----------------------------------------------------------------

@dataclass
class BaResult:
    rate: float
    distortion: float
    iterations: int
    converged: bool
    output_probs: np.ndarray = field(repr=False, default=None)


def blahut_arimoto(p: np.ndarray, dist: np.ndarray, slope: float, max_iter: int = 10_000,
                   tol: float = 1e-9, q0: np.ndarray | None = None) -> BaResult:
    """One point of R(D) for source masses ``p`` and distortion matrix ``dist``.

    ``slope`` is the Lagrange parameter s >= 0 in p(xhat|x) ~ q(xhat) exp(-s d).
    Stops when successive rate iterates differ by less than ``tol`` bits.
    """
    p = np.asarray(p, dtype=np.float64)
    # rows are shifted by their minimum distortion so exp() cannot underflow a whole row
    dmin = dist.min(axis=1)
    A = np.exp(-slope * (dist - dmin[:, None]))
    AD = A * dist
    q = np.full(dist.shape[1], 1.0 / dist.shape[1]) if q0 is None else np.asarray(q0, float).copy()
    prev = np.inf
    rate = dist_val = np.nan
    for it in range(1, max_iter + 1):
        z = A @ q
        q = q * (A.T @ (p / z))
        q /= q.sum()
        # test channel p(xhat|x) = q(xhat) A(x, xhat) / z(x); with log(p(xhat|x)/q) =
        # -slope d - log z_true the mutual information is -slope D - E log z_true
        z = A @ q
        dist_val = float(p @ ((AD @ q) / z))
        rate = float(-slope * dist_val - p @ (np.log(z) - slope * dmin)) / np.log(2.0)
        if abs(prev - rate) < tol:
            return BaResult(rate, dist_val, it, True, q)
        prev = rate
    log.warning("Blahut-Arimoto did not converge at slope %g", slope)
    return BaResult(rate, dist_val, max_iter, False, q)


def ba_curve(p: np.ndarray, grid: np.ndarray, slopes, source: str = "", **kw) -> RdCurve:
    """Sweep ``slopes`` with squared error, reproduction alphabet = the grid."""
    dist = (grid[:, None] - grid[None, :]) ** 2
    rates, dists, q = [], [], None
    for s in sorted(slopes):
        res = blahut_arimoto(p, dist, s, q0=q, **kw)
        q = np.maximum(res.output_probs, 1e-300)
        rates.append(res.rate)
        dists.append(res.distortion)
    return RdCurve(np.array(rates), np.array(dists), "blahut_arimoto", source,
                   {"cells": int(grid.size), "slopes": [float(s) for s in slopes]})


def ba_point_at_distortion(p, grid, target_D: float, tol_db: float = 0.01, max_rounds: int = 50,
                           **kw) -> BaResult:
    """BA point whose distortion is within ``tol_db`` of ``target_D``.

    Starts from the slope 1/(2 D) (exact for Gaussian sources under squared
    error) and rescales it by D_achieved / D_target, which is the fixed point
    of the high-resolution relation D ~ 1/(2 s); each round warm-starts from
    the previous output distribution.
    """
    dist = (grid[:, None] - grid[None, :]) ** 2
    s = 1.0 / (2.0 * target_D)
    q = None
    res = None
    for _ in range(max_rounds):
        res = blahut_arimoto(p, dist, s, q0=q, **kw)
        if abs(to_db(res.distortion) - to_db(target_D)) < tol_db:
            break
        s *= res.distortion / target_D
        q = np.maximum(res.output_probs, 1e-300)
    return res


# --- entropy-constrained scalar quantizer design -------------------------------------

@dataclass
class EcsqDesign:
    levels: np.ndarray
    probs: np.ndarray
    rate: float
    mse: float
    lam: float
    lagrangian_trace: list = field(default_factory=list, repr=False)
    assignment: np.ndarray = field(default=None, repr=False)

    @property
    def distortion_db(self) -> float:
        return float(to_db(self.mse))


def _entropy_bits(p: np.ndarray) -> float:
    p = p[p > 0] / p.sum()
    return max(0.0, float(-(p * np.log2(p)).sum()))


def _lloyd_ec(grid, masses, levels, lam, max_iter, tol):
    probs = np.full(levels.size, 1.0 / levels.size)
    trace = []
    assign = None
    for _ in range(max_iter):
        cost = -np.log2(probs)[None, :] + lam * (grid[:, None] - levels[None, :]) ** 2
        assign = np.argmin(cost, axis=1)
        mass = np.bincount(assign, weights=masses, minlength=levels.size)
        used = mass > 0
        first = np.bincount(assign, weights=masses * grid, minlength=levels.size)
        levels = first[used] / mass[used]
        probs = mass[used]
        remap = np.cumsum(used) - 1
        assign = remap[assign]
        mse = float(masses @ (grid - levels[assign]) ** 2)
        lag = _entropy_bits(probs) + lam * mse
        trace.append(lag)
        if len(trace) > 1 and trace[-2] - lag < tol:
            break
    return levels, probs, assign, trace


def ecsq_design(masses: np.ndarray, grid: np.ndarray, lam: float, k_max: int = 64,
                max_iter: int = 500, tol: float = 1e-10, restarts: int = 5, seed=0) -> EcsqDesign:
    """Entropy-constrained Lloyd iteration on a discretised density.

    Alternates nearest-codeword assignment under -log2 p_k + lam (x - c_k)^2,
    centroid updates and probability updates; empty cells are dropped. The
    first start uses density quantiles, later ones random draws from the
    source; the lowest final Lagrangian wins.
    """
    if k_max < 1:
        raise ValueError("k_max must be >= 1")
    masses = np.asarray(masses, dtype=np.float64)
    grid = np.asarray(grid, dtype=np.float64)
    rng = np.random.default_rng(seed)
    cdf = np.cumsum(masses)
    best = None
    for r in range(max(1, restarts)):
        if r == 0:
            qs = (np.arange(k_max) + 0.5) / k_max
        else:
            qs = np.sort(rng.uniform(0.0, 1.0, k_max))
        init = grid[np.minimum(np.searchsorted(cdf, qs), grid.size - 1)]
        levels, probs, assign, trace = _lloyd_ec(grid, masses, np.unique(init), lam, max_iter, tol)
        if best is None or trace[-1] < best[3][-1]:
            best = (levels, probs, assign, trace)
    levels, probs, assign, trace = best
    mse = float(masses @ (grid - levels[assign]) ** 2)
    return EcsqDesign(levels, probs, _entropy_bits(probs), mse, float(lam), trace, assign)


def ecsq_curve(masses, grid, lams, source: str = "", **kw) -> RdCurve:
    designs = [ecsq_design(masses, grid, lam, **kw) for lam in lams]
    return RdCurve(np.array([d.rate for d in designs]), np.array([d.mse for d in designs]),
                   "ecsq", source, {"lambdas": [float(x) for x in lams], "cells": int(grid.size)})


def exponential_masses(cells: int = 4096, upper: float = 24.0):
    grid = exponential_grid(cells, upper)
    return grid, masses_from_pdf(lambda x: np.exp(-x), grid)


def laplace_masses(cells: int = 8192, half: float = 24.0):
    w = 2 * half / cells
    grid = -half + w * (np.arange(cells) + 0.5)
    return grid, masses_from_pdf(lambda x: 0.5 * np.exp(-np.abs(x)), grid)


def ecsq_with_sign_side_info(lam: float, cells: int = 4096, **kw) -> EcsqDesign:
    """Optimal ECSQ for Laplace X with Y = sgn(X) at the decoder.

    Given the sign, only |X| ~ Exponential(1) is left to quantize, so this is
    the exponential design (the entropy-distortion function with side info).
    """
    grid, masses = exponential_masses(cells)
    return ecsq_design(masses, grid, lam, **kw)


def ecsq_curve_for(kind: str, lams, **kw) -> RdCurve:
    """ECSQ curve for ``exponential``, ``laplace`` or ``laplace_sign_si``."""
    if kind in ("exponential", "laplace_sign_si"):
        grid, masses = exponential_masses()
    elif kind == "laplace":
        grid, masses = laplace_masses()
    else:
        raise ValueError(f"unknown ECSQ source {kind!r}")
    curve = ecsq_curve(masses, grid, lams, source=kind, **kw)
    return curve


def source_masses(spec: SourceSpec, cells: int = 2048, scales: float = 8.0):
    from .sources import default_grid
    grid = default_grid(spec, cells, scales)
    return grid, density_grid(spec, grid)
