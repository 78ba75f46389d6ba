"""Synthetic joint sources (X, Y) with side information Y at the decoder.

All sampling goes through ``numpy.random.Generator`` (PCG64); Gaussian draws
use numpy's ziggurat ``standard_normal``, Laplace draws use its inverse-CDF
sampler. A seed fully determines every sequence.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import stats

GAUSSIAN_X_FROM_Y = "gaussian_x_from_y"  # X = Y + N, Y ~ N(0, 1)
GAUSSIAN_Y_FROM_X = "gaussian_y_from_x"  # Y = X + N, X ~ N(0, 1)
LAPLACE_SIGN = "laplace_sign"            # X ~ Laplace(0; 1), Y = sgn(X)
KINDS = (GAUSSIAN_X_FROM_Y, GAUSSIAN_Y_FROM_X, LAPLACE_SIGN)

MIN_GRID_CELLS = 64


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class SourceSpec:
    kind: str
    noise_var: float = 0.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown source kind {self.kind!r}")
        if self.kind != LAPLACE_SIGN and not self.noise_var > 0:
            raise ConfigError("noise_var must be > 0 for Gaussian sources")

    @property
    def deterministic_side_info(self) -> bool:
        """True when y is a function of x, so p(y|x) is a point mass."""
        return self.kind == LAPLACE_SIGN

    @property
    def x_var(self) -> float:
        if self.kind == GAUSSIAN_X_FROM_Y:
            return 1.0 + self.noise_var
        if self.kind == GAUSSIAN_Y_FROM_X:
            return 1.0
        return 2.0

    @property
    def x_scale(self) -> float:
        """Natural scale for grids: std for Gaussians, Laplace scale b=1."""
        return 1.0 if self.kind == LAPLACE_SIGN else float(np.sqrt(self.x_var))

    @property
    def cond_var_x_given_y(self) -> float:
        if self.kind == GAUSSIAN_X_FROM_Y:
            return self.noise_var
        if self.kind == GAUSSIAN_Y_FROM_X:
            return self.noise_var / (1.0 + self.noise_var)
        raise ValueError("conditional variance is only defined for the Gaussian sources")

    def to_dict(self) -> dict:
        return {"kind": self.kind, "noise_var": self.noise_var}

    @classmethod
    def from_dict(cls, d: dict) -> "SourceSpec":
        return cls(kind=d["kind"], noise_var=float(d.get("noise_var", 0.0)))


def _rng(seed) -> np.random.Generator:
    return seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)


def sample_x(spec: SourceSpec, count: int, seed) -> np.ndarray:
    return sample_pairs(spec, count, seed)[0]


def sample_pairs(spec: SourceSpec, count: int, seed) -> tuple[np.ndarray, np.ndarray]:
    """Draw ``count`` i.i.d. pairs from the joint law; returns (x, y) arrays."""
    if count < 1:
        raise ValueError("count must be >= 1")
    rng = _rng(seed)
    if spec.kind == GAUSSIAN_X_FROM_Y:
        y = rng.standard_normal(count)
        x = y + np.sqrt(spec.noise_var) * rng.standard_normal(count)
    elif spec.kind == GAUSSIAN_Y_FROM_X:
        x = rng.standard_normal(count)
        y = x + np.sqrt(spec.noise_var) * rng.standard_normal(count)
    else:
        x = rng.laplace(0.0, 1.0, count)
        y = np.sign(x)
    return x, y


def posterior_y_given_x(spec: SourceSpec, x):
    """Mean and std of p(y|x) for the Gaussian kinds."""
    x = np.asarray(x, dtype=np.float64)
    if spec.kind == GAUSSIAN_Y_FROM_X:
        return x, np.sqrt(spec.noise_var)
    if spec.kind == GAUSSIAN_X_FROM_Y:
        s = 1.0 + spec.noise_var
        return x / s, np.sqrt(spec.noise_var / s)
    raise ValueError("posterior_y_given_x is Gaussian-only")


def conditional_y(spec: SourceSpec, x, noise: np.ndarray) -> np.ndarray:
    """Map standard-normal ``noise`` of shape (..., N) to draws from p(y|x).

    Exposed separately so callers can reuse one noise array across many x
    (common random numbers).
    """
    x = np.asarray(x, dtype=np.float64)
    if spec.kind == LAPLACE_SIGN:
        return np.broadcast_to(np.sign(x)[..., None], x.shape + noise.shape[-1:]).copy()
    mean, std = posterior_y_given_x(spec, x)
    return mean[..., None] + std * noise


def sample_conditional_y(spec: SourceSpec, x, count: int, seed) -> np.ndarray:
    """``count`` i.i.d. draws of y ~ p(y|x) for each x; shape x.shape + (count,)."""
    if count < 1:
        raise ValueError("count must be >= 1")
    x = np.asarray(x, dtype=np.float64)
    if spec.kind == LAPLACE_SIGN:
        return conditional_y(spec, x, np.zeros(count))
    noise = _rng(seed).standard_normal(x.shape + (count,))
    return conditional_y(spec, x, noise)


# --- densities ----------------------------------------------------------------------

def x_density(spec: SourceSpec, y: float | None = None):
    """Frozen scipy distribution of X (marginal) or of X given Y=y."""
    if spec.kind == LAPLACE_SIGN:
        if y is None:
            return stats.laplace(0.0, 1.0)
        # |X| ~ Exponential(1) on the side selected by the sign
        return stats.expon(0.0, 1.0) if y > 0 else _NegExpon()
    if y is None:
        return stats.norm(0.0, np.sqrt(spec.x_var))
    if spec.kind == GAUSSIAN_X_FROM_Y:
        return stats.norm(y, np.sqrt(spec.noise_var))
    s = 1.0 + spec.noise_var
    return stats.norm(y / s, np.sqrt(spec.noise_var / s))


class _NegExpon:
    def pdf(self, x):
        return stats.expon.pdf(-np.asarray(x))


def masses_from_pdf(pdf, grid: np.ndarray) -> np.ndarray:
    """Midpoint-rule cell masses on ``grid`` (cell centres), renormalised to 1."""
    grid = np.asarray(grid, dtype=np.float64)
    if grid.ndim != 1 or grid.size < MIN_GRID_CELLS:
        raise ConfigError(f"grid needs at least {MIN_GRID_CELLS} cells, got {grid.size}")
    if np.any(np.diff(grid) <= 0):
        raise ConfigError("grid must be strictly increasing")
    edges = np.empty(grid.size + 1)
    edges[1:-1] = 0.5 * (grid[1:] + grid[:-1])
    edges[0] = grid[0] - (edges[1] - grid[0])
    edges[-1] = grid[-1] + (grid[-1] - edges[-2])
    m = pdf(grid) * np.diff(edges)
    return m / m.sum()


def density_grid(spec: SourceSpec, grid: np.ndarray, y: float | None = None) -> np.ndarray:
    """Masses of X (or X | Y=y) on the grid cells."""
    return masses_from_pdf(x_density(spec, y).pdf, grid)


def default_grid(spec: SourceSpec, cells: int = 2048, scales: float = 8.0) -> np.ndarray:
    """Symmetric cell-centre grid over +-``scales`` natural scales of X."""
    half = scales * spec.x_scale
    w = 2 * half / cells
    return -half + w * (np.arange(cells) + 0.5)


def exponential_grid(cells: int = 4096, upper: float = 24.0) -> np.ndarray:
    w = upper / cells
    return w * (np.arange(cells) + 0.5)
