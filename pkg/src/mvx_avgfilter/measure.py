"""Empirical measures.

Laws of the slow and fast components are carried around as weighted particle
clouds. Coefficients and functionals only ever see a MeasureSummary (mean,
second moment, particle count, plus a handle back to the cloud for custom
integration), which keeps evaluation O(1) after a one-pass reduction.

The distribution metric reported by the toolkit is an empirical
1-Wasserstein surrogate ("W1-surrogate" in all outputs): exact quantile
coupling in one dimension, summed over coordinates above that.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy.stats import wasserstein_distance

from .errors import (
    DegenerateWeights,
    DimensionMismatch,
    InvalidParams,
    MvxError,
    NonFiniteResult,
)

_WEIGHT_TOL = 1e-12


@dataclass(frozen=True, eq=False)
class ParticleCloud:
    """Immutable weighted point set standing in for a probability measure."""

    points: np.ndarray
    weights: Optional[np.ndarray] = None

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.ndim == 1:
            pts = pts.reshape(-1, 1)
        if pts.ndim != 2 or pts.shape[0] < 1:
            raise InvalidParams("cloud needs at least one particle (points must be N x d)")
        if not np.isfinite(pts).all():
            raise InvalidParams("cloud coordinates must be finite")
        n = pts.shape[0]
        if self.weights is None:
            w = np.full(n, 1.0 / n)
        else:
            w = np.asarray(self.weights, dtype=np.float64)
            if w.shape != (n,):
                raise InvalidParams(f"weights shape {w.shape} does not match {n} particles")
            if not np.isfinite(w).all() or (w < 0).any():
                raise InvalidParams("weights must be finite and nonnegative")
            if abs(float(w.sum()) - 1.0) > _WEIGHT_TOL:
                raise InvalidParams(f"weights must sum to 1 (got {float(w.sum()):.17g})")
        pts = pts.copy()
        pts.flags.writeable = False
        w = w.copy()
        w.flags.writeable = False
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "weights", w)

    @property
    def n(self) -> int:
        return self.points.shape[0]

    @property
    def d(self) -> int:
        return self.points.shape[1]


@dataclass(frozen=True, eq=False)
class MeasureSummary:
    """Moment summary of a cloud; what coefficient functions consume.

    second_moment is the full squared norm, sum_i w_i |x_i|^2.
    """

    mean: np.ndarray
    second_moment: float
    n_points: int
    source: Optional[ParticleCloud] = field(default=None, repr=False)

    def integrate(self, phi: Callable[[np.ndarray], float]) -> float:
        if self.source is None:
            raise MvxError("summary has no backing cloud to integrate against")
        return integrate(self.source, phi)


def summarize(cloud: ParticleCloud) -> MeasureSummary:
    """Exact weighted moments of a cloud."""
    mean = cloud.weights @ cloud.points
    second = float(cloud.weights @ np.einsum("ij,ij->i", cloud.points, cloud.points))
    return MeasureSummary(mean=mean, second_moment=second, n_points=cloud.n, source=cloud)


def summarize_points(points: np.ndarray, weights: Optional[np.ndarray] = None) -> MeasureSummary:
    """Summary straight from an array, skipping cloud construction.

    Used in integrator inner loops; no integration handle is attached.
    """
    if weights is None:
        mean = points.mean(axis=0)
        second = float(np.einsum("ij,ij->", points, points) / points.shape[0])
    else:
        mean = weights @ points
        second = float(weights @ np.einsum("ij,ij->i", points, points))
    return MeasureSummary(mean=mean, second_moment=second, n_points=points.shape[0])


def dirac_summary(v) -> MeasureSummary:
    """Summary of a point mass at v."""
    mean = np.asarray(v, dtype=np.float64).reshape(-1)
    return MeasureSummary(mean=mean, second_moment=float(mean @ mean), n_points=1)


def integrate(cloud: ParticleCloud, phi: Callable[[np.ndarray], float]) -> float:
    """sum_i w_i phi(x_i); phi receives one length-d vector at a time."""
    vals = np.fromiter((float(phi(row)) for row in cloud.points), dtype=np.float64, count=cloud.n)
    if not np.isfinite(vals).all():
        raise NonFiniteResult("phi produced a non-finite value on the cloud support")
    return float(cloud.weights @ vals)


def rho_estimate(a: ParticleCloud, b: ParticleCloud, blend: float = 0.0) -> float:
    """W1-surrogate distance between two clouds.

    d=1: exact empirical 1-Wasserstein via quantile coupling. d>1: sum of
    coordinate-wise W1 plus blend * |norm(a)^2 - norm(b)^2| (blend defaults
    to 0, keeping the pure transport part).
    """
    if a.d != b.d:
        raise DimensionMismatch(f"cloud dimensions differ: {a.d} vs {b.d}")
    total = 0.0
    for j in range(a.d):
        total += float(
            wasserstein_distance(a.points[:, j], b.points[:, j], a.weights, b.weights)
        )
    if blend != 0.0 and a.d > 1:
        sa, sb = summarize(a), summarize(b)
        total += blend * abs(sa.second_moment - sb.second_moment)
    return total


def systematic_resample_indices(weights: np.ndarray, u: float) -> np.ndarray:
    """Offspring indices for systematic resampling with a single uniform u.

    Stratified positions (i + u)/N against the cumulative weights; expected
    multiplicity of particle i is N * w_i.
    """
    w = np.asarray(weights, dtype=np.float64)
    total = float(w.sum())
    if total <= 0.0:
        raise DegenerateWeights("all weights are zero")
    cum = np.cumsum(w / total)
    cum[-1] = 1.0  # guard against rounding shortfall at the top
    positions = (np.arange(w.shape[0]) + u) / w.shape[0]
    return np.searchsorted(cum, positions, side="right").clip(max=w.shape[0] - 1)


def systematic_resample(cloud: ParticleCloud, rng: np.random.Generator) -> ParticleCloud:
    """Uniform-weight cloud of the same size, drawn by systematic resampling."""
    idx = systematic_resample_indices(cloud.weights, float(rng.random()))
    return ParticleCloud(cloud.points[idx])
