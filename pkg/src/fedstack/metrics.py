"""Evaluation metrics for 2-d sample sets and aggregation diagnostics.

The generative metric is the Frechet distance between Gaussians fitted to
two point sets. In two dimensions the matrix square root in the trace term
has a closed form, so the whole computation stays in elementary operations:

    d^2 = |mu_a - mu_b|^2 + tr(S_a) + tr(S_b) - 2 sqrt(tr(S_a S_b) + 2 sqrt(det S_a det S_b))

which follows from tr(sqrt(M)) = sqrt(tr M + 2 sqrt(det M)) for a 2x2
matrix M with nonnegative eigenvalues.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .errors import DimensionError, NumericError
from .lowrank import AdapterSet, energy_trace

__all__ = [
    "GaussianFit",
    "fit_gaussian",
    "frechet_2d",
    "frechet_points",
    "cluster_purity",
    "LayerEnergyRow",
    "energy_report",
    "neutrality_score",
]

_COV_FLOOR = 1e-9
_NEG_TOL = 1e-9


@dataclass(frozen=True)
class GaussianFit:
    """Mean and regularised covariance of a 2-d point set."""

    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=np.float64)
        cov = np.asarray(self.cov, dtype=np.float64)
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cov)
        if mean.shape != (2,) or cov.shape != (2, 2):
            raise DimensionError("fit must be 2-d")
        if not (np.all(np.isfinite(mean)) and np.all(np.isfinite(cov))):
            raise NumericError("non-finite fit")
        if abs(cov[0, 1] - cov[1, 0]) > 1e-9:
            raise ValueError("covariance must be symmetric")
        # eigenvalues of a symmetric 2x2: mean of trace +- radius
        half_tr = 0.5 * (cov[0, 0] + cov[1, 1])
        radius = np.sqrt(max(0.25 * (cov[0, 0] - cov[1, 1]) ** 2 + cov[0, 1] ** 2, 0.0))
        if half_tr - radius < _COV_FLOOR * (1.0 - 1e-12):
            raise ValueError("covariance eigenvalues must be >= the regularisation floor")


def fit_gaussian(points) -> GaussianFit:
    """Sample mean and unbiased covariance with a 1e-9 diagonal floor."""
    pts = np.asarray(getattr(points, "points", points), dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 2:
        raise DimensionError("expected an (n, 2) point set")
    if pts.shape[0] < 2:
        raise ValueError("need at least 2 points for a covariance")
    mean = pts.mean(axis=0)
    centered = pts - mean
    cov = centered.T @ centered / (pts.shape[0] - 1)
    cov = 0.5 * (cov + cov.T) + _COV_FLOOR * np.eye(2)
    return GaussianFit(mean, cov)


def frechet_2d(fit_a: GaussianFit, fit_b: GaussianFit) -> float:
    """Frechet distance squared between two fitted 2-d Gaussians."""
    det_a = float(np.linalg.det(fit_a.cov))
    det_b = float(np.linalg.det(fit_b.cov))
    if det_a < -_NEG_TOL or det_b < -_NEG_TOL:
        raise NumericError("covariance determinant went negative")
    cross = float(np.trace(fit_a.cov @ fit_b.cov))
    inner = cross + 2.0 * np.sqrt(max(det_a, 0.0) * max(det_b, 0.0))
    if inner < -_NEG_TOL:
        raise NumericError("product of covariances is not PSD")
    trace_sqrt = float(np.sqrt(max(inner, 0.0)))
    mean_diff = fit_a.mean - fit_b.mean
    value = (
        float(mean_diff @ mean_diff)
        + float(np.trace(fit_a.cov))
        + float(np.trace(fit_b.cov))
        - 2.0 * trace_sqrt
    )
    if value < -_NEG_TOL:
        raise NumericError(f"frechet distance computed as {value!r}")
    return max(value, 0.0)


def frechet_points(points_a, points_b) -> float:
    """Convenience wrapper: fit both point sets, then frechet_2d."""
    return frechet_2d(fit_gaussian(points_a), fit_gaussian(points_b))


def cluster_purity(assignment, truth: Mapping[int, object]) -> float:
    """Fraction of members whose cluster's majority true label matches theirs.

    Takes a member -> cluster mapping or anything exposing one as by_client.
    Invariant under relabeling of either side. 1.0 means every cluster is
    label-pure.
    """
    assignment = getattr(assignment, "by_client", assignment)
    if set(assignment) != set(truth):
        raise ValueError("assignment and truth must cover the same members")
    if not assignment:
        raise ValueError("empty assignment")
    clusters: dict[int, list] = {}
    for member, cluster in assignment.items():
        clusters.setdefault(cluster, []).append(truth[member])
    correct = 0
    for labels in clusters.values():
        counts: dict[object, int] = {}
        for label in labels:
            counts[label] = counts.get(label, 0) + 1
        correct += max(counts.values())
    return correct / len(assignment)


@dataclass(frozen=True)
class LayerEnergyRow:
    """Energy bookkeeping for one layer across an aggregation comparison."""

    layer_id: str
    member_energies: tuple[float, ...]
    fedavg_energy: float
    stacked_energy: float
    cancellation_ratio: float


def energy_report(
    members: Sequence[AdapterSet],
    fedavg_out: AdapterSet,
    stacked_out: AdapterSet,
) -> list[LayerEnergyRow]:
    """Per-layer comparison of member energy against both aggregates.

    The cancellation ratio divides the factor-average's energy by the mean
    member energy; values near zero expose destructive interference that
    stacking avoids.
    """
    if not members:
        raise ValueError("no members")
    layer_ids = fedavg_out.layer_ids
    if stacked_out.layer_ids != layer_ids:
        raise DimensionError("aggregates cover different layers")
    for m in members:
        if m.layer_ids != layer_ids:
            raise DimensionError("member covers different layers")
    rows = []
    for layer in layer_ids:
        member_e = tuple(energy_trace(m[layer]) for m in members)
        mean_e = sum(member_e) / len(member_e)
        fed_e = energy_trace(fedavg_out[layer])
        ratio = fed_e / mean_e if mean_e > 0 else 0.0
        rows.append(
            LayerEnergyRow(layer, member_e, fed_e, energy_trace(stacked_out[layer]), ratio)
        )
    return rows


def neutrality_score(latents_by_style: Mapping[str, np.ndarray]) -> float:
    """Mean pairwise Frechet distance between per-style latent populations.

    Zero when the populations are indistinguishable, which is exactly what
    a style-neutral shared pass should produce.
    """
    if not latents_by_style:
        raise ValueError("no latent populations")
    keys = sorted(latents_by_style)
    fits = {k: fit_gaussian(latents_by_style[k]) for k in keys}
    if len(keys) == 1:
        return 0.0
    total = 0.0
    pairs = 0
    for i, a in enumerate(keys):
        for b in keys[i + 1:]:
            total += frechet_2d(fits[a], fits[b])
            pairs += 1
    return total / pairs
