"""Accuracy metrics for fitted parameter maps."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .model import PHI, SCALAR_PARAMS, THETA, polar_to_cartesian


class UndefinedCorrelationError(ValueError):
    pass


def pearson_r(x, y) -> float:
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape != y.shape or x.ndim != 1 or x.size < 2:
        raise ValueError("pearson_r needs two 1-D vectors of equal length >= 2")
    dx = x - x.mean()
    dy = y - y.mean()
    sxx = float(dx @ dx)
    syy = float(dy @ dy)
    if sxx == 0 or syy == 0:
        raise UndefinedCorrelationError("correlation undefined for a zero-variance vector")
    return float(np.clip((dx @ dy) / np.sqrt(sxx * syy), -1.0, 1.0))


def angular_error(theta1, phi1, theta2, phi2):
    """Angle between two fibre axes, ignoring their sign; in [0, pi/2]."""
    n1 = polar_to_cartesian(theta1, phi1)
    n2 = polar_to_cartesian(theta2, phi2)
    cos = np.abs(np.sum(n1 * n2, axis=-1))
    out = np.arccos(np.clip(cos, 0.0, 1.0))
    return float(out) if np.ndim(out) == 0 else out


def dec_color(theta, phi, weight=1.0):
    """Direction-encoded colour: ``round(255 * weight * |n|)`` per channel as uint8."""
    weight = np.asarray(weight, dtype=float)
    if np.any((weight < 0) | (weight > 1)):
        raise ValueError("DEC weight must lie in [0, 1]")
    n = np.abs(polar_to_cartesian(theta, phi))
    rgb = np.rint(255.0 * weight[..., None] * n).astype(np.uint8)
    return tuple(int(c) for c in rgb) if rgb.ndim == 1 else rgb


@dataclass
class FitReport:
    label: str
    pearson: dict
    angular_error_mean: float
    angular_error_median: float
    wall_time: float | None
    n_voxels: int
    dataset: dict = field(default_factory=dict)

    def as_dict(self) -> dict:
        return asdict(self)


def fit_report(truth, est, label, wall_time=None, dataset=None) -> FitReport:
    truth = np.asarray(truth, dtype=float)
    est = np.asarray(est, dtype=float)
    if truth.shape != est.shape:
        raise ValueError(f"truth {truth.shape} and estimates {est.shape} are not aligned")
    r = {}
    for i, name in enumerate(SCALAR_PARAMS):
        try:
            r[name] = pearson_r(truth[:, i], est[:, i])
        except UndefinedCorrelationError:
            r[name] = float("nan")
    ang = angular_error(truth[:, THETA], truth[:, PHI], est[:, THETA], est[:, PHI])
    return FitReport(
        label=label,
        pearson=r,
        angular_error_mean=float(np.mean(ang)),
        angular_error_median=float(np.median(ang)),
        wall_time=None if wall_time is None else float(wall_time),
        n_voxels=int(truth.shape[0]),
        dataset=dict(dataset or {}),
    )


def compare_fits(truth, est_a, est_b, timings=(None, None), labels=("a", "b"), dataset=None):
    """Reports for two fitters on the same voxels."""
    return (
        fit_report(truth, est_a, labels[0], timings[0], dataset),
        fit_report(truth, est_b, labels[1], timings[1], dataset),
    )
