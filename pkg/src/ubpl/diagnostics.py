"""Ensemble variance decomposition, Chebyshev bounds, calibration curves and metrics.

For T predictors observed on N inputs the variance of the ensemble mean
splits exactly into per-predictor variances and pairwise covariances:

    var(mean_t h_t) = (1/T^2) [ sum_t var(h_t) + 2 sum_{t<j} cov(h_t, h_j) ]

All moments are population moments over the N axis. Each unordered pair is
counted once with weight 2; summing 2*cov over all ordered pairs would count
every pair twice.
"""

from __future__ import annotations

import itertools
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np

__all__ = [
    "ChebyshevReport",
    "VectorChebyshevReport",
    "CalibrationCurve",
    "DEFAULT_EPSILONS",
    "variance_decomposition",
    "vector_variance_decomposition",
    "chebyshev_bound",
    "calibration_curve",
    "error_rate",
    "pck",
    "keypoint_mse",
]

DEFAULT_EPSILONS = (0.1, 0.2, 0.5)


@dataclass
class ChebyshevReport:
    T: int
    var_terms: list[float]
    covar_terms: dict[str, float]  # "t,j" -> cov(h_t, h_j) for t < j
    ensemble_variance: float
    epsilon: float
    bound: float
    empirical_tail: float

    def decomposed_variance(self) -> float:
        return (np.sum(self.var_terms) + 2.0 * np.sum(list(self.covar_terms.values()))) / self.T**2

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class VectorChebyshevReport:
    """Per-coordinate reports plus a trace aggregate.

    The aggregate bound is the multivariate Chebyshev inequality
    P(||H - E H|| >= eps) <= trace(cov H) / eps^2.
    """

    coordinates: list[ChebyshevReport]
    trace_var_terms: list[float]
    trace_covar_terms: dict[str, float]
    trace_ensemble_variance: float
    epsilon: float
    bound: float
    empirical_tail: float

    def to_dict(self) -> dict:
        return {
            "coordinates": [c.to_dict() for c in self.coordinates],
            "trace_var_terms": self.trace_var_terms,
            "trace_covar_terms": self.trace_covar_terms,
            "trace_ensemble_variance": self.trace_ensemble_variance,
            "epsilon": self.epsilon,
            "bound": self.bound,
            "empirical_tail": self.empirical_tail,
        }


def chebyshev_bound(variance: float, epsilon: float, clamp: bool = True) -> float:
    """variance / epsilon^2, clipped to [0, 1] when read as a probability."""
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    if variance < 0:
        raise ValueError("variance must be non-negative")
    value = variance / epsilon**2
    return float(min(max(value, 0.0), 1.0)) if clamp else float(value)


def _pair_key(t: int, j: int) -> str:
    return f"{t},{j}"


def _moments(preds: np.ndarray) -> tuple[list[float], dict[str, float]]:
    centred = preds - preds.mean(axis=1, keepdims=True)
    n = preds.shape[1]
    var_terms = [float(np.dot(c, c) / n) for c in centred]
    covar = {_pair_key(t, j): float(np.dot(centred[t], centred[j]) / n)
             for t, j in itertools.combinations(range(len(preds)), 2)}
    return var_terms, covar


def variance_decomposition(predictions, epsilon: float = 0.1) -> ChebyshevReport:
    """Decompose the variance of the mean of T scalar predictors observed on N inputs."""
    preds = np.asarray(predictions, dtype=np.float64)
    if preds.ndim == 1:
        preds = preds[None]
    if preds.ndim != 2:
        raise ValueError("predictions must be a T x N matrix")
    t, n = preds.shape
    if t < 1 or n < 2:
        raise ValueError("need T >= 1 predictors and N >= 2 observations")
    var_terms, covar = _moments(preds)
    ens = preds.mean(axis=0)
    ens_var = float(np.mean((ens - ens.mean()) ** 2))
    decomposed = (np.sum(var_terms) + 2.0 * np.sum(list(covar.values()))) / t**2
    if not np.isclose(decomposed, ens_var, rtol=1e-8, atol=1e-10):
        raise ArithmeticError(f"decomposition identity violated: {decomposed} vs {ens_var}")
    tail = float(np.mean(np.abs(ens - ens.mean()) >= epsilon))
    return ChebyshevReport(t, var_terms, covar, ens_var, epsilon, chebyshev_bound(ens_var, epsilon), tail)


def vector_variance_decomposition(predictions, epsilon: float = 0.1) -> VectorChebyshevReport:
    """T x N x D predictions: decompose every output coordinate and the trace."""
    preds = np.asarray(predictions, dtype=np.float64)
    if preds.ndim != 3:
        raise ValueError("predictions must be T x N x D")
    t, n, d = preds.shape
    coords = [variance_decomposition(preds[:, :, k], epsilon) for k in range(d)]
    var_trace = [float(np.sum([c.var_terms[i] for c in coords])) for i in range(t)]
    covar_trace = {key: float(np.sum([c.covar_terms[key] for c in coords])) for key in coords[0].covar_terms}
    ens = preds.mean(axis=0)
    dev = np.linalg.norm(ens - ens.mean(axis=0), axis=1)
    ens_trace = float(np.sum([c.ensemble_variance for c in coords]))
    return VectorChebyshevReport(coords, var_trace, covar_trace, ens_trace, epsilon,
                                 chebyshev_bound(ens_trace, epsilon), float(np.mean(dev >= epsilon)))


@dataclass
class CalibrationCurve:
    edges: np.ndarray
    mean_confidence: np.ndarray  # NaN-free; 0 where empty
    mean_error: np.ndarray
    count: np.ndarray
    empty: np.ndarray

    @property
    def nonempty_bins(self) -> int:
        return int((~self.empty).sum())

    def is_decreasing(self) -> bool:
        """True when mean error strictly decreases across the non-empty bins."""
        errs = self.mean_error[~self.empty]
        return bool(len(errs) >= 2 and np.all(np.diff(errs) < 0))

    def rows(self) -> list[dict]:
        return [
            {"bin_low": float(self.edges[i]), "bin_high": float(self.edges[i + 1]),
             "mean_confidence": float(self.mean_confidence[i]), "mean_error": float(self.mean_error[i]),
             "count": int(self.count[i]), "empty": bool(self.empty[i])}
            for i in range(len(self.count))
        ]


def calibration_curve(confidences, errors, num_bins: int = 10) -> CalibrationCurve:
    """Equal-width confidence bins on [0, 1]; the last bin is closed on the right."""
    if num_bins < 1:
        raise ValueError("need at least one bin")
    conf = np.asarray(confidences, dtype=np.float64).ravel()
    err = np.asarray(errors, dtype=np.float64).ravel()
    if conf.shape != err.shape:
        raise ValueError("confidences and errors differ in length")
    if conf.size and (conf.min() < 0 or conf.max() > 1):
        raise ValueError("confidences must lie in [0, 1]")
    edges = np.linspace(0.0, 1.0, num_bins + 1)
    idx = np.minimum((conf * num_bins).astype(np.int64), num_bins - 1)
    count = np.bincount(idx, minlength=num_bins)
    sum_conf = np.bincount(idx, weights=conf, minlength=num_bins)
    sum_err = np.bincount(idx, weights=err, minlength=num_bins)
    empty = count == 0
    safe = np.where(empty, 1, count)
    return CalibrationCurve(edges, np.where(empty, 0.0, sum_conf / safe), np.where(empty, 0.0, sum_err / safe), count, empty)


def error_rate(pred_labels, true_labels) -> float:
    pred, true = np.asarray(pred_labels), np.asarray(true_labels)
    if pred.shape != true.shape or pred.size == 0:
        raise ValueError("label arrays must be non-empty and equal length")
    return float(100.0 * np.mean(pred != true))


def _visible(truth: np.ndarray) -> np.ndarray:
    truth = np.asarray(truth, dtype=np.float64)
    if truth.shape[-1] == 3:
        return truth[..., 2] > 0
    return np.ones(truth.shape[:-1], dtype=bool)


def pck(pred_keypoints, true_keypoints, alpha: float, normalization: float) -> float:
    """Fraction of visible keypoints within ``alpha * normalization`` (Euclidean)."""
    if normalization <= 0:
        raise ValueError("normalization must be positive")
    pred = np.asarray(pred_keypoints, dtype=np.float64)[..., :2]
    truth = np.asarray(true_keypoints, dtype=np.float64)
    vis = _visible(truth)
    if not vis.any():
        raise ValueError("no visible keypoints")
    dist = np.linalg.norm(pred - truth[..., :2], axis=-1)
    return float(np.mean(dist[vis] <= alpha * normalization))


def keypoint_mse(pred, truth) -> float:
    """Mean squared Euclidean error over visible keypoints."""
    p = np.asarray(pred, dtype=np.float64)[..., :2]
    t = np.asarray(truth, dtype=np.float64)
    vis = _visible(t)
    if not vis.any():
        raise ValueError("no visible keypoints")
    d2 = np.sum((p - t[..., :2]) ** 2, axis=-1)
    return float(np.mean(d2[vis]))
