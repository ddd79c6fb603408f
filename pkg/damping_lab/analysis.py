"""
Tail Diagnostics

Turns sample streams into tail diagnostics: log-density histograms, tail-class
regressions, Hill indices, moment-scaling exponents, and empirical
large-deviation checks for the time-averaged damping.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np
import pandas as pd
from scipy import stats

from .errors import AnalysisError, InsufficientTailError, ModelSpecError
from .integrate import (
    MomentCurve, SampleBatch, ensemble_damping_exponential, integrated_damping,
)
from .model import ContractionCertificate, DampingSpec, DriftSpec, contraction_certificate, pi_average

logger = logging.getLogger(__name__)

POLYNOMIAL = "polynomial"
EXPONENTIAL = "exponential"
INTERMEDIATE = "intermediate"
GAUSSIAN = "gaussian"

DEFAULT_TAIL_QUANTILE = 0.99
MIN_TAIL_SAMPLES = 200
MIN_BIN_COUNT = 5
TIE_MARGIN = 0.02
HILL_PROBE_CUTOFF = 4.0
SHAPE_GRID = np.round(np.arange(0.5, 3.0 + 1e-9, 0.01), 2)

__all__ = [
    "LogHistogram", "TailReport", "HillEstimate", "ScalingFit", "LdpReport", "MomentCurve",
    "WeakDampingReport", "fit_tail", "hill_index", "moment_scaling_exponent", "ldp_empirical",
    "sample_summary", "gaussian_reference", "weak_damping_probe",
]


# ---------------------------------------------------------------------------
# Histograms
# ---------------------------------------------------------------------------

@dataclass
class LogHistogram:
    """Counts on fixed bin edges, with under/overflow so nothing is dropped.

    Works as a simulate_stream sink: source="norm" bins |x|, source="x" bins
    the x component selected by `component`.
    """

    edges: np.ndarray
    counts: np.ndarray = None
    underflow: int = 0
    overflow: int = 0
    spacing: str = "linear"
    source: str = "norm"
    component: int = 0

    def __post_init__(self):
        self.edges = np.asarray(self.edges, dtype=float)
        if self.edges.ndim != 1 or self.edges.size < 2 or np.any(np.diff(self.edges) <= 0):
            raise AnalysisError("histogram edges must be strictly increasing with at least one bin")
        if self.counts is None:
            self.counts = np.zeros(self.edges.size - 1, dtype=np.int64)
        self.counts = np.asarray(self.counts, dtype=np.int64)

    @classmethod
    def uniform(cls, lo: float, hi: float, n_bins: int, **kwargs) -> "LogHistogram":
        return cls(np.linspace(lo, hi, n_bins + 1), spacing="linear", **kwargs)

    @classmethod
    def log_spaced(cls, lo: float, hi: float, n_bins: int, **kwargs) -> "LogHistogram":
        if lo <= 0:
            raise AnalysisError("log-spaced bins need a positive lower edge")
        return cls(np.geomspace(lo, hi, n_bins + 1), spacing="log", **kwargs)

    @classmethod
    def from_samples(cls, samples, n_bins: int = 200, spacing: str = "linear",
                     lo: Optional[float] = None, hi: Optional[float] = None) -> "LogHistogram":
        data = _finite(samples)
        lo = float(data.min()) if lo is None else lo
        hi = float(data.max()) if hi is None else hi
        if hi <= lo:
            hi = lo + 1.0
        hist = cls.log_spaced(lo, hi, n_bins) if spacing == "log" else cls.uniform(lo, hi, n_bins)
        hist.update(data)
        return hist

    @property
    def total(self) -> int:
        return int(self.counts.sum()) + self.underflow + self.overflow

    @property
    def widths(self) -> np.ndarray:
        return np.diff(self.edges)

    @property
    def centers(self) -> np.ndarray:
        if self.spacing == "log":
            return np.sqrt(self.edges[:-1] * self.edges[1:])
        return 0.5 * (self.edges[:-1] + self.edges[1:])

    def update(self, values) -> None:
        values = np.asarray(values, dtype=float).ravel()
        self.underflow += int(np.sum(values < self.edges[0]))
        self.overflow += int(np.sum(values > self.edges[-1]))
        counts, _ = np.histogram(values, bins=self.edges)
        self.counts += counts

    def consume(self, batch: SampleBatch) -> None:
        self.update(batch.norms if self.source == "norm" else batch.x[:, self.component])

    def merge(self, other: "LogHistogram") -> "LogHistogram":
        if not np.array_equal(self.edges, other.edges):
            raise AnalysisError("cannot merge histograms with different edges")
        return LogHistogram(self.edges.copy(), self.counts + other.counts,
                            self.underflow + other.underflow, self.overflow + other.overflow,
                            self.spacing, self.source, self.component)

    def density(self) -> np.ndarray:
        return self.counts / (max(self.total, 1) * self.widths)

    def log_density(self) -> np.ndarray:
        with np.errstate(divide="ignore"):
            out = np.log(self.density())
        return np.where(self.counts > 0, out, np.nan)

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({"bin_center": self.centers, "count": self.counts,
                             "log_density": self.log_density()})


def _finite(samples) -> np.ndarray:
    data = np.asarray(samples, dtype=float).ravel()
    if data.size == 0:
        raise AnalysisError("no samples")
    if not np.all(np.isfinite(data)):
        raise AnalysisError("samples contain non-finite values")
    return data


# ---------------------------------------------------------------------------
# Tail-class regression
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TailReport:
    tail_class: str
    parameters: Dict[str, float]
    r_squared: Dict[str, float]
    shape_exponent: float
    tail_quantile: float
    threshold: float
    n_tail: int
    n_total: int
    spacing: str
    n_bins_used: int
    hill_probe: Optional[float] = None
    tie_margin: float = TIE_MARGIN

    @property
    def tail_parameter(self) -> float:
        key = {INTERMEDIATE: EXPONENTIAL}.get(self.tail_class, self.tail_class)
        return self.parameters[key]

    def to_dict(self) -> Dict:
        return {
            "class": self.tail_class,
            "tail_parameter": self.tail_parameter,
            "parameters": {
                "polynomial_index": self.parameters[POLYNOMIAL],
                "exponential_rate": self.parameters[EXPONENTIAL],
                "gaussian_coefficient": self.parameters[GAUSSIAN],
            },
            "r_squared": dict(self.r_squared),
            "shape_exponent": self.shape_exponent,
            "tail_quantile": self.tail_quantile,
            "threshold": self.threshold,
            "n_tail": self.n_tail,
            "n_total": self.n_total,
            "bins": {"spacing": self.spacing, "used": self.n_bins_used, "min_count": MIN_BIN_COUNT},
            "hill_probe": self.hill_probe,
            "tie_margin": self.tie_margin,
        }


def _weighted_line(feature: np.ndarray, y: np.ndarray, weights: np.ndarray):
    """Weighted least squares y ~ a + s * feature; returns (slope, intercept, R^2)."""
    slope, intercept = np.polyfit(feature, y, 1, w=np.sqrt(weights))
    resid = y - (intercept + slope * feature)
    mean = np.average(y, weights=weights)
    ss_tot = float(np.sum(weights * (y - mean) ** 2))
    r2 = 1.0 - float(np.sum(weights * resid ** 2)) / ss_tot if ss_tot > 0 else 1.0
    return float(slope), float(intercept), r2


def shape_exponent(x: np.ndarray, y: np.ndarray, weights: np.ndarray,
                   grid: np.ndarray = SHAPE_GRID) -> float:
    """r minimising the weighted residual of y ~ a - lam * x^r."""
    scaled = x / x.min()
    best_r, best_ss = float(grid[0]), math.inf
    for r in grid:
        feature = scaled ** r
        slope, intercept = np.polyfit(feature, y, 1, w=np.sqrt(weights))
        ss = float(np.sum(weights * (y - intercept - slope * feature) ** 2))
        if ss < best_ss:
            best_r, best_ss = float(r), ss
    return best_r


def _hill_probe(tail: np.ndarray, threshold: float) -> float:
    logs = np.log(tail / threshold)
    total = float(np.sum(logs))
    return tail.size / total if total > 0 else math.inf


def _tail_bins(data, tail_quantile: float, n_bins: int):
    if isinstance(data, LogHistogram):
        cumulative = (data.underflow + np.cumsum(data.counts)) / data.total
        start = int(np.searchsorted(cumulative, tail_quantile, side="left")) + 1
        counts = data.counts[start:]
        n_tail = int(counts.sum()) + data.overflow
        threshold = float(data.edges[min(start, data.edges.size - 1)])
        return (data.centers[start:], data.widths[start:], counts, n_tail, data.total,
                threshold, data.spacing, None)
    x = np.abs(_finite(data))
    threshold = float(np.quantile(x, tail_quantile))
    tail = x[x > threshold]
    if tail.size < MIN_TAIL_SAMPLES:
        raise InsufficientTailError(MIN_TAIL_SAMPLES, int(tail.size))
    probe = _hill_probe(tail, threshold) if threshold > 0 else math.inf
    top = float(tail.max()) * (1.0 + 1e-12)
    if probe < HILL_PROBE_CUTOFF:
        edges, spacing = np.geomspace(threshold, top, n_bins + 1), "log"
        centers = np.sqrt(edges[:-1] * edges[1:])
    else:
        edges, spacing = np.linspace(threshold, top, n_bins + 1), "linear"
        centers = 0.5 * (edges[:-1] + edges[1:])
    counts, _ = np.histogram(tail, bins=edges)
    return centers, np.diff(edges), counts, int(tail.size), int(x.size), threshold, spacing, probe


def fit_tail(data, tail_quantile: float = DEFAULT_TAIL_QUANTILE, n_bins: int = 40,
             tie_margin: float = TIE_MARGIN) -> TailReport:
    """Classify the tail of |samples| (or of a histogram) by log-density regression.

    The empirical log density on tail bins is regressed on log x, x and x^2.
    The class is the one with the largest R^2. When the exponential and
    gaussian fits are within tie_margin, the fitted shape exponent r of
    log f ~ a - lam x^r decides: r <= 1.3 exponential, r >= 1.7 gaussian,
    anything between is intermediate.
    """
    if not 0.0 < tail_quantile < 1.0:
        raise AnalysisError(f"tail_quantile must lie in (0, 1), got {tail_quantile}")
    centers, widths, counts, n_tail, n_total, threshold, spacing, probe = _tail_bins(
        data, tail_quantile, n_bins)
    if n_tail < MIN_TAIL_SAMPLES:
        raise InsufficientTailError(MIN_TAIL_SAMPLES, n_tail)
    keep = counts >= MIN_BIN_COUNT
    if keep.sum() < 3:
        raise InsufficientTailError(3, int(keep.sum()), f"tail bins with >= {MIN_BIN_COUNT} counts")
    x, w, c = centers[keep], widths[keep], counts[keep].astype(float)
    y = np.log(c / (n_total * w))

    slope_log, _, r2_poly = _weighted_line(np.log(x), y, c)
    slope_lin, _, r2_exp = _weighted_line(x, y, c)
    slope_sq, _, r2_gauss = _weighted_line(x ** 2, y, c)
    r_squared = {POLYNOMIAL: r2_poly, EXPONENTIAL: r2_exp, GAUSSIAN: r2_gauss}
    parameters = {POLYNOMIAL: -slope_log - 1.0, EXPONENTIAL: -slope_lin, GAUSSIAN: -slope_sq}
    r_hat = shape_exponent(x, y, c)

    tail_class = max(r_squared, key=r_squared.get)
    if tail_class != POLYNOMIAL and abs(r2_exp - r2_gauss) <= tie_margin:
        if r_hat <= 1.3:
            tail_class = EXPONENTIAL
        elif r_hat >= 1.7:
            tail_class = GAUSSIAN
        else:
            tail_class = INTERMEDIATE
    logger.debug("tail fit: R2 %s, shape %.2f -> %s", r_squared, r_hat, tail_class)
    return TailReport(tail_class, parameters, r_squared, r_hat, tail_quantile, threshold, n_tail,
                      n_total, spacing, int(keep.sum()), probe, tie_margin)


# ---------------------------------------------------------------------------
# Hill index
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class HillEstimate:
    alpha: float
    standard_error: float
    k: int
    threshold: float

    def to_dict(self) -> Dict:
        return {"alpha": self.alpha, "standard_error": self.standard_error, "k": self.k,
                "threshold": self.threshold}


def hill_index(samples, k: int) -> HillEstimate:
    """Hill estimate of the tail index from the k largest order statistics."""
    x = np.sort(_finite(samples))
    n = x.size
    if k < 10:
        raise InsufficientTailError(10, k, "top order statistics")
    if k > n // 10:
        raise InsufficientTailError(10 * k, n, f"samples for k = {k}")
    top = x[n - k:]
    threshold = x[n - k - 1]
    if threshold <= 0:
        raise AnalysisError("Hill estimation needs positive samples above the threshold")
    alpha = k / float(np.sum(np.log(top / threshold)))
    return HillEstimate(alpha, alpha / math.sqrt(k), int(k), float(threshold))


# ---------------------------------------------------------------------------
# Moment scaling
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ScalingFit:
    slope: float
    standard_error: float
    ci_low: float
    ci_high: float
    confidence: float
    n_points: int

    def to_dict(self) -> Dict:
        return {"slope": self.slope, "standard_error": self.standard_error,
                "ci": [self.ci_low, self.ci_high], "confidence": self.confidence,
                "n_points": self.n_points}


def moment_scaling_exponent(curve: MomentCurve, confidence: float = 0.95) -> ScalingFit:
    """Slope of log E|X|^{2p} against p log p.

    p and a constant enter as nuisance regressors, so a scale factor
    sigma^{2p} does not leak into the slope.
    """
    p = np.asarray(curve.p, dtype=float)
    y = np.asarray(curve.log_estimates, dtype=float)
    if not np.all(np.isfinite(y)):
        raise AnalysisError("moment curve has non-finite entries")
    if p.min() > 2.0 or p.max() < 6.0 or p.size < 5:
        raise AnalysisError("the p-grid must span at least {2, ..., 6}")
    design = np.column_stack([p * np.log(p), p, np.ones_like(p)])
    coef, _, rank, _ = np.linalg.lstsq(design, y, rcond=None)
    if rank < 3:
        raise AnalysisError("p-grid is degenerate for the scaling regression")
    dof = p.size - 3
    resid = y - design @ coef
    sigma2 = float(resid @ resid) / dof
    cov = sigma2 * np.linalg.inv(design.T @ design)
    se = math.sqrt(max(float(cov[0, 0]), 0.0))
    half = float(stats.t.ppf(0.5 + confidence / 2.0, dof)) * se
    slope = float(coef[0])
    return ScalingFit(slope, se, slope - half, slope + half, confidence, int(p.size))


# ---------------------------------------------------------------------------
# Large deviations of the time-averaged damping
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LdpReport:
    c_grid: np.ndarray
    t_grid: np.ndarray
    exceedances: np.ndarray
    probabilities: np.ndarray
    log_probabilities: np.ndarray
    censored: np.ndarray
    bound_exponents: np.ndarray
    D_M: float
    delta: float
    pi_average: float
    n_traj: int
    empirical_variance: np.ndarray
    certificate: ContractionCertificate
    lipschitz: float

    def to_frame(self) -> pd.DataFrame:
        rows = []
        for i, c in enumerate(self.c_grid):
            for j, t in enumerate(self.t_grid):
                rows.append({
                    "c": c, "t": t, "exceedances": int(self.exceedances[i, j]),
                    "probability": self.probabilities[i, j],
                    "log_probability": self.log_probabilities[i, j],
                    "censored": bool(self.censored[i, j]),
                    "bound_exponent": self.bound_exponents[i, j],
                })
        return pd.DataFrame(rows)

    def violations(self, log_safety: float = math.log(10.0), min_exceedances: int = 50) -> List[Dict]:
        """Cells whose empirical log-probability exceeds the bound plus log_safety."""
        out = []
        for i, c in enumerate(self.c_grid):
            for j, t in enumerate(self.t_grid):
                if self.exceedances[i, j] < min_exceedances:
                    continue
                if self.log_probabilities[i, j] > self.bound_exponents[i, j] + log_safety:
                    out.append({"c": float(c), "t": float(t),
                                "log_probability": float(self.log_probabilities[i, j]),
                                "bound_exponent": float(self.bound_exponents[i, j])})
        return out

    def to_dict(self) -> Dict:
        return {
            "D_M": self.D_M, "delta": self.delta, "pi_average": self.pi_average,
            "n_traj": self.n_traj, "lipschitz": self.lipschitz,
            "certificate": self.certificate.to_dict(),
            "c_grid": self.c_grid.tolist(), "t_grid": self.t_grid.tolist(),
            "empirical_variance": self.empirical_variance.tolist(),
            "censoring_rule": "zero exceedances reported as probability <= min(1, 3 / n_traj)",
            "violations": self.violations(),
        }


def ldp_empirical(drift: DriftSpec, damping: DampingSpec, t_grid: Sequence[float],
                  c_grid: Sequence[float], n_traj: int,
                  certificate: Optional[ContractionCertificate] = None, delta: float = 0.05,
                  dt: float = 0.01, seed: int = 0, workers: int = 1,
                  mc_budget: Optional[int] = None) -> LdpReport:
    """Exceedance of D_t = (1/t) int b(u_s) ds - <pi, b> over D_M c, against the bound.

    The bound exponent is -(c^2/2 - delta) D_M t with D_M = C^2 gamma^-2 |b|_Lip^2.
    """
    if n_traj < 2:
        raise ModelSpecError(f"ldp_empirical needs at least two trajectories, got {n_traj}")
    cert = contraction_certificate(drift, certificate)
    lip = damping.global_lipschitz()
    if not math.isfinite(lip):
        raise ModelSpecError(f"{damping.label()} is not globally Lipschitz")
    D_M = cert.C_gamma ** 2 / cert.gamma ** 2 * lip ** 2
    avg = pi_average(damping, drift, mc_budget=mc_budget, seed=seed).value
    t_arr = np.asarray(sorted(float(t) for t in t_grid))
    c_arr = np.asarray([float(c) for c in c_grid])
    integrals = integrated_damping(drift, damping, t_arr, dt, n_traj, seed=seed, workers=workers)
    deviations = integrals / t_arr[None, :] - avg

    exceed = np.array([[int(np.sum(deviations[:, j] > D_M * c)) for j in range(t_arr.size)]
                       for c in c_arr])
    censored = exceed == 0
    probabilities = np.where(censored, min(1.0, 3.0 / n_traj), exceed / n_traj)
    log_prob = np.log(probabilities)
    bound = np.array([[-(0.5 * c ** 2 - delta) * D_M * t for t in t_arr] for c in c_arr])
    if censored.any():
        logger.warning("%d LDP cells had no exceedances; reporting rule-of-three upper bounds",
                       int(censored.sum()))
    return LdpReport(c_arr, t_arr, exceed, probabilities, log_prob, censored, bound, D_M, delta,
                     avg, n_traj, deviations.var(axis=0, ddof=1), cert, lip)


# ---------------------------------------------------------------------------
# Summaries
# ---------------------------------------------------------------------------

def sample_summary(samples) -> Dict[str, float]:
    data = _finite(samples)
    return {
        "n": int(data.size),
        "mean": float(np.mean(data)),
        "variance": float(np.var(data, ddof=1)),
        "excess_kurtosis": float(stats.kurtosis(data, fisher=True)),
        "max_abs": float(np.max(np.abs(data))),
    }


def gaussian_reference(hist: LogHistogram, mean: float, variance: float) -> pd.DataFrame:
    """Log density of N(mean, variance) on the histogram's bin centers."""
    if variance <= 0:
        raise AnalysisError("reference variance must be positive")
    centers = hist.centers
    return pd.DataFrame({"bin_center": centers,
                         "log_density": stats.norm.logpdf(centers, loc=mean, scale=math.sqrt(variance))})


@dataclass(frozen=True)
class WeakDampingReport:
    curve: MomentCurve
    lower_bound: np.ndarray
    m: int
    constants: Dict[str, float] = field(default_factory=dict)

    @property
    def consistent(self) -> np.ndarray:
        return self.curve.log_estimates + 3.0 * self.curve.log_standard_errors >= self.lower_bound

    def to_frame(self) -> pd.DataFrame:
        frame = self.curve.to_frame()
        frame["lower_bound"] = self.lower_bound
        frame["consistent"] = self.consistent
        return frame

    def to_dict(self) -> Dict:
        return {"m": self.m, "constants": dict(self.constants), "curve": self.curve.to_dict(),
                "lower_bound": self.lower_bound.tolist(), "consistent": self.consistent.tolist()}


def weak_damping_probe(drift: DriftSpec, damping: DampingSpec, p_grid: Sequence[float],
                       t_final: float, n_traj: int, certificate=None, dt: float = 0.01,
                       seed: int = 0, workers: int = 1) -> WeakDampingReport:
    """Empirical log E exp(-2p int_0^t b) beside the certified lower bound.

    With a membership certificate (m, M, M_0 and the stationary expectation
    constant), the bound is -2 p^{1/2^m} M t - 2 sqrt(p) (M_0 + E). Without
    one, only the empirical curve is reported.
    """
    curve = ensemble_damping_exponential(drift, damping, p_grid, t_final, n_traj, dt=dt,
                                         seed=seed, workers=workers)
    if certificate is None:
        return WeakDampingReport(curve, np.full(curve.p.size, -np.inf), 0)
    m = int(certificate.m)
    p = curve.p
    M, M0, E = certificate.M, certificate.M0, certificate.expectation_constant
    bound = -2.0 * p ** (1.0 / 2 ** m) * M * t_final - 2.0 * np.sqrt(p) * (M0 + E)
    return WeakDampingReport(curve, bound, m, {"M": M, "M0": M0, "expectation_constant": E})
