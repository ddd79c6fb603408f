"""
Drift-Inequality and Membership Certificates

Grid certificates on a declared box: the eta lower inequality (with an
automated search over its constants), the theta upper inequality, and the
six-condition membership check behind exponential-like tails, built from
radial test functions g_k = -M_k |u - u*|^{2^{m+1-k}}.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from ..errors import ModelSpecError
from ..integrate import ensemble_initial_hidden
from ..model import (
    OU, STATIONARY, Box, DampingSpec, DriftSpec, default_box, gaussian_abs_moment, pi_average,
    stationary_law,
)
from .generator import GeneratorFn, carre_du_champ, hidden_generator, power_norm

logger = logging.getLogger(__name__)

ETA_LOWER = "eta-lower"
THETA_UPPER = "theta-upper"
DELTA_FRACTION = 0.05
RHO_FRACTION = 0.01
RELATIVE_TOLERANCE = 1e-9


@dataclass(frozen=True)
class LyapunovCheckReport:
    inequality: str
    grid: np.ndarray
    margins: np.ndarray
    parameters: Dict[str, float]
    search: Optional[Dict] = None

    @property
    def min_margin(self) -> float:
        return float(np.min(self.margins))

    @property
    def passed(self) -> bool:
        return self.min_margin >= 0.0

    @property
    def verdict(self) -> str:
        return "pass" if self.passed else "fail"

    @property
    def worst_point(self) -> List[float]:
        return self.grid[int(np.argmin(self.margins))].tolist()

    def to_frame(self) -> pd.DataFrame:
        frame = pd.DataFrame(self.grid, columns=[f"u{i}" for i in range(self.grid.shape[1])])
        frame["margin"] = self.margins
        return frame

    def to_dict(self) -> Dict:
        return {
            "inequality": self.inequality,
            "verdict": self.verdict,
            "min_margin": self.min_margin,
            "worst_point": self.worst_point,
            "parameters": dict(self.parameters),
            "grid_points": int(self.grid.shape[0]),
            "search": self.search,
        }


def _slacks(damping: DampingSpec, drift: DriftSpec, delta, rho, pi_avg) -> Tuple[float, float, float]:
    if delta is not None and rho is not None and pi_avg is not None:
        return delta, rho, pi_avg
    if pi_avg is None:
        pi_avg = pi_average(damping, drift).value
    scale = abs(pi_avg) if pi_avg != 0 else 1.0
    delta = DELTA_FRACTION * scale if delta is None else delta
    rho = RHO_FRACTION * scale if rho is None else rho
    return delta, rho, pi_avg


def _grid(drift: DriftSpec, grid, box: Optional[Box], grid_n: int) -> np.ndarray:
    if grid is None:
        grid = (box if box is not None else default_box(drift)).grid(grid_n)
    grid = np.asarray(grid, dtype=float)
    if grid.ndim == 1:
        grid = grid[:, None]
    if grid.shape[1] != drift.dim:
        raise ModelSpecError(f"grid has dimension {grid.shape[1]}, hidden process has {drift.dim}")
    return grid


def verify_drift_inequality(candidate: GeneratorFn, role: str, damping: DampingSpec,
                            drift: DriftSpec, q: float, delta: Optional[float] = None,
                            rho: Optional[float] = None, grid=None, box: Optional[Box] = None,
                            grid_n: int = 201, pi_avg: Optional[float] = None,
                            extra: Optional[Dict] = None) -> LyapunovCheckReport:
    """Pointwise margins of the eta lower or theta upper drift inequality.

    eta-lower:   tr hess eta + q |grad eta|^2 + 2 <h, grad eta>
                 >= 2 b + 2 q^-1 (delta + delta |b| + rho)
    theta-upper: L theta <= b - q^-1 delta |b| - q^-1 (rho + delta) - q/2 |grad theta|^2

    Margins are signed so that nonnegative means the inequality holds.
    """
    if q <= 0:
        raise ModelSpecError(f"q must be positive, got {q}")
    delta, rho, pi_avg = _slacks(damping, drift, delta, rho, pi_avg)
    points = _grid(drift, grid, box, grid_n)
    x = np.zeros((points.shape[0], candidate.d_x))
    grad = candidate.grad_u(x, points)
    grad_sq = np.sum(grad ** 2, axis=-1)
    b = damping(points)
    if role == ETA_LOWER:
        trace = np.trace(candidate.hess_u(x, points), axis1=-2, axis2=-1)
        lhs = trace + q * grad_sq + 2.0 * np.sum(drift.drift(points) * grad, axis=-1)
        rhs = 2.0 * b + 2.0 / q * (delta + delta * np.abs(b) + rho)
        margins = lhs - rhs
    elif role == THETA_UPPER:
        lhs = hidden_generator(candidate, drift, points)
        rhs = b - delta * np.abs(b) / q - (rho + delta) / q - 0.5 * q * grad_sq
        margins = rhs - lhs
    else:
        raise ModelSpecError(f"unknown inequality role {role!r}")
    params = {"q": q, "delta": delta, "rho": rho, "pi_average": pi_avg}
    params.update(extra or {})
    return LyapunovCheckReport(role, points, margins, params)


def search_eta(damping: DampingSpec, drift: DriftSpec, m: float = 2.0, box: Optional[Box] = None,
               grid_n: int = 201, delta: Optional[float] = None, rho: Optional[float] = None,
               c_grid: Optional[Sequence[float]] = None, q_grid: Optional[Sequence[float]] = None,
               center: Optional[Sequence[float]] = None,
               pi_avg: Optional[float] = None) -> LyapunovCheckReport:
    """Search (c, q) for eta(u) = -c |u - u*|^m satisfying the eta lower inequality.

    u* defaults to the grid minimiser of b. Pairs are scanned by increasing q;
    at the first q with a feasible c, the c with the largest margin is kept.
    Without a feasible pair the report carries the best margin attained.
    """
    delta, rho, pi_avg = _slacks(damping, drift, delta, rho, pi_avg)
    points = _grid(drift, None, box, grid_n)
    b = damping(points)
    u_star = points[int(np.argmin(b))] if center is None else np.atleast_1d(np.asarray(center, float))
    c_values = np.logspace(-4, 0, 41) if c_grid is None else np.asarray(c_grid, dtype=float)
    q_values = np.logspace(0, 4, 41) if q_grid is None else np.asarray(q_grid, dtype=float)

    # eta = c * eta_1 makes every term polynomial in (c, q)
    unit = power_norm(1.0, m, u_star)
    x = np.zeros((points.shape[0], 0))
    grad = unit.grad_u(x, points)
    trace = np.trace(unit.hess_u(x, points), axis1=-2, axis2=-1)
    linear_part = trace + 2.0 * np.sum(drift.drift(points) * grad, axis=-1)
    quadratic_part = np.sum(grad ** 2, axis=-1)
    c = c_values[None, :, None]
    qq = q_values[:, None, None]
    lhs = c * linear_part + qq * c ** 2 * quadratic_part
    rhs = 2.0 * b + 2.0 / qq * (delta + delta * np.abs(b) + rho)
    worst = np.min(lhs - rhs, axis=-1)  # (n_q, n_c)

    feasible = worst >= 0
    search = {"c_range": [float(c_values.min()), float(c_values.max())],
              "q_range": [float(q_values.min()), float(q_values.max())],
              "budget": int(c_values.size * q_values.size), "m": m,
              "u_star": u_star.tolist(), "feasible": bool(feasible.any())}
    if feasible.any():
        iq = int(np.argmax(feasible.any(axis=1)))
        ic = int(np.argmax(np.where(feasible[iq], worst[iq], -np.inf)))
    else:
        iq, ic = np.unravel_index(int(np.argmax(worst)), worst.shape)
        logger.info("eta search: no feasible pair in %d tries, best margin %.4g",
                    search["budget"], float(worst[iq, ic]))
    c_best, q_best = float(c_values[ic]), float(q_values[iq])
    report = verify_drift_inequality(power_norm(c_best, m, u_star), ETA_LOWER, damping, drift, q_best,
                                     delta, rho, grid=points, pi_avg=pi_avg,
                                     extra={"c": c_best, "m": m})
    return LyapunovCheckReport(report.inequality, report.grid, report.margins, report.parameters, search)


# ---------------------------------------------------------------------------
# Membership certificate
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ConditionResult:
    description: str
    min_margin: float
    passed: bool

    def to_dict(self) -> Dict:
        return {"description": self.description, "min_margin": self.min_margin, "passed": self.passed}


@dataclass(frozen=True)
class AmCertificate:
    m: int
    center: Tuple[float, ...]
    C: float
    levels: Tuple[float, ...]
    exponents: Tuple[int, ...]
    M: float
    M0: float
    expectation_constant: float
    m1_scaled: bool
    conditions: Dict[str, ConditionResult]
    box: Box
    grid_size: int
    dissipation_margin: float
    notes: List[str] = field(default_factory=list)

    @property
    def member(self) -> bool:
        return all(c.passed for c in self.conditions.values())

    @property
    def verdict(self) -> str:
        return "member" if self.member else "non-member"

    @property
    def failed(self) -> List[str]:
        return [k for k, c in self.conditions.items() if not c.passed]

    def to_dict(self) -> Dict:
        return {
            "verdict": self.verdict,
            "m": self.m,
            "center": list(self.center),
            "growth_constant": self.C,
            "levels": list(self.levels),
            "exponents": list(self.exponents),
            "M": self.M,
            "M0": self.M0,
            "M1": self.expectation_constant,
            "M1_level_scaled": self.m1_scaled,
            "conditions": {k: c.to_dict() for k, c in self.conditions.items()},
            "box": self.box.to_dict(),
            "grid_size": self.grid_size,
            "dissipation_margin": self.dissipation_margin,
            "notes": list(self.notes),
        }


def _condition(description: str, lhs, rhs) -> ConditionResult:
    lhs = np.asarray(lhs, dtype=float)
    rhs = np.asarray(rhs, dtype=float)
    diff = lhs - rhs
    tol = RELATIVE_TOLERANCE * np.maximum(1.0, np.maximum(np.abs(lhs), np.abs(rhs)))
    return ConditionResult(description, float(np.min(diff)), bool(np.all(diff >= -tol)))


def stationary_sample(drift: DriftSpec, n: int, seed: int = 0, dt: float = 0.01,
                      burn_in: int = 2000) -> np.ndarray:
    """n draws from the stationary law: exact for OU, burnt-in chains otherwise."""
    if isinstance(drift, OU):
        mean, cov = stationary_law(drift)
        rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(11,)))
        return rng.multivariate_normal(mean, cov, size=n)
    return ensemble_initial_hidden(drift, STATIONARY, seed, np.arange(n), burn_in, dt)


def _radial_expectations(drift: DriftSpec, center: np.ndarray, exponents: Sequence[int],
                         mc_budget: int, seed: int) -> Tuple[np.ndarray, str]:
    if isinstance(drift, OU) and drift.is_scalar:
        mean, cov = stationary_law(drift)
        sd = math.sqrt(float(cov[0, 0]))
        shift = float(mean[0] - center[0])
        return np.array([gaussian_abs_moment(n, shift, sd) for n in exponents]), "closed-form"
    sample = stationary_sample(drift, mc_budget, seed)
    r = np.linalg.norm(sample - center, axis=-1)
    return np.array([np.mean(r ** n) for n in exponents]), "monte-carlo"


def check_Am(damping: DampingSpec, drift: DriftSpec, m: int, box: Optional[Box] = None,
             grid_n: int = 401, p_probe: Sequence[float] = (1.0, 2.0, 4.0, 16.0, 256.0),
             mc_budget: int = 20000, seed: int = 0) -> AmCertificate:
    """Build g_1..g_m from the growth of b and check the six membership conditions.

    C is the grid maximum of b / r^{2^{m+1}-2}; M_1 = sqrt(C) / 2^m, multiplied
    by sqrt(2) when that leaves the level-1 constraint short. Later levels use
    M_k = sqrt(2 C_{k-1}) / n_k with C_{k-1} = M_{k-1} n_{k-1} (M_lam + (n_{k-1} - 2 + d_u) / 2).
    """
    if m < 1:
        raise ModelSpecError(f"m must be >= 1, got {m}")
    box = box if box is not None else default_box(drift)
    diss = drift.dissipation_constants()
    center = np.asarray(diss.center, dtype=float)
    d_u = drift.dim
    points = box.grid(grid_n)
    x = np.zeros((points.shape[0], 0))
    b = damping(points)
    r = np.linalg.norm(points - center, axis=-1)
    notes: List[str] = []

    top = 2 ** (m + 1) - 2
    away = r > 1e-12
    C = float(np.max(b[away] / r[away] ** top)) if away.any() else 0.0
    C = max(C, 0.0)
    exponents = tuple(2 ** (m + 1 - k) for k in range(1, m + 1))

    M_1 = math.sqrt(C) / 2 ** m
    g1 = power_norm(M_1, exponents[0], center)
    scaled = False
    if not _condition("", carre_du_champ(g1, g1, x, points), b).passed:
        M_1 *= math.sqrt(2.0)
        scaled = True
        logger.warning("level-1 constraint short with M_1 = sqrt(C)/2^m; scaling M_1 by sqrt(2)")
        notes.append("M_1 scaled by sqrt(2) to meet the level-1 constraint")

    levels = [M_1]
    for k in range(1, m):
        n_prev = exponents[k - 1]
        C_prev = levels[-1] * n_prev * (diss.M_lam + 0.5 * (n_prev - 2 + d_u))
        levels.append(math.sqrt(2.0 * C_prev) / exponents[k])
    g = [power_norm(M_k, n_k, center) for M_k, n_k in zip(levels, exponents)]
    M = 2.0 * levels[-1] * diss.M_lam + levels[-1] * d_u
    M0 = 0.0

    conditions: Dict[str, ConditionResult] = {}
    b_center = float(damping(center))
    conditions["1"] = _condition(
        "b >= 0 and b(u*) = 0",
        np.append(b, -abs(b_center)), np.zeros(b.size + 1))
    conditions["2"] = _condition("level-1 constraint Gamma(g_1) >= b",
                                 carre_du_champ(g[0], g[0], x, points), b)
    if m > 1:
        lhs = np.concatenate([
            carre_du_champ(g[k], g[k], x, points) + hidden_generator(g[k - 1], drift, points)
            for k in range(1, m)
        ])
        conditions["3"] = _condition("level-k constraints Gamma(g_k) + L g_{k-1} >= 0",
                                     lhs, np.zeros_like(lhs))
    else:
        conditions["3"] = ConditionResult("level-k constraints (none for m = 1)", 0.0, True)
    conditions["4"] = _condition(f"L g_m >= -M with M = {M:.6g}",
                                 hidden_generator(g[-1], drift, points), np.full(points.shape[0], -M))

    moments, provenance = _radial_expectations(drift, center, exponents, mc_budget, seed)
    expectation_constant = float(np.sum(np.asarray(levels) * moments))
    upper, lower = [], []
    for p in p_probe:
        weights = np.array([p ** (1.0 / 2 ** k) for k in range(1, m + 1)])
        G = sum(w * gk(x, points) for w, gk in zip(weights, g))
        upper.append(math.sqrt(p) * M0 - G)
        lower.append(np.atleast_1d(-float(np.sum(weights * np.asarray(levels) * moments))
                                   + math.sqrt(p) * expectation_constant))
    lhs5 = np.concatenate(upper + lower)
    conditions["5"] = _condition("G_p <= sqrt(p) M_0 and E G_p >= -sqrt(p) M_1", lhs5, np.zeros_like(lhs5))
    notes.append(f"stationary radial moments via {provenance}")

    pairs = [carre_du_champ(g[j], g[k], x, points) for j in range(m) for k in range(j, m)]
    lhs6 = np.concatenate(pairs)
    conditions["6"] = _condition("alignment Gamma(g_j, g_k) >= 0", lhs6, np.zeros_like(lhs6))

    cert = AmCertificate(m, tuple(center.tolist()), C, tuple(levels), exponents, M, M0,
                         expectation_constant, scaled, conditions, box, int(points.shape[0]),
                         drift.check_dissipation(box), notes)
    logger.info("membership check m=%d for %s: %s", m, damping.label(), cert.verdict)
    return cert
