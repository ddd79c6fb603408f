"""
Feynman-Kac Potential

theta(u) = -int_0^inf E^u (b~(u_t) - <pi, b~>) dt, estimated with coupled
hidden paths: one started at u, one at a stationary draw, both driven by the
same increments. b~ = b - delta |b| / q, which is b itself when delta = 0.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Dict, Optional

import numpy as np
import pandas as pd

from ..errors import MissingCertificateError, ModelSpecError, UnsupportedDriftError
from ..integrate import (
    COUPLING, DEFAULT_BATCH_SIZE, ensemble_initial_hidden, map_batches, step_hidden, trajectory_noise,
)
from ..model import (
    STATIONARY, ContractionCertificate, DampingSpec, DriftSpec, contraction_certificate, default_box,
    pi_average,
)

logger = logging.getLogger(__name__)

DEFAULT_TOLERANCE = 1e-4
DEFAULT_BURN_IN_TIME = 20.0


@dataclass(frozen=True)
class ThetaEstimate:
    grid: np.ndarray
    values: np.ndarray
    standard_errors: np.ndarray
    horizon: float
    dt: float
    n_samples: int
    truncation_bound: np.ndarray
    lipschitz_estimate: float
    lipschitz_standard_error: float
    lipschitz_bound: float
    pi_average: float
    certificate: ContractionCertificate
    delta: float = 0.0
    q: float = 1.0
    seed: int = 0
    notes: list = field(default_factory=list)

    @property
    def lipschitz_consistent(self) -> bool:
        return self.lipschitz_estimate <= self.lipschitz_bound + 3.0 * self.lipschitz_standard_error

    def _grid_columns(self) -> Dict[str, np.ndarray]:
        if self.grid.shape[1] == 1:
            return {"u": self.grid[:, 0]}
        return {f"u{i}": self.grid[:, i] for i in range(self.grid.shape[1])}

    def to_frame(self) -> pd.DataFrame:
        data = self._grid_columns()
        data.update({"theta": self.values, "theta_se": self.standard_errors,
                     "truncation_bound": self.truncation_bound})
        return pd.DataFrame(data)

    def to_dict(self) -> Dict:
        return {
            "grid": self.grid.tolist(),
            "theta": self.values.tolist(),
            "theta_se": self.standard_errors.tolist(),
            "truncation_bound": self.truncation_bound.tolist(),
            "horizon": self.horizon,
            "dt": self.dt,
            "n_samples": self.n_samples,
            "lipschitz_estimate": self.lipschitz_estimate,
            "lipschitz_standard_error": self.lipschitz_standard_error,
            "lipschitz_bound": self.lipschitz_bound,
            "lipschitz_consistent": self.lipschitz_consistent,
            "pi_average": self.pi_average,
            "certificate": self.certificate.to_dict(),
            "delta": self.delta,
            "q": self.q,
            "seed": self.seed,
            "notes": list(self.notes),
        }


def _as_grid(u_grid, dim: int) -> np.ndarray:
    grid = np.asarray(u_grid, dtype=float)
    if grid.ndim == 1:
        grid = grid[:, None]
    if grid.ndim != 2 or grid.shape[1] != dim:
        raise ModelSpecError(f"u-grid must have shape (n, {dim}), got {grid.shape}")
    if grid.shape[0] < 1:
        raise ModelSpecError("u-grid is empty")
    return grid


def _modified(damping: DampingSpec, delta: float, q: float):
    if delta == 0:
        return damping
    return lambda u: damping(u) - delta * np.abs(damping(u)) / q


def _damping_lipschitz(damping: DampingSpec, drift: DriftSpec, notes: list) -> float:
    lip = damping.global_lipschitz()
    if math.isfinite(lip):
        return lip
    lo, hi = default_box(drift).interval(damping.coordinate)
    notes.append(f"b is not globally Lipschitz; using its Lipschitz constant on [{lo:.3g}, {hi:.3g}]")
    return damping.box_lipschitz(lo, hi)


def truncation_horizon(certificate: ContractionCertificate, tolerance: float = DEFAULT_TOLERANCE) -> float:
    """Smallest T with C_gamma exp(-gamma T) <= tolerance."""
    if not 0 < tolerance:
        raise ModelSpecError(f"tolerance must be positive, got {tolerance}")
    return max(0.0, math.log(certificate.C_gamma / tolerance) / certificate.gamma)


def _coupled_batch(b_tilde, drift: DriftSpec, grid: np.ndarray, n_steps: int, dt: float, seed: int,
                   burn_in: int, samples: np.ndarray) -> np.ndarray:
    n, n_grid, dim = len(samples), grid.shape[0], grid.shape[1]
    start = ensemble_initial_hidden(drift, STATIONARY, seed, samples, burn_in, dt)
    distance = np.linalg.norm(grid[None, :, :] - start[:, None, :], axis=-1)
    xi = trajectory_noise(seed, COUPLING, samples, n_steps, dim)
    paths = np.concatenate([np.broadcast_to(grid, (n, n_grid, dim)), start[:, None, :]], axis=1)
    integral = np.zeros((n, n_grid))
    stationary_sum = np.zeros(n)
    for k in range(n_steps):
        values = b_tilde(paths)
        integral += dt * (values[:, :-1] - values[:, -1:])
        stationary_sum += values[:, -1]
        paths = step_hidden(paths, drift, dt, xi[k][:, None, :], step_index=k)
    return np.concatenate([-integral, distance, (stationary_sum / n_steps)[:, None]], axis=1)


def _lipschitz(grid: np.ndarray, samples: np.ndarray):
    if grid.shape[0] < 2:
        return 0.0, 0.0
    step = np.linalg.norm(np.diff(grid, axis=0), axis=-1)
    if np.any(step == 0):
        raise ModelSpecError("u-grid has repeated points")
    slopes = np.abs(np.diff(samples, axis=1)) / step
    mean = slopes.mean(axis=0)
    se = slopes.std(axis=0, ddof=1) / math.sqrt(samples.shape[0])
    worst = int(np.argmax(mean))
    return float(mean[worst]), float(se[worst])


def theta_feynman_kac(damping: DampingSpec, drift: DriftSpec, u_grid, horizon: Optional[float] = None,
                      n_samples: int = 4000, seed: int = 0, dt: float = 0.01,
                      certificate: Optional[ContractionCertificate] = None, delta: float = 0.0,
                      q: float = 1.0, tolerance: float = DEFAULT_TOLERANCE, workers: int = 1,
                      batch_size: int = DEFAULT_BATCH_SIZE) -> ThetaEstimate:
    """Coupled Monte Carlo estimate of theta on a grid of hidden states.

    The time integral is a left Riemann sum, which is exact in expectation for
    linear b under the Euler hidden recursion. The truncation bound per grid
    point is C e^{-gamma T} |b~|_Lip E|u - u_0^pi| / gamma and is reported
    apart from the Monte Carlo error.
    """
    if n_samples < 2:
        raise ModelSpecError("theta estimation needs at least two samples")
    if q <= 0 or delta < 0:
        raise ModelSpecError(f"need q > 0 and delta >= 0, got q={q}, delta={delta}")
    try:
        cert = contraction_certificate(drift, certificate)
    except UnsupportedDriftError as exc:
        raise MissingCertificateError(str(exc)) from exc
    needed = truncation_horizon(cert, tolerance)
    if horizon is None:
        horizon = needed
    elif horizon < needed:
        raise ModelSpecError(
            f"horizon {horizon:g} too small for tolerance {tolerance:g}; need T >= {needed:.4g}")
    grid = _as_grid(u_grid, drift.dim)
    notes: list = []
    lip = _damping_lipschitz(damping, drift, notes) * (1.0 + delta / q)
    n_steps = max(1, int(math.ceil(horizon / dt)))
    burn_in = 0 if drift.kind == "ou" else int(round(DEFAULT_BURN_IN_TIME / dt))
    b_tilde = _modified(damping, delta, q)

    pieces = map_batches(
        lambda samples: _coupled_batch(b_tilde, drift, grid, n_steps, dt, seed, burn_in, samples),
        n_samples, batch_size, workers)
    out = np.concatenate(pieces, axis=0)
    n_grid = grid.shape[0]
    theta_samples, distance, stationary_means = out[:, :n_grid], out[:, n_grid:2 * n_grid], out[:, -1]

    values = theta_samples.mean(axis=0)
    errors = theta_samples.std(axis=0, ddof=1) / math.sqrt(n_samples)
    tail = cert.C_gamma * math.exp(-cert.gamma * n_steps * dt) * lip / cert.gamma
    truncation = tail * distance.mean(axis=0)
    lip_est, lip_se = _lipschitz(grid, theta_samples)

    if delta == 0:
        try:
            avg = pi_average(damping, drift).value
        except UnsupportedDriftError:
            avg = float(stationary_means.mean())
    else:
        avg = float(stationary_means.mean())
        notes.append("pi-average of the modified damping estimated along the stationary paths")

    bound = cert.C_gamma / cert.gamma * lip
    if lip_est > bound + 3.0 * lip_se:
        logger.warning("empirical Lipschitz %.4g exceeds the bound %.4g (se %.2g)", lip_est, bound, lip_se)
    logger.info("theta on %d grid points: T=%.3g, %d coupled samples, max se %.2g",
                n_grid, n_steps * dt, n_samples, float(errors.max()))
    return ThetaEstimate(grid, values, errors, n_steps * dt, dt, n_samples, truncation, lip_est, lip_se,
                         bound, avg, cert, delta, q, seed, notes)


def theta_residual(estimate: ThetaEstimate, damping: DampingSpec, drift: DriftSpec) -> pd.DataFrame:
    """Finite-difference L theta_hat against b~ - <pi, b~> at interior points of a 1-d grid."""
    if estimate.grid.shape[1] != 1:
        raise ModelSpecError("the residual check needs a one-dimensional u-grid")
    if estimate.grid.shape[0] < 3:
        raise ModelSpecError("the residual check needs at least three grid points")
    u = estimate.grid[:, 0]
    if np.any(np.diff(u) <= 0):
        raise ModelSpecError("the residual check needs an increasing u-grid")
    first = np.gradient(estimate.values, u)
    second = np.gradient(first, u)
    generator = drift.drift(estimate.grid)[:, 0] * first + 0.5 * second
    target = _modified(damping, estimate.delta, estimate.q)(estimate.grid) - estimate.pi_average
    interior = slice(1, -1)
    return pd.DataFrame({
        "u": u[interior],
        "generator_theta": generator[interior],
        "target": target[interior],
        "residual": (generator - target)[interior],
    })
