"""
Time Stepping and Ensembles

Euler-Maruyama for the hidden process u_t, implicit (or explicit) Euler for the
observable X_t, long single-trajectory streaming into mergeable sinks, ensemble
moment estimation, and hidden-path record/replay.

All noise is drawn from numpy SeedSequence streams keyed by
(seed, purpose, trajectory, block), so results do not depend on how the work is
split across threads.
"""

from __future__ import annotations

import logging
import math
import struct
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from .errors import (
    IntegrationError, ModelSpecError, ReplayMismatchError, SingularStepError,
)
from .model import (
    OU, STATIONARY, DampingSpec, DriftSpec, GradientForm, Model,
    ScalarModel, log_gaussian_moment, stationary_law,
)

try:
    from numba import njit
    NUMBA_AVAILABLE = True
except ImportError:
    NUMBA_AVAILABLE = False

    def njit(*args, **kwargs):
        if args and callable(args[0]):
            return args[0]
        return lambda func: func

logger = logging.getLogger(__name__)

IMPLICIT = "implicit-euler-x"
EXPLICIT = "explicit-euler-x"
SCHEMES = (IMPLICIT, EXPLICIT)

# noise stream purposes
HIDDEN = 1
OBSERVABLE = 2
INITIAL = 3
COUPLING = 4

DEFAULT_BLOCK_SIZE = 1 << 16
DEFAULT_BATCH_SIZE = 256


# ---------------------------------------------------------------------------
# Configuration and state
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SimConfig:
    dt: float = 0.01
    n_steps: int = 10_000_000
    burn_in: int = 0
    seed: int = 0
    scheme: str = IMPLICIT
    thinning: int = 1
    evaluate_at: str = "start"
    block_size: int = DEFAULT_BLOCK_SIZE

    def __post_init__(self):
        if not self.dt > 0:
            raise ModelSpecError(f"dt must be positive, got {self.dt}")
        if self.n_steps < 1 or not 0 <= self.burn_in < self.n_steps:
            raise ModelSpecError(f"need 0 <= burn_in < n_steps, got {self.burn_in}, {self.n_steps}")
        if self.thinning < 1:
            raise ModelSpecError("thinning must be >= 1")
        if self.scheme not in SCHEMES:
            raise ModelSpecError(f"unknown scheme {self.scheme!r}; expected one of {SCHEMES}")
        if self.evaluate_at not in ("start", "end"):
            raise ModelSpecError("evaluate_at must be 'start' or 'end'")
        if self.block_size < 1:
            raise ModelSpecError("block_size must be >= 1")

    @classmethod
    def from_horizon(cls, t_final: float, dt: float = 0.01, burn_in_time: float = 0.0,
                     **kwargs) -> "SimConfig":
        return cls(dt=dt, n_steps=int(round(t_final / dt)), burn_in=int(round(burn_in_time / dt)),
                   **kwargs)

    @property
    def t_final(self) -> float:
        return self.n_steps * self.dt

    def to_dict(self) -> Dict:
        return {
            "dt": self.dt, "n_steps": self.n_steps, "burn_in": self.burn_in, "seed": self.seed,
            "scheme": self.scheme, "thinning": self.thinning, "evaluate_at": self.evaluate_at,
            "block_size": self.block_size,
        }

    @classmethod
    def from_dict(cls, data: Dict) -> "SimConfig":
        return cls(**data)


@dataclass
class PathState:
    x: np.ndarray
    u: np.ndarray
    t: float = 0.0

    def check_finite(self, step_index: Optional[int] = None) -> None:
        if not (np.all(np.isfinite(self.x)) and np.all(np.isfinite(self.u))):
            raise IntegrationError("non-finite state", step_index=step_index,
                                   last_state=np.concatenate([self.x, self.u]))


def noise_stream(seed: int, purpose: int, trajectory: int, block: int = 0) -> np.random.Generator:
    return np.random.default_rng(
        np.random.SeedSequence(entropy=seed, spawn_key=(purpose, trajectory, block)))


def noise_block(seed: int, purpose: int, trajectory: int, block: int, shape) -> np.ndarray:
    return noise_stream(seed, purpose, trajectory, block).standard_normal(shape)


def initial_hidden(drift: DriftSpec, u0, seed: int, trajectory: int = 0) -> np.ndarray:
    """u0 as given, an exact stationary draw for OU, or the dissipation center."""
    if u0 != STATIONARY:
        return np.asarray(u0, dtype=float)
    if isinstance(drift, OU):
        mean, cov = stationary_law(drift)
        z = noise_block(seed, INITIAL, trajectory, 0, drift.dim)
        return mean + np.linalg.cholesky(cov) @ z
    return np.asarray(drift.dissipation_constants().center, dtype=float)


# ---------------------------------------------------------------------------
# Single steps
# ---------------------------------------------------------------------------

def step_hidden(u, drift: DriftSpec, dt: float, xi, step_index: Optional[int] = None):
    """u + h(u) dt + sqrt(dt) xi."""
    if not dt > 0:
        raise ModelSpecError(f"dt must be positive, got {dt}")
    u = np.asarray(u, dtype=float)
    out = u + drift.drift(u) * dt + math.sqrt(dt) * np.asarray(xi, dtype=float)
    if not np.all(np.isfinite(out)):
        raise IntegrationError("hidden state became non-finite", step_index=step_index, last_state=u)
    return out


def step_observable(x, b_val, sigma, dt: float, xi, scheme: str = IMPLICIT,
                    step_index: Optional[int] = None):
    """One X step for scalar damping b or matrix damping B.

    B is recognised by having one more axis than x. The implicit scheme divides
    by (1 + b dt) or solves (I + B dt) x' = x + Sigma sqrt(dt) xi.
    """
    x = np.asarray(x, dtype=float)
    b = np.asarray(b_val, dtype=float)
    xi = np.asarray(xi, dtype=float)
    sigma = np.asarray(sigma, dtype=float)
    sq = math.sqrt(dt)
    noise = sigma * sq * xi if sigma.ndim == 0 else (xi @ sigma.T) * sq
    if x.ndim >= 1 and b.ndim == x.ndim + 1:
        if scheme == EXPLICIT:
            return x - np.einsum("...ij,...j->...i", b, x) * dt + noise
        lhs = np.eye(x.shape[-1]) + b * dt
        try:
            return np.linalg.solve(lhs, (x + noise)[..., None])[..., 0]
        except np.linalg.LinAlgError:
            raise SingularStepError(float("nan"), dt, step_index=step_index, last_state=x)
    if b.ndim == x.ndim - 1:
        b = b[..., None]
    if scheme == EXPLICIT:
        return x - b * x * dt + noise
    denom = 1.0 + b * dt
    if np.any(denom <= 0):
        raise SingularStepError(float(np.min(b)), dt, step_index=step_index, last_state=x)
    return (x + noise) / denom


# ---------------------------------------------------------------------------
# Compiled kernels for long recursions
# ---------------------------------------------------------------------------

@njit(cache=True)
def _ou_hidden_kernel(u0, rate, center, dt, xi):
    n, d = xi.shape
    path = np.empty((n + 1, d))
    path[0] = u0
    sq = math.sqrt(dt)
    for i in range(n):
        for a in range(d):
            acc = 0.0
            for c in range(d):
                acc += rate[a, c] * (path[i, c] - center[c])
            path[i + 1, a] = path[i, a] - acc * dt + sq * xi[i, a]
    return path


@njit(cache=True)
def _gradient_hidden_kernel(u0, kappa, dt, xi):
    n, d = xi.shape
    path = np.empty((n + 1, d))
    path[0] = u0
    sq = math.sqrt(dt)
    for i in range(n):
        r2 = 0.0
        for a in range(d):
            r2 += path[i, a] * path[i, a]
        for a in range(d):
            path[i + 1, a] = path[i, a] - (r2 - kappa) * path[i, a] * dt + sq * xi[i, a]
    return path


@njit(cache=True)
def _scalar_x_kernel(x0, b, sigma, dt, xi, implicit):
    n, d = xi.shape
    path = np.empty((n + 1, d))
    path[0] = x0
    sq = math.sqrt(dt)
    for i in range(n):
        if implicit:
            denom = 1.0 + b[i] * dt
            for a in range(d):
                path[i + 1, a] = (path[i, a] + sigma * sq * xi[i, a]) / denom
        else:
            for a in range(d):
                path[i + 1, a] = path[i, a] - b[i] * path[i, a] * dt + sigma * sq * xi[i, a]
    return path


@njit(cache=True)
def _matrix_x_kernel(x0, B, Sigma, dt, xi, implicit):
    n, d = xi.shape
    path = np.empty((n + 1, d))
    path[0] = x0
    sq = math.sqrt(dt)
    eye = np.eye(d)
    for i in range(n):
        noise = np.dot(Sigma, xi[i]) * sq
        if implicit:
            path[i + 1] = np.linalg.solve(eye + B[i] * dt, path[i] + noise)
        else:
            path[i + 1] = path[i] - np.dot(B[i], path[i]) * dt + noise
    return path


def hidden_block(drift: DriftSpec, u_start: np.ndarray, dt: float, xi: np.ndarray) -> np.ndarray:
    """Hidden path of len(xi) + 1 points starting at u_start."""
    u_start = np.ascontiguousarray(u_start, dtype=float)
    xi = np.ascontiguousarray(xi, dtype=float)
    if isinstance(drift, OU):
        return _ou_hidden_kernel(u_start, np.ascontiguousarray(drift.matrix),
                                 np.asarray(drift.center, dtype=float), dt, xi)
    if isinstance(drift, GradientForm):
        return _gradient_hidden_kernel(u_start, drift._kappa, dt, xi)
    path = np.empty((xi.shape[0] + 1, xi.shape[1]))
    path[0] = u_start
    for i in range(xi.shape[0]):
        path[i + 1] = step_hidden(path[i], drift, dt, xi[i], step_index=i)
    return path


def _first_bad_row(path: np.ndarray) -> int:
    bad = np.flatnonzero(~np.all(np.isfinite(path), axis=1))
    return int(bad[0]) if bad.size else -1


# ---------------------------------------------------------------------------
# Sinks
# ---------------------------------------------------------------------------

@dataclass
class SampleBatch:
    t: np.ndarray
    x: np.ndarray
    u: np.ndarray

    @property
    def norms(self) -> np.ndarray:
        return np.linalg.norm(self.x, axis=1)

    def __len__(self) -> int:
        return len(self.t)


class MomentAccumulator:
    """Streaming log E|x|^{2p} over a p-grid.

    Each update stores one log-space partial (log_max, scaled_sum) per p; the
    total is combined with math.fsum, so merging is exact and order-free.
    """

    def __init__(self, p_grid: Sequence[float]):
        self.p_grid = np.asarray(sorted(float(p) for p in p_grid))
        if self.p_grid.size == 0 or np.any(self.p_grid <= 0):
            raise ModelSpecError("p-grid must be nonempty and positive")
        self.count = 0
        self.partials: List[Tuple[np.ndarray, np.ndarray]] = []
        self.log_max = np.full(self.p_grid.size, -np.inf)

    def update(self, norms) -> None:
        norms = np.asarray(norms, dtype=float).ravel()
        if norms.size == 0:
            return
        with np.errstate(divide="ignore"):
            logs = 2.0 * self.p_grid[:, None] * np.log(norms)[None, :]
        peak = logs.max(axis=1)
        safe = np.where(np.isfinite(peak), peak, 0.0)
        scaled = np.exp(logs - safe[:, None]).sum(axis=1)
        self.partials.append((peak, scaled))
        self.log_max = np.maximum(self.log_max, peak)
        self.count += norms.size

    def consume(self, batch: SampleBatch) -> None:
        self.update(batch.norms)

    def merge(self, other: "MomentAccumulator") -> "MomentAccumulator":
        if not np.array_equal(self.p_grid, other.p_grid):
            raise ModelSpecError("cannot merge accumulators with different p-grids")
        merged = MomentAccumulator(self.p_grid)
        merged.count = self.count + other.count
        merged.partials = self.partials + other.partials
        merged.log_max = np.maximum(self.log_max, other.log_max)
        return merged

    def log_moments(self) -> np.ndarray:
        """log of the sample mean of |x|^{2p}, one entry per p."""
        if self.count == 0:
            raise ModelSpecError("accumulator is empty")
        out = np.empty(self.p_grid.size)
        for j in range(self.p_grid.size):
            top = self.log_max[j]
            if not np.isfinite(top):
                out[j] = -np.inf
                continue
            total = math.fsum(
                float(s[j]) * math.exp(float(l[j]) - top) for l, s in self.partials if np.isfinite(l[j]))
            out[j] = top + math.log(total) - math.log(self.count)
        return out

    def to_dict(self) -> Dict:
        return {"p": self.p_grid.tolist(), "count": self.count,
                "log_moment": self.log_moments().tolist(), "log_max": self.log_max.tolist()}


class SampleBuffer:
    """Keeps every emitted |x| (source="norm") or one x component."""

    def __init__(self, source: str = "norm", component: int = 0):
        self.source = source
        self.component = component
        self._chunks: List[np.ndarray] = []

    def consume(self, batch: SampleBatch) -> None:
        data = batch.norms if self.source == "norm" else batch.x[:, self.component]
        self._chunks.append(np.array(data, copy=True))

    def values(self) -> np.ndarray:
        return np.concatenate(self._chunks) if self._chunks else np.empty(0)


class TrajectoryExcerpt:
    """(t, x, |x|, u) rows inside a time window, for plotting excerpts.

    `x` is the signed component `component` of X; `abs_x` is the Euclidean
    norm of the whole X vector, the quantity the figures plot.
    """

    def __init__(self, t_start: float, t_end: float, component: int = 0):
        self.t_start = t_start
        self.t_end = t_end
        self.component = component
        self._rows: List[np.ndarray] = []

    def consume(self, batch: SampleBatch) -> None:
        mask = (batch.t >= self.t_start) & (batch.t <= self.t_end)
        if mask.any():
            self._rows.append(np.column_stack(
                [batch.t[mask], batch.x[mask, self.component], batch.norms[mask], batch.u[mask, 0]]))

    def to_frame(self) -> pd.DataFrame:
        data = np.concatenate(self._rows) if self._rows else np.empty((0, 4))
        return pd.DataFrame(data, columns=["t", "x", "abs_x", "u"])


SPILL_MAGIC = b"DLSPILL1"
SPILL_HEADER = struct.Struct("<8sdqq")


class SampleSpill:
    """Streams |x| samples to a little-endian float64 file with a header."""

    def __init__(self, path, dt: float, thinning: int, seed: int):
        self.path = Path(path)
        self._fh = open(self.path, "wb")
        self._fh.write(SPILL_HEADER.pack(SPILL_MAGIC, dt, thinning, seed))

    def consume(self, batch: SampleBatch) -> None:
        batch.norms.astype("<f8").tofile(self._fh)

    def close(self) -> None:
        self._fh.close()


def read_spill(path) -> Tuple[Dict, np.ndarray]:
    with open(path, "rb") as fh:
        magic, dt, thinning, seed = SPILL_HEADER.unpack(fh.read(SPILL_HEADER.size))
        if magic != SPILL_MAGIC:
            raise ModelSpecError(f"{path} is not a sample spill file")
        data = np.fromfile(fh, dtype="<f8")
    return {"dt": dt, "thinning": thinning, "seed": seed}, data


# ---------------------------------------------------------------------------
# Hidden path record / replay
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class HiddenPathRecord:
    """Either the full u path ("values") or what is needed to regenerate it."""

    dt: float
    drift_fingerprint: str
    n_steps: int
    seed: int
    block_size: int
    u0: Tuple[float, ...]
    mode: str = "values"
    values: Optional[np.ndarray] = field(default=None, repr=False, compare=False)

    def check(self, drift: DriftSpec, config: SimConfig) -> None:
        if self.dt != config.dt:
            raise ReplayMismatchError(f"record dt {self.dt} does not match run dt {config.dt}")
        if self.drift_fingerprint != drift.fingerprint():
            raise ReplayMismatchError("record was made under a different drift")
        if self.n_steps < config.n_steps:
            raise ReplayMismatchError(
                f"record has {self.n_steps} steps, run needs {config.n_steps}")
        if self.mode == "increments" and self.block_size != config.block_size:
            raise ReplayMismatchError("increment records replay only with the same block size")

    def block(self, drift: DriftSpec, start: int, n: int, block_index: int,
              u_start: np.ndarray) -> np.ndarray:
        if self.mode == "values":
            return self.values[start:start + n + 1]
        xi = noise_block(self.seed, HIDDEN, 0, block_index, (n, drift.dim))
        return hidden_block(drift, u_start, self.dt, xi)


def _blocks(n_steps: int, block_size: int):
    for index, start in enumerate(range(0, n_steps, block_size)):
        yield index, start, min(block_size, n_steps - start)


def record_hidden_path(drift: DriftSpec, config: SimConfig, u0=STATIONARY,
                       mode: str = "values", max_bytes: int = 1 << 30) -> HiddenPathRecord:
    """Generate the hidden path the run with this config would see."""
    start_u = initial_hidden(drift, u0, config.seed)
    if mode == "values" and (config.n_steps + 1) * drift.dim * 8 > max_bytes:
        logger.warning("hidden path exceeds %d bytes, storing the increment stream instead", max_bytes)
        mode = "increments"
    values = None
    if mode == "values":
        parts = [start_u[None, :]]
        u = start_u
        for index, start, n in _blocks(config.n_steps, config.block_size):
            xi = noise_block(config.seed, HIDDEN, 0, index, (n, drift.dim))
            path = hidden_block(drift, u, config.dt, xi)
            bad = _first_bad_row(path)
            if bad >= 0:
                raise IntegrationError("hidden state became non-finite", step_index=start + bad,
                                       last_state=path[bad - 1])
            parts.append(path[1:])
            u = path[-1]
        values = np.concatenate(parts)
    elif mode != "increments":
        raise ModelSpecError(f"unknown record mode {mode!r}")
    return HiddenPathRecord(config.dt, drift.fingerprint(), config.n_steps, config.seed,
                            config.block_size, tuple(start_u), mode, values)


# ---------------------------------------------------------------------------
# Long single-trajectory runs
# ---------------------------------------------------------------------------

@dataclass
class RunSummary:
    samples_seen: int
    max_norm: float
    n_steps: int
    final_state: PathState
    wall_time: float = 0.0
    diagnostics: List[str] = field(default_factory=list)

    def to_dict(self, include_timing: bool = False) -> Dict:
        data = {
            "samples_seen": self.samples_seen,
            "max_norm": self.max_norm,
            "n_steps": self.n_steps,
            "final_x": self.final_state.x.tolist(),
            "final_u": self.final_state.u.tolist(),
            "final_t": self.final_state.t,
            "diagnostics": list(self.diagnostics),
        }
        if include_timing:
            data["wall_time"] = self.wall_time
        return data


def _observable_block(model: Model, x: np.ndarray, u_path: np.ndarray, config: SimConfig,
                      xi: np.ndarray, start: int) -> Tuple[np.ndarray, int]:
    """X path over one block plus the number of steps taken with negative damping."""
    u_eval = u_path[:-1] if config.evaluate_at == "start" else u_path[1:]
    implicit = config.scheme == IMPLICIT
    if isinstance(model, ScalarModel):
        b = np.ascontiguousarray(model.damping(u_eval), dtype=float)
        if implicit:
            bad = np.flatnonzero(1.0 + b * config.dt <= 0)
            if bad.size:
                k = int(bad[0])
                last = _scalar_x_kernel(x, b[:k], model.sigma_x, config.dt, xi[:k], True)[-1]
                raise SingularStepError(float(b[k]), config.dt, step_index=start + k, last_state=last)
        path = _scalar_x_kernel(x, b, float(model.sigma_x), config.dt, xi, implicit)
        return path, int(np.count_nonzero(b < 0))
    B = np.ascontiguousarray(model.damping_matrix(u_eval), dtype=float)
    try:
        path = _matrix_x_kernel(x, B, np.ascontiguousarray(model.sigma_matrix()), config.dt, xi, implicit)
    except (np.linalg.LinAlgError, ZeroDivisionError, ValueError) as exc:
        raise SingularStepError(float("nan"), config.dt, step_index=start, last_state=x) from exc
    # symmetric part not positive semidefinite
    lowest = np.linalg.eigvalsh(0.5 * (B + np.swapaxes(B, -1, -2)))[:, 0]
    return path, int(np.count_nonzero(lowest < 0))


def simulate_stream(model: Model, config: SimConfig, sinks: Sequence = (),
                    replay: Optional[HiddenPathRecord] = None) -> RunSummary:
    """Run one long trajectory, feeding post-burn-in samples to every sink.

    Non-fatal events land in RunSummary.diagnostics. On a numerical failure the
    IntegrationError carries the partial summary up to the last good block.
    """
    began = time.perf_counter()
    if replay is not None:
        replay.check(model.drift, config)
        u = np.asarray(replay.u0, dtype=float)
    else:
        u = initial_hidden(model.drift, model.u0, config.seed)
    x = np.asarray(model.x0, dtype=float)
    samples = 0
    max_norm = 0.0
    negative_steps = 0
    steps_done = 0
    logger.debug("simulating %d steps (dt=%g, scheme=%s, numba=%s)",
                 config.n_steps, config.dt, config.scheme, NUMBA_AVAILABLE)
    try:
        for index, start, n in _blocks(config.n_steps, config.block_size):
            if replay is not None:
                u_path = replay.block(model.drift, start, n, index, u)
            else:
                xi_u = noise_block(config.seed, HIDDEN, 0, index, (n, model.d_u))
                u_path = hidden_block(model.drift, u, config.dt, xi_u)
            bad = _first_bad_row(u_path)
            if bad >= 0:
                raise IntegrationError("hidden state became non-finite", step_index=start + bad,
                                       last_state=u_path[bad - 1])
            xi_x = noise_block(config.seed, OBSERVABLE, 0, index, (n, model.d_x))
            x_path, negative = _observable_block(model, x, u_path, config, xi_x, start)
            bad = _first_bad_row(x_path)
            if bad >= 0:
                raise IntegrationError("observable state became non-finite", step_index=start + bad,
                                       last_state=x_path[bad - 1])
            negative_steps += negative
            steps = np.arange(start + 1, start + n + 1)
            mask = (steps > config.burn_in) & (steps % config.thinning == 0)
            if mask.any():
                emitted = SampleBatch(steps[mask] * config.dt, x_path[1:][mask], u_path[1:][mask])
                samples += len(emitted)
                max_norm = max(max_norm, float(emitted.norms.max()))
                for sink in sinks:
                    sink.consume(emitted)
            u, x = u_path[-1].copy(), x_path[-1].copy()
            steps_done = start + n
    except IntegrationError as exc:
        exc.summary = RunSummary(samples, max_norm, steps_done,
                                 PathState(x, u, steps_done * config.dt),
                                 wall_time=time.perf_counter() - began,
                                 diagnostics=[f"aborted: {exc}"])
        logger.error("run aborted after %d of %d steps: %s", steps_done, config.n_steps, exc)
        raise

    diagnostics = []
    if negative_steps:
        diagnostics.append(f"{negative_steps} of {config.n_steps} steps had negative damping")
    if samples == 0:
        diagnostics.append("no samples emitted: burn-in or thinning covers the whole run")
    for note in diagnostics:
        logger.warning(note)
    summary = RunSummary(samples, max_norm, config.n_steps,
                         PathState(x, u, config.n_steps * config.dt),
                         wall_time=time.perf_counter() - began, diagnostics=diagnostics)
    logger.info("run finished: %d samples, max |x| = %.4g, %.1fs",
                samples, max_norm, summary.wall_time)
    return summary


# ---------------------------------------------------------------------------
# Ensembles
# ---------------------------------------------------------------------------

def trajectory_noise(seed: int, purpose: int, trajectories: Sequence[int], n_steps: int,
                     dim: int) -> np.ndarray:
    """Noise of shape (n_steps, n_traj, dim), one independent stream per trajectory."""
    return np.stack([noise_block(seed, purpose, int(j), 0, (n_steps, dim)) for j in trajectories],
                    axis=1)


def map_batches(fn: Callable[[np.ndarray], np.ndarray], n_traj: int,
                batch_size: int = DEFAULT_BATCH_SIZE, workers: int = 1) -> List:
    """Apply fn to fixed trajectory batches; results come back in batch order."""
    batches = [np.arange(s, min(s + batch_size, n_traj)) for s in range(0, n_traj, batch_size)]
    if workers <= 1 or len(batches) == 1:
        return [fn(b) for b in batches]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, batches))


def ensemble_initial_hidden(drift: DriftSpec, u0, seed: int, trajectories: np.ndarray,
                            burn_in: int, dt: float) -> np.ndarray:
    u = np.stack([initial_hidden(drift, u0, seed, int(j)) for j in trajectories])
    if burn_in and not (isinstance(drift, OU) and u0 == STATIONARY):
        xi = trajectory_noise(seed, INITIAL, trajectories + 1_000_000, burn_in, drift.dim)
        for k in range(burn_in):
            u = step_hidden(u, drift, dt, xi[k], step_index=k)
    return u


@dataclass(frozen=True)
class MomentCurve:
    """log E|X_t|^{2p} estimates with delta-method standard errors of the log."""

    p: np.ndarray
    log_estimates: np.ndarray
    log_standard_errors: np.ndarray
    n_traj: int = 0
    t_final: float = 0.0
    estimator: str = "direct"

    def __post_init__(self):
        p = np.asarray(self.p, dtype=float)
        if p.size > 1 and np.any(np.diff(p) <= 0):
            raise ModelSpecError("moment curve p values must be strictly increasing")
        object.__setattr__(self, "p", p)
        object.__setattr__(self, "log_estimates", np.asarray(self.log_estimates, dtype=float))
        object.__setattr__(self, "log_standard_errors", np.asarray(self.log_standard_errors, dtype=float))

    @property
    def estimates(self) -> np.ndarray:
        return np.exp(self.log_estimates)

    @property
    def standard_errors(self) -> np.ndarray:
        return self.estimates * self.log_standard_errors

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({"p": self.p, "log_moment": self.log_estimates,
                             "log_moment_se": self.log_standard_errors})

    def to_dict(self) -> Dict:
        return {"p": self.p.tolist(), "log_moment": self.log_estimates.tolist(),
                "log_moment_se": self.log_standard_errors.tolist(), "n_traj": self.n_traj,
                "t_final": self.t_final, "estimator": self.estimator}


def log_mean_jackknife(logs: np.ndarray) -> Tuple[float, float]:
    """log of the mean of exp(logs) and the jackknife SE of that log."""
    logs = np.asarray(logs, dtype=float)
    n = logs.size
    top = float(np.max(logs))
    if not np.isfinite(top):
        return -np.inf, 0.0
    y = np.exp(logs - top)
    mean = float(np.mean(y))
    leave_one_out = (y.sum() - y) / (n - 1)
    jack_var = (n - 1) / n * float(np.sum((leave_one_out - leave_one_out.mean()) ** 2))
    return top + math.log(mean), math.sqrt(jack_var) / mean


def _ensemble_batch(model: Model, config: SimConfig, p_grid: np.ndarray, n_steps: int,
                    estimator: str, trajectories: np.ndarray) -> np.ndarray:
    seed, dt = config.seed, config.dt
    u = ensemble_initial_hidden(model.drift, model.u0, seed, trajectories, config.burn_in, dt)
    xi_u = trajectory_noise(seed, HIDDEN, trajectories, n_steps, model.d_u)
    xi_x = trajectory_noise(seed, OBSERVABLE, trajectories, n_steps, model.d_x)
    x = np.tile(np.asarray(model.x0, dtype=float), (len(trajectories), 1))
    mean, var = x[:, 0].copy(), np.zeros(len(trajectories))
    sigma = model.sigma_x if isinstance(model, ScalarModel) else model.sigma_matrix()
    for k in range(n_steps):
        u_next = step_hidden(u, model.drift, dt, xi_u[k], step_index=k)
        u_eval = u if config.evaluate_at == "start" else u_next
        if estimator == "conditional":
            b = model.damping(u_eval)
            if config.scheme == IMPLICIT:
                denom = 1.0 + b * dt
                if np.any(denom <= 0):
                    raise SingularStepError(float(np.min(b)), dt, step_index=k)
                mean, var = mean / denom, (var + sigma ** 2 * dt) / denom ** 2
            else:
                factor = 1.0 - b * dt
                mean, var = mean * factor, var * factor ** 2 + sigma ** 2 * dt
        else:
            b = model.damping(u_eval) if isinstance(model, ScalarModel) else model.damping_matrix(u_eval)
            x = step_observable(x, b, sigma, dt, xi_x[k], config.scheme, step_index=k)
        u = u_next
    if estimator == "conditional":
        out = np.stack([log_gaussian_moment(p, mean, var) for p in p_grid])
    else:
        with np.errstate(divide="ignore"):
            log_norm = np.log(np.linalg.norm(x, axis=1))
        out = 2.0 * p_grid[:, None] * log_norm[None, :]
    if not np.all(np.isfinite(out) | (out == -np.inf)):
        raise IntegrationError("ensemble state became non-finite", step_index=n_steps)
    return out


def ensemble_expectation(model: Model, config: SimConfig, p_grid: Sequence[float], t_final: float,
                         n_traj: int, workers: int = 1, batch_size: int = DEFAULT_BATCH_SIZE,
                         estimator: str = "direct") -> MomentCurve:
    """E|X_t|^{2p} at t = t_final over n_traj independent trajectories.

    estimator="conditional" propagates the conditional Gaussian mean and
    variance of X given the hidden path (scalar models with d_x = 1) and
    averages exact Gaussian moments, which removes the observable noise from
    the Monte Carlo error.
    """
    if n_traj < 2:
        raise ModelSpecError("ensemble needs at least two trajectories")
    if estimator not in ("direct", "conditional"):
        raise ModelSpecError(f"unknown estimator {estimator!r}")
    if estimator == "conditional" and not (isinstance(model, ScalarModel) and model.d_x == 1):
        raise ModelSpecError("the conditional estimator needs a scalar model with d_x = 1")
    p = np.asarray(sorted(float(v) for v in p_grid))
    n_steps = int(round(t_final / config.dt))
    pieces = map_batches(
        lambda traj: _ensemble_batch(model, config, p, n_steps, estimator, traj),
        n_traj, batch_size, workers)
    logs = np.concatenate(pieces, axis=1)
    stats = [log_mean_jackknife(row) for row in logs]
    logger.info("ensemble of %d trajectories to t=%g done (%s estimator)", n_traj, t_final, estimator)
    return MomentCurve(p, [s[0] for s in stats], [s[1] for s in stats], n_traj, t_final, estimator)


def _integrated_damping_batch(drift: DriftSpec, damping: DampingSpec, index: np.ndarray, dt: float,
                              seed: int, burn_in: int, trajectories: np.ndarray) -> np.ndarray:
    n_steps = int(index[-1])
    u = ensemble_initial_hidden(drift, STATIONARY, seed, trajectories, burn_in, dt)
    xi = trajectory_noise(seed, HIDDEN, trajectories, n_steps, drift.dim)
    integral = np.zeros(len(trajectories))
    out = np.empty((len(trajectories), len(index)))
    b_prev = damping(u)
    cursor = 0
    for k in range(1, n_steps + 1):
        u = step_hidden(u, drift, dt, xi[k - 1], step_index=k)
        b_next = damping(u)
        integral = integral + 0.5 * dt * (b_prev + b_next)
        b_prev = b_next
        while cursor < len(index) and index[cursor] == k:
            out[:, cursor] = integral
            cursor += 1
    return out


def integrated_damping(drift: DriftSpec, damping: DampingSpec, times: Sequence[float], dt: float,
                       n_traj: int, seed: int = 0, workers: int = 1, burn_in: int = 0,
                       batch_size: int = DEFAULT_BATCH_SIZE) -> np.ndarray:
    """Trapezoidal integral of b(u_s) over [0, t] for stationary hidden paths.

    Returns shape (n_traj, len(times)); times must be positive multiples of dt.
    """
    index = np.asarray([int(round(t / dt)) for t in times])
    if np.any(index < 1) or np.any(np.abs(index * dt - np.asarray(times)) > 1e-9 * np.maximum(1, times)):
        raise ModelSpecError("integration times must be positive multiples of dt")
    if np.any(np.diff(index) <= 0):
        raise ModelSpecError("integration times must be strictly increasing")
    pieces = map_batches(
        lambda traj: _integrated_damping_batch(drift, damping, index, dt, seed, burn_in, traj),
        n_traj, batch_size, workers)
    return np.concatenate(pieces, axis=0)


def ensemble_damping_exponential(drift: DriftSpec, damping: DampingSpec, p_grid: Sequence[float],
                                 t_final: float, n_traj: int, dt: float = 0.01, seed: int = 0,
                                 workers: int = 1) -> MomentCurve:
    """log E exp(-2p int_0^t b(u_s) ds) under the stationary hidden process."""
    integral = integrated_damping(drift, damping, [t_final], dt, n_traj, seed, workers)[:, 0]
    p = np.asarray(sorted(float(v) for v in p_grid))
    stats = [log_mean_jackknife(-2.0 * q * integral) for q in p]
    return MomentCurve(p, [s[0] for s in stats], [s[1] for s in stats], n_traj, t_final,
                       "damping-exponential")
