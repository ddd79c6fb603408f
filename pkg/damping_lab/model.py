"""
Model Specifications

Damping functions b, hidden-process drifts h, scalar and matrix-valued model
specifications, contraction certificates for the hidden process, and the
scalar surrogate dampings that bracket a matrix-valued damping B(u).
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple, Union

import numpy as np
from scipy import integrate as sp_integrate
from scipy import linalg
from scipy.special import gammaln, hyp1f1, logsumexp
from scipy.stats import norm

from .errors import ModelSpecError, UnsupportedDriftError

logger = logging.getLogger(__name__)

NEGATIVE_SOMEWHERE = "negative-somewhere"
ZERO_ON_INTERVAL = "zero-on-interval"
ZERO_AT_POINT = "zero-at-point"
BOUNDED_BELOW_POSITIVE = "bounded-below-positive"

ZERO_TOLERANCE = 1e-12
GAUSS_HERMITE_NODES = 64
GAUSS_HERMITE_CHECK_NODES = 48


def _sign_class(value: float, tol: float) -> str:
    if value < -tol:
        return NEGATIVE_SOMEWHERE
    if value <= tol:
        return ZERO_ON_INTERVAL
    return BOUNDED_BELOW_POSITIVE


# ---------------------------------------------------------------------------
# Damping functions
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DampingSpec:
    """Base class of the damping families. Evaluates on one u coordinate."""

    coordinate: int = field(default=0, kw_only=True)

    kind = "abstract"

    def evaluate(self, s):
        raise NotImplementedError

    def derivative(self, s):
        raise NotImplementedError

    def second_derivative(self, s):
        return np.zeros_like(np.asarray(s, dtype=float))

    def box_lipschitz(self, lo: float, hi: float) -> float:
        raise NotImplementedError

    def global_lipschitz(self) -> float:
        raise NotImplementedError

    def growth_degree(self) -> float:
        return 1.0

    def infimum(self) -> float:
        raise NotImplementedError

    def zero_set(self, tol: float = ZERO_TOLERANCE) -> Tuple[str, Optional[float]]:
        """Return (zero_set_kind, grid resolution or None when analytic)."""
        raise NotImplementedError

    def select(self, u) -> np.ndarray:
        """Pick the damping coordinate out of u (shape (..., d_u) or scalar)."""
        arr = np.asarray(u, dtype=float)
        if arr.ndim == 0:
            if self.coordinate != 0:
                raise ModelSpecError(
                    f"scalar u given but damping reads coordinate {self.coordinate}")
            return arr
        if arr.shape[-1] <= self.coordinate:
            raise ModelSpecError(
                f"u has dimension {arr.shape[-1]}, damping reads coordinate {self.coordinate}")
        return arr[..., self.coordinate]

    def __call__(self, u):
        return self.evaluate(self.select(u))

    def params(self) -> Dict:
        raise NotImplementedError

    def to_dict(self) -> Dict:
        data = {"kind": self.kind}
        data.update(self.params())
        data["coordinate"] = self.coordinate
        return data

    def label(self) -> str:
        return f"{self.kind}({', '.join(f'{k}={v}' for k, v in self.params().items())})"


@dataclass(frozen=True)
class Affine(DampingSpec):
    """b(u) = a + c (u + m_u)."""

    a: float
    c: float
    m_u: float = 0.0

    kind = "affine"

    def evaluate(self, s):
        return self.a + self.c * (np.asarray(s, dtype=float) + self.m_u)

    def derivative(self, s):
        return np.full_like(np.asarray(s, dtype=float), self.c)

    def box_lipschitz(self, lo, hi):
        return abs(self.c)

    def global_lipschitz(self):
        return abs(self.c)

    def infimum(self):
        return -math.inf if self.c != 0 else self.a

    def zero_set(self, tol=ZERO_TOLERANCE):
        if self.c != 0:
            return NEGATIVE_SOMEWHERE, None
        return _sign_class(self.a, tol), None

    def params(self):
        return {"a": self.a, "c": self.c, "m_u": self.m_u}


@dataclass(frozen=True)
class Hinge(DampingSpec):
    """b(u) = A max(|u + s| - k, 0): a dead zone of half-width k around -s."""

    s: float
    k: float
    A: float

    kind = "hinge"

    def __post_init__(self):
        if self.A <= 0:
            raise ModelSpecError(f"hinge scale A must be positive, got {self.A}")
        if self.k < 0:
            raise ModelSpecError(f"hinge offset k must be nonnegative, got {self.k}")

    def evaluate(self, s):
        return self.A * np.maximum(np.abs(np.asarray(s, dtype=float) + self.s) - self.k, 0.0)

    def derivative(self, s):
        w = np.asarray(s, dtype=float) + self.s
        return np.where(np.abs(w) > self.k, self.A * np.sign(w), 0.0)

    def box_lipschitz(self, lo, hi):
        return self.A

    def global_lipschitz(self):
        return self.A

    def infimum(self):
        return 0.0

    def zero_set(self, tol=ZERO_TOLERANCE):
        return (ZERO_ON_INTERVAL if self.k > 0 else ZERO_AT_POINT), None

    def params(self):
        return {"s": self.s, "k": self.k, "A": self.A}


@dataclass(frozen=True)
class Power(DampingSpec):
    """b(u) = |u|^c + d."""

    c: float
    d: float = 0.0

    kind = "power"

    def __post_init__(self):
        if self.c <= 0:
            raise ModelSpecError(f"power exponent c must be positive, got {self.c}")
        if self.d < 0:
            raise ModelSpecError(f"power offset d must be nonnegative, got {self.d}")

    def evaluate(self, s):
        return np.abs(np.asarray(s, dtype=float)) ** self.c + self.d

    def derivative(self, s):
        s = np.asarray(s, dtype=float)
        with np.errstate(divide="ignore", invalid="ignore"):
            out = self.c * np.abs(s) ** (self.c - 1.0) * np.sign(s)
        return np.where(s == 0, 0.0, out)

    def second_derivative(self, s):
        s = np.asarray(s, dtype=float)
        if self.c == 1.0:
            return np.zeros_like(s)
        with np.errstate(divide="ignore", invalid="ignore"):
            out = self.c * (self.c - 1.0) * np.abs(s) ** (self.c - 2.0)
        return np.where(s == 0, 0.0 if self.c > 2 else (2.0 if self.c == 2 else np.inf), out)

    def box_lipschitz(self, lo, hi):
        if self.c < 1:
            return math.inf
        radius = max(abs(lo), abs(hi))
        return self.c * radius ** (self.c - 1.0)

    def global_lipschitz(self):
        return 1.0 if self.c == 1.0 else math.inf

    def growth_degree(self):
        return float(self.c)

    def infimum(self):
        return self.d

    def zero_set(self, tol=ZERO_TOLERANCE):
        return (BOUNDED_BELOW_POSITIVE if self.d > tol else ZERO_AT_POINT), None

    def params(self):
        return {"c": self.c, "d": self.d}


@dataclass(frozen=True)
class Constant(DampingSpec):
    """b(u) = value."""

    value: float

    kind = "constant"

    def evaluate(self, s):
        return np.full_like(np.asarray(s, dtype=float), self.value)

    def derivative(self, s):
        return np.zeros_like(np.asarray(s, dtype=float))

    def box_lipschitz(self, lo, hi):
        return 0.0

    def global_lipschitz(self):
        return 0.0

    def growth_degree(self):
        return 0.0

    def infimum(self):
        return self.value

    def zero_set(self, tol=ZERO_TOLERANCE):
        return _sign_class(self.value, tol), None

    def params(self):
        return {"value": self.value}


@dataclass(frozen=True)
class Tabulated(DampingSpec):
    """Piecewise-linear b on a strictly increasing grid, flat outside it."""

    grid: Tuple[float, ...]
    values: Tuple[float, ...]
    tolerance: float = ZERO_TOLERANCE

    kind = "tabulated"

    def __post_init__(self):
        grid = tuple(float(g) for g in self.grid)
        values = tuple(float(v) for v in self.values)
        if len(grid) < 2 or len(grid) != len(values):
            raise ModelSpecError("tabulated damping needs matching grid/values of length >= 2")
        if np.any(np.diff(grid) <= 0):
            raise ModelSpecError("tabulated grid must be strictly increasing")
        object.__setattr__(self, "grid", grid)
        object.__setattr__(self, "values", values)

    @property
    def _g(self) -> np.ndarray:
        return np.asarray(self.grid)

    @property
    def _v(self) -> np.ndarray:
        return np.asarray(self.values)

    def _slopes(self) -> np.ndarray:
        return np.diff(self._v) / np.diff(self._g)

    def evaluate(self, s):
        return np.interp(np.asarray(s, dtype=float), self._g, self._v)

    def derivative(self, s):
        s = np.asarray(s, dtype=float)
        idx = np.clip(np.searchsorted(self._g, s, side="right") - 1, 0, len(self.grid) - 2)
        inside = (s >= self.grid[0]) & (s <= self.grid[-1])
        return np.where(inside, self._slopes()[idx], 0.0)

    def box_lipschitz(self, lo, hi):
        return float(np.max(np.abs(self._slopes())))

    def global_lipschitz(self):
        return float(np.max(np.abs(self._slopes())))

    def infimum(self):
        return float(np.min(self._v))

    def zero_set(self, tol=None):
        tol = self.tolerance if tol is None else tol
        v = self._v
        resolution = float(np.max(np.diff(self._g)))
        if np.any(v < -tol):
            return NEGATIVE_SOMEWHERE, resolution
        zero = np.abs(v) <= tol
        if not zero.any():
            return BOUNDED_BELOW_POSITIVE, resolution
        # flat extrapolation makes a zero end value a zero half-line
        if zero[0] or zero[-1] or np.any(zero[1:] & zero[:-1]):
            return ZERO_ON_INTERVAL, resolution
        return ZERO_AT_POINT, resolution

    def params(self):
        return {"grid": list(self.grid), "values": list(self.values)}


DAMPING_KINDS = {cls.kind: cls for cls in (Affine, Hinge, Power, Constant, Tabulated)}


def damping_value(spec: DampingSpec, u) -> float:
    """Evaluate b(u) at a single point u (scalar or vector)."""
    return float(spec(u))


def damping_from_dict(data: Dict) -> DampingSpec:
    data = dict(data)
    kind = data.pop("kind", None)
    if kind not in DAMPING_KINDS:
        raise ModelSpecError(f"unknown damping kind {kind!r}; expected one of {sorted(DAMPING_KINDS)}")
    coordinate = int(data.pop("coordinate", 0))
    try:
        return DAMPING_KINDS[kind](coordinate=coordinate, **data)
    except TypeError as exc:
        raise ModelSpecError(f"bad parameters for {kind} damping: {exc}") from exc


# ---------------------------------------------------------------------------
# Hidden-process drifts
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Dissipation:
    """<u - center, h(u)> <= -lam |u - center|^2 + M_lam."""

    lam: float
    M_lam: float
    center: Tuple[float, ...]

    def to_dict(self) -> Dict:
        return {"lam": self.lam, "M_lam": self.M_lam, "center": list(self.center)}


@dataclass(frozen=True)
class DriftSpec:
    dissipation: Optional[Dissipation] = field(default=None, kw_only=True)

    kind = "abstract"

    @property
    def dim(self) -> int:
        raise NotImplementedError

    def drift(self, u) -> np.ndarray:
        raise NotImplementedError

    def default_dissipation(self) -> Dissipation:
        raise NotImplementedError

    def dissipation_constants(self) -> Dissipation:
        return self.dissipation if self.dissipation is not None else self.default_dissipation()

    def check_dissipation(self, box: "Box", n: int = 201) -> float:
        """Smallest slack of the dissipation inequality on a grid of the box."""
        diss = self.dissipation_constants()
        points = box.grid(n)
        shifted = points - np.asarray(diss.center)
        lhs = np.sum(shifted * self.drift(points), axis=-1)
        rhs = -diss.lam * np.sum(shifted ** 2, axis=-1) + diss.M_lam
        return float(np.min(rhs - lhs))

    def params(self) -> Dict:
        raise NotImplementedError

    def to_dict(self) -> Dict:
        data = {"kind": self.kind}
        data.update(self.params())
        if self.dissipation is not None:
            data["dissipation"] = self.dissipation.to_dict()
        return data

    def fingerprint(self) -> str:
        return repr(sorted(self.to_dict().items()))


def _as_matrix(rate) -> np.ndarray:
    arr = np.atleast_2d(np.asarray(rate, dtype=float))
    if arr.shape[0] != arr.shape[1]:
        raise ModelSpecError(f"OU rate matrix must be square, got shape {arr.shape}")
    return arr


@dataclass(frozen=True)
class OU(DriftSpec):
    """h(u) = -Gamma (u - center), with Gamma a positive scalar or stable matrix."""

    rate: Union[float, Tuple[Tuple[float, ...], ...]]
    center: Optional[Tuple[float, ...]] = None

    kind = "ou"

    def __post_init__(self):
        mat = _as_matrix(self.rate)
        if np.any(np.linalg.eigvals(mat).real <= 0):
            raise ModelSpecError("OU rate must have eigenvalues with positive real part")
        rate = float(mat[0, 0]) if mat.shape == (1, 1) else tuple(tuple(map(float, r)) for r in mat)
        object.__setattr__(self, "rate", rate)
        center = (0.0,) * mat.shape[0] if self.center is None else tuple(
            float(c) for c in np.atleast_1d(self.center))
        if len(center) != mat.shape[0]:
            raise ModelSpecError("OU center dimension does not match the rate matrix")
        object.__setattr__(self, "center", center)

    @property
    def matrix(self) -> np.ndarray:
        return _as_matrix(self.rate)

    @property
    def dim(self) -> int:
        return self.matrix.shape[0]

    @property
    def is_scalar(self) -> bool:
        return self.dim == 1

    @property
    def gamma(self) -> float:
        if not self.is_scalar:
            raise UnsupportedDriftError("gamma is only defined for a scalar OU rate")
        return float(self.rate)

    def drift(self, u):
        u = np.asarray(u, dtype=float)
        return -(u - np.asarray(self.center)) @ self.matrix.T

    def default_dissipation(self):
        sym = 0.5 * (self.matrix + self.matrix.T)
        return Dissipation(float(np.min(np.linalg.eigvalsh(sym))), 0.0, self.center)

    def params(self):
        rate = self.rate if self.is_scalar else [list(r) for r in self.rate]
        return {"rate": rate, "center": list(self.center)}


POTENTIALS = ("quartic", "double_well")


@dataclass(frozen=True)
class GradientForm(DriftSpec):
    """h(u) = -grad H(u) for a built-in radial potential H.

    quartic:     H(u) = |u|^4 / 4
    double_well: H(u) = |u|^4 / 4 - |u|^2 / 2
    """

    potential: str
    d_u: int = 1

    kind = "gradient"

    def __post_init__(self):
        if self.potential not in POTENTIALS:
            raise ModelSpecError(f"unknown potential {self.potential!r}; expected one of {POTENTIALS}")
        if self.d_u < 1:
            raise ModelSpecError("d_u must be >= 1")

    @property
    def dim(self) -> int:
        return self.d_u

    @property
    def _kappa(self) -> float:
        return 1.0 if self.potential == "double_well" else 0.0

    def potential_value(self, u) -> np.ndarray:
        r2 = np.sum(np.asarray(u, dtype=float) ** 2, axis=-1)
        return 0.25 * r2 ** 2 - 0.5 * self._kappa * r2

    def radial_potential(self, r):
        return 0.25 * r ** 4 - 0.5 * self._kappa * r ** 2

    def drift(self, u):
        u = np.asarray(u, dtype=float)
        r2 = np.sum(u ** 2, axis=-1, keepdims=True)
        return -(r2 - self._kappa) * u

    def default_dissipation(self):
        # -r^4 + kappa r^2 <= -r^2 + (1 + kappa)^2 / 4
        return Dissipation(1.0, (1.0 + self._kappa) ** 2 / 4.0, (0.0,) * self.d_u)

    def params(self):
        return {"potential": self.potential, "d_u": self.d_u}


def drift_from_dict(data: Dict) -> DriftSpec:
    data = dict(data)
    kind = data.pop("kind", None)
    diss = data.pop("dissipation", None)
    dissipation = None
    if diss is not None:
        dissipation = Dissipation(float(diss["lam"]), float(diss["M_lam"]),
                                  tuple(float(c) for c in diss["center"]))
    if kind == "ou":
        rate = data["rate"]
        if isinstance(rate, list):
            rate = tuple(tuple(r) for r in rate)
        center = data.get("center")
        return OU(rate, tuple(center) if center is not None else None, dissipation=dissipation)
    if kind == "gradient":
        return GradientForm(data["potential"], int(data.get("d_u", 1)), dissipation=dissipation)
    raise ModelSpecError(f"unknown drift kind {kind!r}")


# ---------------------------------------------------------------------------
# Boxes and stationary laws
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Box:
    lo: Tuple[float, ...]
    hi: Tuple[float, ...]

    def __post_init__(self):
        lo = tuple(float(v) for v in np.atleast_1d(self.lo))
        hi = tuple(float(v) for v in np.atleast_1d(self.hi))
        if len(lo) != len(hi):
            raise ModelSpecError("box bounds have different dimensions")
        if any(h <= l for l, h in zip(lo, hi)):
            raise ModelSpecError(f"empty box [{lo}, {hi}]")
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)

    @property
    def dim(self) -> int:
        return len(self.lo)

    def interval(self, coordinate: int = 0) -> Tuple[float, float]:
        return self.lo[coordinate], self.hi[coordinate]

    def grid(self, n: int = 201) -> np.ndarray:
        """Tensor grid, shape (N, d); n points per axis up to d = 2, fewer beyond."""
        per_axis = n if self.dim <= 2 else max(5, int(round(n ** (2.0 / self.dim))))
        axes = [np.linspace(l, h, per_axis) for l, h in zip(self.lo, self.hi)]
        mesh = np.meshgrid(*axes, indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=-1)

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        return rng.uniform(self.lo, self.hi, size=(n, self.dim))

    def to_dict(self) -> Dict:
        return {"lo": list(self.lo), "hi": list(self.hi)}


def stationary_law(drift: DriftSpec) -> Tuple[np.ndarray, np.ndarray]:
    """Mean and covariance of the OU stationary law (Gamma S + S Gamma^T = I)."""
    if not isinstance(drift, OU):
        raise UnsupportedDriftError(f"no closed-form stationary law for {drift.kind} drift")
    cov = linalg.solve_continuous_lyapunov(drift.matrix, np.eye(drift.dim))
    return np.asarray(drift.center), 0.5 * (cov + cov.T)


def _gradient_marginal_variance(drift: GradientForm) -> float:
    # pi is proportional to exp(-2H), radial for the built-in potentials
    d = drift.d_u
    weight = lambda r, k: r ** k * math.exp(-2.0 * drift.radial_potential(r))
    num, _ = sp_integrate.quad(weight, 0, np.inf, args=(d + 1,))
    den, _ = sp_integrate.quad(weight, 0, np.inf, args=(d - 1,))
    return num / den / d


def default_box(drift: DriftSpec, n_sd: float = 6.0) -> Box:
    """Stationary mean +/- n_sd stationary standard deviations per coordinate."""
    if isinstance(drift, OU):
        mean, cov = stationary_law(drift)
        sd = np.sqrt(np.diag(cov))
    else:
        mean = np.asarray(drift.dissipation_constants().center)
        sd = np.full(drift.dim, math.sqrt(_gradient_marginal_variance(drift)))
    return Box(tuple(mean - n_sd * sd), tuple(mean + n_sd * sd))


# ---------------------------------------------------------------------------
# Models
# ---------------------------------------------------------------------------

STATIONARY = "stationary"


def _as_state(value, dim: int, name: str) -> Tuple[float, ...]:
    arr = np.atleast_1d(np.asarray(value, dtype=float))
    if arr.size == 1 and dim > 1:
        arr = np.full(dim, float(arr[0]))
    if arr.shape != (dim,):
        raise ModelSpecError(f"{name} must have dimension {dim}, got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ModelSpecError(f"{name} must be finite")
    return tuple(float(v) for v in arr)


@dataclass(frozen=True)
class ScalarModel:
    """dX = -b(u) X dt + sigma_x dW,  du = h(u) dt + dB."""

    damping: DampingSpec
    drift: DriftSpec
    sigma_x: float = 1.0
    d_x: int = 1
    x0: Union[float, Tuple[float, ...]] = 0.0
    u0: Union[str, float, Tuple[float, ...]] = STATIONARY

    kind = "scalar"

    def __post_init__(self):
        if not math.isfinite(self.sigma_x) or self.sigma_x < 0:
            raise ModelSpecError(f"sigma_x must be finite and >= 0, got {self.sigma_x}")
        if self.d_x < 1:
            raise ModelSpecError("d_x must be >= 1")
        if self.damping.coordinate >= self.drift.dim:
            raise ModelSpecError(
                f"damping reads coordinate {self.damping.coordinate} of a {self.drift.dim}-dim u")
        object.__setattr__(self, "x0", _as_state(self.x0, self.d_x, "x0"))
        if self.u0 != STATIONARY:
            object.__setattr__(self, "u0", _as_state(self.u0, self.drift.dim, "u0"))

    @property
    def d_u(self) -> int:
        return self.drift.dim

    def damping_matrix(self, u) -> np.ndarray:
        """B(u) = b(u) I, batched over leading axes of u."""
        b = np.asarray(self.damping(u))
        return b[..., None, None] * np.eye(self.d_x)

    def sigma_matrix(self) -> np.ndarray:
        return self.sigma_x * np.eye(self.d_x)

    def to_dict(self) -> Dict:
        return {
            "kind": self.kind,
            "damping": self.damping.to_dict(),
            "drift": self.drift.to_dict(),
            "sigma_x": self.sigma_x,
            "d_x": self.d_x,
            "x0": list(self.x0),
            "u0": self.u0 if self.u0 == STATIONARY else list(self.u0),
        }


@dataclass(frozen=True)
class DampingTerm:
    """One term b_i(u) B_i of the decomposition, acting on the index set N_i."""

    damping: DampingSpec
    matrix: Tuple[Tuple[float, ...], ...]
    support: Tuple[int, ...]

    def __post_init__(self):
        mat = np.atleast_2d(np.asarray(self.matrix, dtype=float))
        if mat.ndim != 2 or mat.shape[0] != mat.shape[1]:
            raise ModelSpecError(f"B_i must be square, got shape {mat.shape}")
        support = tuple(sorted(int(j) for j in self.support))
        if any(j < 0 or j >= mat.shape[0] for j in support):
            raise ModelSpecError(f"support {support} out of range for a {mat.shape[0]}x{mat.shape[0]} B_i")
        outside = np.setdiff1d(np.arange(mat.shape[0]), support)
        if outside.size and (np.any(mat[outside, :] != 0) or np.any(mat[:, outside] != 0)):
            raise ModelSpecError(f"B_i has nonzero rows/columns outside its support {support}")
        object.__setattr__(self, "matrix", tuple(tuple(map(float, r)) for r in mat))
        object.__setattr__(self, "support", support)

    @property
    def array(self) -> np.ndarray:
        return np.asarray(self.matrix)

    def eigen_bounds(self) -> Tuple[float, float]:
        """(m_i, M_i) bracketing the symmetric part restricted to N_i."""
        if not self.support:
            return 0.0, 0.0
        sym = 0.5 * (self.array + self.array.T)
        sub = sym[np.ix_(self.support, self.support)]
        eig = np.linalg.eigvalsh(sub)
        return float(eig[0]), float(eig[-1])

    def to_dict(self) -> Dict:
        return {"damping": self.damping.to_dict(), "matrix": [list(r) for r in self.matrix],
                "support": list(self.support)}


@dataclass(frozen=True)
class MatrixModel:
    """dX = -B(u) X dt + Sigma_X dW with B(u) = sum_i b_i(u) B_i."""

    terms: Tuple[DampingTerm, ...]
    sigma: Tuple[Tuple[float, ...], ...]
    drift: DriftSpec
    x0: Union[float, Tuple[float, ...]] = 0.0
    u0: Union[str, float, Tuple[float, ...]] = STATIONARY

    kind = "matrix"

    def __post_init__(self):
        terms = tuple(self.terms)
        if not terms:
            raise ModelSpecError("matrix model needs at least one term")
        d_x = len(terms[0].matrix)
        if any(len(t.matrix) != d_x for t in terms):
            raise ModelSpecError("all B_i must share the same dimension")
        sigma = np.atleast_2d(np.asarray(self.sigma, dtype=float))
        if sigma.shape != (d_x, d_x):
            raise ModelSpecError(f"Sigma_X must be {d_x}x{d_x}, got {sigma.shape}")
        for t in terms:
            if t.damping.coordinate >= self.drift.dim:
                raise ModelSpecError("a term's damping reads a coordinate beyond d_u")
        object.__setattr__(self, "terms", terms)
        object.__setattr__(self, "sigma", tuple(tuple(map(float, r)) for r in sigma))
        object.__setattr__(self, "x0", _as_state(self.x0, d_x, "x0"))
        if self.u0 != STATIONARY:
            object.__setattr__(self, "u0", _as_state(self.u0, self.drift.dim, "u0"))
        object.__setattr__(self, "_bounds", tuple(t.eigen_bounds() for t in terms))

    @property
    def d_x(self) -> int:
        return len(self.terms[0].matrix)

    @property
    def d_u(self) -> int:
        return self.drift.dim

    @property
    def term_bounds(self) -> Tuple[Tuple[float, float], ...]:
        return self._bounds

    def damping_values(self, u) -> np.ndarray:
        """b_i(u) for every term, shape (..., n_terms)."""
        return np.stack([np.asarray(t.damping(u), dtype=float) for t in self.terms], axis=-1)

    def damping_matrix(self, u) -> np.ndarray:
        mats = np.stack([t.array for t in self.terms])
        return np.tensordot(self.damping_values(u), mats, axes=([-1], [0]))

    def sigma_matrix(self) -> np.ndarray:
        return np.asarray(self.sigma)

    def to_dict(self) -> Dict:
        return {
            "kind": self.kind,
            "terms": [t.to_dict() for t in self.terms],
            "sigma": [list(r) for r in self.sigma],
            "drift": self.drift.to_dict(),
            "x0": list(self.x0),
            "u0": self.u0 if self.u0 == STATIONARY else list(self.u0),
        }


Model = Union[ScalarModel, MatrixModel]


def model_to_dict(model: Model) -> Dict:
    return model.to_dict()


def model_from_dict(data: Dict) -> Model:
    kind = data.get("kind", "scalar")
    drift = drift_from_dict(data["drift"])
    u0 = data.get("u0", STATIONARY)
    if isinstance(u0, list):
        u0 = tuple(u0)
    x0 = data.get("x0", 0.0)
    if isinstance(x0, list):
        x0 = tuple(x0)
    if kind == "scalar":
        return ScalarModel(damping_from_dict(data["damping"]), drift,
                           sigma_x=float(data.get("sigma_x", 1.0)), d_x=int(data.get("d_x", 1)),
                           x0=x0, u0=u0)
    if kind == "matrix":
        terms = tuple(
            DampingTerm(damping_from_dict(t["damping"]), tuple(tuple(r) for r in t["matrix"]),
                        tuple(t["support"]))
            for t in data["terms"]
        )
        return MatrixModel(terms, tuple(tuple(r) for r in data["sigma"]), drift, x0=x0, u0=u0)
    raise ModelSpecError(f"unknown model kind {kind!r}")


# ---------------------------------------------------------------------------
# Stationary averages and profiles
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PiAverage:
    value: float
    error: float
    provenance: str  # closed-form | gauss-hermite | monte-carlo


def _positive_part_mean(mean, sd) -> float:
    """E max(Y, 0) for Y ~ N(mean, sd^2)."""
    if sd == 0:
        return max(mean, 0.0)
    z = mean / sd
    return float(mean * norm.cdf(z) + sd * norm.pdf(z))


def gaussian_abs_moment(order: float, mean: float, sd: float) -> float:
    """E|Y|^order for Y ~ N(mean, sd^2)."""
    if sd == 0:
        return abs(mean) ** order
    log_scale = 0.5 * order * math.log(2.0 * sd ** 2) + gammaln(0.5 * (order + 1)) - 0.5 * math.log(math.pi)
    return float(math.exp(log_scale) * hyp1f1(-0.5 * order, 0.5, -mean ** 2 / (2.0 * sd ** 2)))


def log_gaussian_moment(p: float, mean, variance) -> np.ndarray:
    """log E|Y|^{2p} for Y ~ N(mean, variance), elementwise over arrays.

    Integer p uses the binomial expansion with (2k-1)!! central moments summed
    in log space; other p use the confluent hypergeometric form.
    """
    mean = np.abs(np.asarray(mean, dtype=float))
    variance = np.asarray(variance, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        log_m = np.log(mean)
        log_v = np.log(variance)
        if float(p).is_integer():
            p = int(p)
            k = np.arange(p + 1)
            log_coef = (gammaln(2 * p + 1) - gammaln(2 * p - 2 * k + 1)
                        - k * math.log(2.0) - gammaln(k + 1))
            power_m = (2 * p - 2 * k)
            terms = (log_coef
                     + np.where(power_m == 0, 0.0, power_m * log_m[..., None])
                     + np.where(k == 0, 0.0, k * log_v[..., None]))
            return logsumexp(terms, axis=-1)
        q = 2.0 * p
        z = mean ** 2 / (2.0 * variance)
        general = (0.5 * q * np.log(2.0 * variance) + gammaln(0.5 * (q + 1)) - 0.5 * math.log(math.pi)
                   + np.log(hyp1f1(-0.5 * q, 0.5, -z)))
        return np.where(variance > 0, general, q * log_m)


def _gauss_hermite(fn, mean: float, sd: float, nodes: int) -> float:
    x, w = np.polynomial.hermite_e.hermegauss(nodes)
    return float(np.sum(w * fn(mean + sd * x)) / math.sqrt(2.0 * math.pi))


def _closed_form_average(spec: DampingSpec, mean: float, sd: float) -> Optional[float]:
    if isinstance(spec, Constant):
        return spec.value
    if isinstance(spec, Affine):
        return spec.a + spec.c * (mean + spec.m_u)
    if isinstance(spec, Hinge):
        shifted = mean + spec.s
        return spec.A * (_positive_part_mean(shifted - spec.k, sd)
                         + _positive_part_mean(-shifted - spec.k, sd))
    if isinstance(spec, Power):
        return gaussian_abs_moment(spec.c, mean, sd) + spec.d
    return None


def _monte_carlo_average(spec: DampingSpec, drift: DriftSpec, budget: int, seed: int,
                         dt: float = 0.01, n_chains: int = 64) -> PiAverage:
    rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(7,)))
    n_steps = max(budget // n_chains, 200)
    burn_in = n_steps // 5
    u = np.tile(np.asarray(drift.dissipation_constants().center), (n_chains, 1))
    sums = np.zeros(n_chains)
    for step in range(n_steps):
        u = u + drift.drift(u) * dt + math.sqrt(dt) * rng.standard_normal(u.shape)
        if step >= burn_in:
            sums += spec(u)
    chain_means = sums / (n_steps - burn_in)
    value = float(np.mean(chain_means))
    error = float(np.std(chain_means, ddof=1) / math.sqrt(n_chains))
    logger.debug("monte-carlo pi-average %.6g +/- %.2g over %d chains", value, error, n_chains)
    return PiAverage(value, error, "monte-carlo")


def pi_average(spec: DampingSpec, drift: DriftSpec, mc_budget: Optional[int] = None,
               seed: int = 0) -> PiAverage:
    """<pi, b>: closed form, then Gauss-Hermite, then long-run Monte Carlo."""
    if isinstance(spec, Constant):
        return PiAverage(spec.value, 0.0, "closed-form")
    if isinstance(drift, OU):
        mean, cov = stationary_law(drift)
        mu = float(mean[spec.coordinate])
        sd = math.sqrt(float(cov[spec.coordinate, spec.coordinate]))
        closed = _closed_form_average(spec, mu, sd)
        if closed is not None:
            return PiAverage(float(closed), 0.0, "closed-form")
        value = _gauss_hermite(spec.evaluate, mu, sd, GAUSS_HERMITE_NODES)
        check = _gauss_hermite(spec.evaluate, mu, sd, GAUSS_HERMITE_CHECK_NODES)
        return PiAverage(value, abs(value - check), "gauss-hermite")
    if mc_budget is None:
        raise UnsupportedDriftError(
            f"pi-average under a {drift.kind} drift needs a Monte Carlo budget")
    logger.warning("pi-average falling back to Monte Carlo (%d samples)", mc_budget)
    return _monte_carlo_average(spec, drift, mc_budget, seed)


@dataclass(frozen=True)
class Profile:
    """Everything the tail classification needs to know about b under pi."""

    damping: DampingSpec
    drift: DriftSpec
    box: Tuple[float, float]
    infimum: float
    zero_set_kind: str
    lipschitz_constant: float
    global_lipschitz: float
    pi_average: float
    pi_average_error: float
    pi_average_provenance: str
    growth_exponent: float
    grid_resolution: Optional[float] = None

    def to_dict(self) -> Dict:
        return {
            "damping": self.damping.to_dict(),
            "drift": self.drift.to_dict(),
            "box": list(self.box),
            "infimum": self.infimum,
            "zero_set_kind": self.zero_set_kind,
            "lipschitz_constant": self.lipschitz_constant,
            "global_lipschitz": self.global_lipschitz,
            "pi_average": self.pi_average,
            "pi_average_error": self.pi_average_error,
            "pi_average_provenance": self.pi_average_provenance,
            "growth_exponent": self.growth_exponent,
            "grid_resolution": self.grid_resolution,
        }


def damping_profile(spec: DampingSpec, drift: DriftSpec, box: Optional[Box] = None,
                    mc_budget: Optional[int] = None, seed: int = 0) -> Profile:
    box = box if box is not None else default_box(drift)
    lo, hi = box.interval(spec.coordinate)
    kind, resolution = spec.zero_set()
    avg = pi_average(spec, drift, mc_budget=mc_budget, seed=seed)
    if avg.provenance != "closed-form":
        logger.info("pi-average of %s via %s (error %.2g)", spec.label(), avg.provenance, avg.error)
    return Profile(
        damping=spec,
        drift=drift,
        box=(lo, hi),
        infimum=spec.infimum(),
        zero_set_kind=kind,
        lipschitz_constant=spec.box_lipschitz(lo, hi),
        global_lipschitz=spec.global_lipschitz(),
        pi_average=avg.value,
        pi_average_error=avg.error,
        pi_average_provenance=avg.provenance,
        growth_exponent=max(2.0, spec.growth_degree()),
        grid_resolution=resolution,
    )


# ---------------------------------------------------------------------------
# Surrogate scalar dampings for matrix models
# ---------------------------------------------------------------------------

def surrogate_profiles(model: MatrixModel, u) -> Tuple[np.ndarray, np.ndarray]:
    """Vectorised (b_bar, b_under) over the leading axes of u."""
    values = model.damping_values(u)
    bounds = np.asarray(model.term_bounds)
    low = np.minimum(values * bounds[:, 1], values * bounds[:, 0])
    high = np.maximum(values * bounds[:, 1], values * bounds[:, 0])
    member = np.zeros((model.d_x, len(model.terms)))
    for i, term in enumerate(model.terms):
        member[list(term.support), i] = 1.0
    per_index_low = low @ member.T
    per_index_high = high @ member.T
    return per_index_low.min(axis=-1), per_index_high.max(axis=-1)


def surrogate_damping(model: MatrixModel, u) -> Tuple[float, float]:
    b_bar, b_under = surrogate_profiles(model, np.atleast_1d(np.asarray(u, dtype=float)))
    return float(b_bar), float(b_under)


def tabulate_surrogates(model: MatrixModel, box: Optional[Box] = None,
                        resolution: int = 2001) -> Tuple[Tabulated, Tabulated]:
    """b_bar and b_under as Tabulated dampings on the box (d_u = 1 only)."""
    if model.d_u != 1:
        raise ModelSpecError("surrogate tabulation supports a scalar hidden process only")
    box = box if box is not None else default_box(model.drift)
    lo, hi = box.interval(0)
    grid = np.linspace(lo, hi, resolution)
    b_bar, b_under = surrogate_profiles(model, grid[:, None])
    return Tabulated(tuple(grid), tuple(b_bar)), Tabulated(tuple(grid), tuple(b_under))


# ---------------------------------------------------------------------------
# Contraction certificates
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ContractionCertificate:
    """|e^{-Gamma t}| <= C_gamma e^{-gamma t}."""

    C_gamma: float
    gamma: float
    provenance: str  # analytic | numeric-bound | user-supplied

    def __post_init__(self):
        for name in ("C_gamma", "gamma"):
            value = getattr(self, name)
            if not (math.isfinite(value) and value > 0):
                raise ModelSpecError(f"certificate {name} must be positive and finite, got {value}")

    def to_dict(self) -> Dict:
        return {"C_gamma": self.C_gamma, "gamma": self.gamma, "provenance": self.provenance}


def contraction_certificate(drift: DriftSpec, user: Optional[ContractionCertificate] = None,
                            rate_margin: float = 1e-3) -> ContractionCertificate:
    if user is not None:
        return ContractionCertificate(user.C_gamma, user.gamma, "user-supplied")
    if not isinstance(drift, OU):
        raise UnsupportedDriftError(
            f"contractivity of a {drift.kind} drift must be certified by the user")
    if drift.is_scalar:
        return ContractionCertificate(1.0, drift.gamma, "analytic")
    schur, _ = linalg.schur(drift.matrix.astype(complex), output="complex")
    eig = np.diag(schur)
    alpha = float(np.min(eig.real))
    nilpotent = schur - np.diag(eig)
    n_norm = float(np.linalg.norm(nilpotent, "fro"))
    if n_norm <= 1e-12 * max(1.0, float(np.linalg.norm(schur, "fro"))):
        return ContractionCertificate(1.0, alpha, "numeric-bound")
    # sup_t t^k e^{-eps alpha t} = (k / (eps alpha e))^k
    eps_rate = rate_margin * alpha
    C = sum(
        (n_norm * k / (eps_rate * math.e)) ** k / math.factorial(k) if k else 1.0
        for k in range(drift.dim)
    )
    logger.debug("non-normal OU rate: |N|_F = %.4g, C = %.4g", n_norm, C)
    return ContractionCertificate(float(C), (1.0 - rate_margin) * alpha, "numeric-bound")


def sampled_contraction_constant(drift: OU, gamma: float, t_max: float = 50.0,
                                 n: int = 5001) -> float:
    """Lower bound on C from sampling |e^{-Gamma t}| e^{gamma t} on [0, t_max]."""
    best = 0.0
    for t in np.linspace(0.0, t_max, n):
        best = max(best, float(np.linalg.norm(linalg.expm(-drift.matrix * t), 2) * math.exp(gamma * t)))
    return best


def describe(model: Model) -> List[str]:
    """Short human-readable lines describing a model."""
    if isinstance(model, ScalarModel):
        return [f"damping: {model.damping.label()}", f"drift: {model.drift.kind} {model.drift.params()}",
                f"sigma_x: {model.sigma_x}, d_x: {model.d_x}"]
    lines = [f"term {i}: {t.damping.label()} on {list(t.support)}" for i, t in enumerate(model.terms)]
    return lines + [f"drift: {model.drift.kind} {model.drift.params()}"]

