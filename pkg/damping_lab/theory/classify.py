"""
Tail Classification

Maps a damping profile to its predicted tail class and moment thresholds:
polynomial when b can be negative, exponential when b vanishes on an interval,
intermediate when b vanishes at a point, gaussian when b is bounded away from
zero. Matrix models are classified through their scalar surrogate dampings.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

from ..errors import MissingCertificateError, ModelSpecError, UnsupportedDriftError
from ..model import (
    BOUNDED_BELOW_POSITIVE, NEGATIVE_SOMEWHERE, OU, ZERO_AT_POINT, ZERO_ON_INTERVAL, Affine,
    Box, ContractionCertificate, MatrixModel, Profile, contraction_certificate, damping_profile,
    tabulate_surrogates,
)
from .certificates import search_eta

logger = logging.getLogger(__name__)

POLYNOMIAL = "polynomial"
EXPONENTIAL = "exponential"
INTERMEDIATE = "intermediate"
GAUSSIAN = "gaussian"
NOT_CLASSIFIABLE = "not-classifiable"

CLASS_ORDER = (GAUSSIAN, INTERMEDIATE, EXPONENTIAL, POLYNOMIAL)


@dataclass(frozen=True)
class TailPrediction:
    tail_class: str
    p_up: float = math.inf
    p_low: float = math.inf
    q0: Optional[float] = None
    scaling_bounds: Tuple[float, float] = (math.nan, math.nan)
    variance_infinite: bool = False
    notes: List[str] = field(default_factory=list)
    class_range: Optional[Tuple[str, str]] = None
    level: Optional[int] = None
    radii: Dict[str, float] = field(default_factory=dict)

    @property
    def classifiable(self) -> bool:
        return self.tail_class != NOT_CLASSIFIABLE

    def to_dict(self) -> Dict:
        return {
            "class": self.tail_class,
            "p_up": self.p_up,
            "p_low": self.p_low,
            "q0": self.q0,
            "scaling_bounds": list(self.scaling_bounds),
            "variance_infinite": self.variance_infinite,
            "notes": list(self.notes),
            "class_range": list(self.class_range) if self.class_range else None,
            "level": self.level,
            "radii": dict(self.radii),
        }


def moment_upper_threshold(profile: Profile, certificate: ContractionCertificate) -> float:
    """Largest p with p <pi,b> - p^2 C^2 |b|_Lip^2 / (2 gamma^2) > 0 for every smaller p."""
    if profile.pi_average <= 0:
        raise ModelSpecError("the moment threshold needs a positive average damping")
    lip = profile.global_lipschitz
    if not math.isfinite(lip):
        raise ModelSpecError(f"{profile.damping.label()} is not globally Lipschitz")
    if lip == 0:
        return math.inf
    return 2.0 * profile.pi_average * certificate.gamma ** 2 / (certificate.C_gamma ** 2 * lip ** 2)


def spekf_exact_threshold(damping, gamma: float, center: float = 0.0) -> float:
    """Exact moment threshold q0 = 2 m gamma^2 / c for b(u) = c (u + m) under scalar OU.

    Written through the stationary average this is 2 <pi, b> gamma^2 / c^2.
    """
    if not isinstance(damping, Affine):
        raise ModelSpecError(f"the exact threshold applies to affine dampings, got {damping.kind}")
    if damping.c == 0:
        raise ModelSpecError("the exact threshold needs a nonzero slope")
    mean_damping = damping.a + damping.c * (center + damping.m_u)
    return 2.0 * mean_damping * gamma ** 2 / damping.c ** 2


def exponential_moment_radius(pi_average: float, grad_theta_sup: float, sigma_x: float) -> float:
    """Radius of beta with E exp<beta, X> finite under nonnegative damping."""
    denom = grad_theta_sup ** 2 + sigma_x ** 2
    return math.inf if denom == 0 else 2.0 * pi_average / denom


def gaussian_moment_radius(b0: float, sigma_x: float) -> float:
    """alpha with E exp(alpha |X|^2) finite when b >= b0 > 0."""
    if b0 <= 0:
        raise ModelSpecError("needs a positive lower bound on the damping")
    return math.inf if sigma_x == 0 else b0 / sigma_x ** 2


def ou_time_average_variance(gamma: float, t: float) -> float:
    """Var of (1/t) int_0^t u_s ds for stationary scalar OU with rate gamma."""
    gt = gamma * t
    return (1.0 - (1.0 - math.exp(-gt)) / gt) / (gamma ** 2 * t)


def intermediate_level(growth: float) -> int:
    """Smallest m >= 1 with 2^{m+1} >= growth + 2."""
    return max(1, math.ceil(math.log2(growth + 2.0)) - 1)


def _scaling_bounds(tail_class: str, level: Optional[int]) -> Tuple[float, float]:
    if tail_class == POLYNOMIAL:
        return math.inf, math.inf
    if tail_class == EXPONENTIAL:
        return 2.0, 2.0
    if tail_class == INTERMEDIATE:
        return 2.0 - 1.0 / 2 ** level, 2.0
    if tail_class == GAUSSIAN:
        return 1.0, 1.0
    return math.nan, math.nan


def _lower_threshold(profile: Profile, notes: List[str], eta_search) -> float:
    try:
        report = search_eta(profile.damping, profile.drift, **(eta_search or {}))
    except UnsupportedDriftError as exc:
        notes.append(f"no blow-up threshold: {exc}")
        return math.inf
    if report.passed:
        q = report.parameters["q"]
        notes.append(f"moments of order >= {q:.4g} blow up (eta search, c = {report.parameters['c']:.3g})")
        return float(q)
    notes.append("eta search found no feasible (c, q); blow-up threshold unknown")
    return math.inf


def classify(profile: Profile, certificate: Optional[ContractionCertificate] = None,
             am_certificate=None, sigma_x: Optional[float] = None,
             eta_search: Optional[Dict] = None) -> TailPrediction:
    """Predicted tail class and moment thresholds for one scalar damping."""
    notes: List[str] = []
    if profile.pi_average <= 0:
        notes.append(f"average damping nonpositive: <pi, b> = {profile.pi_average:.6g}")
        return TailPrediction(NOT_CLASSIFIABLE, p_up=0.0, p_low=0.0, notes=notes)
    notes.append(f"<pi, b> = {profile.pi_average:.6g} > 0 ({profile.pi_average_provenance})")
    kind = profile.zero_set_kind
    radii: Dict[str, float] = {}

    if kind == NEGATIVE_SOMEWHERE:
        try:
            cert = contraction_certificate(profile.drift, certificate)
        except UnsupportedDriftError as exc:
            raise MissingCertificateError(str(exc)) from exc
        notes.append(f"contraction certificate C = {cert.C_gamma:.6g}, gamma = {cert.gamma:.6g} "
                     f"({cert.provenance})")
        if math.isfinite(profile.global_lipschitz):
            p_up = moment_upper_threshold(profile, cert)
            notes.append(f"b globally Lipschitz with constant {profile.global_lipschitz:.6g}")
        else:
            p_up = 0.0
            notes.append("b is not globally Lipschitz; no finite-moment guarantee")
        q0 = None
        drift = profile.drift
        if isinstance(profile.damping, Affine) and isinstance(drift, OU) and drift.is_scalar:
            q0 = spekf_exact_threshold(profile.damping, drift.gamma, drift.center[0])
            p_low = q0
            notes.append(f"exact threshold q0 = {q0:.6g}")
        else:
            p_low = _lower_threshold(profile, notes, eta_search)
        threshold = q0 if q0 is not None else p_low
        return TailPrediction(POLYNOMIAL, p_up=p_up, p_low=p_low, q0=q0,
                              scaling_bounds=_scaling_bounds(POLYNOMIAL, None),
                              variance_infinite=threshold <= 2.0, notes=notes)

    if kind == ZERO_ON_INTERVAL:
        notes.append("b >= 0 and vanishes on an interval")
        tail_class, level = EXPONENTIAL, None
    elif kind == ZERO_AT_POINT:
        if am_certificate is not None:
            level = int(am_certificate.m)
            notes.append(f"level m = {level} from a membership certificate ({am_certificate.verdict})")
        else:
            level = intermediate_level(profile.growth_exponent)
            notes.append(f"level m = {level} from growth exponent {profile.growth_exponent:g}")
        tail_class = INTERMEDIATE
    elif kind == BOUNDED_BELOW_POSITIVE:
        notes.append(f"b >= {profile.infimum:.6g} > 0")
        tail_class, level = GAUSSIAN, None
        if sigma_x is not None:
            radii["gaussian_moment"] = gaussian_moment_radius(profile.infimum, sigma_x)
    else:
        raise ModelSpecError(f"unknown zero-set kind {kind!r}")

    if sigma_x is not None and tail_class != GAUSSIAN and isinstance(profile.drift, OU):
        try:
            cert = contraction_certificate(profile.drift, certificate)
            grad_theta = cert.C_gamma / cert.gamma * profile.global_lipschitz
            radii["exponential_moment"] = exponential_moment_radius(profile.pi_average, grad_theta, sigma_x)
        except UnsupportedDriftError:
            pass
    return TailPrediction(tail_class, scaling_bounds=_scaling_bounds(tail_class, level),
                          notes=notes, level=level, radii=radii)


def _heavier(a: str, b: str) -> str:
    return a if CLASS_ORDER.index(a) >= CLASS_ORDER.index(b) else b


def classify_matrix(model: MatrixModel, box: Optional[Box] = None,
                    certificate: Optional[ContractionCertificate] = None,
                    resolution: int = 2001) -> TailPrediction:
    """Classify a matrix model through its upper (b_bar) and lower (b_under) surrogates.

    Finite-moment statements come from b_bar <= B, blow-up statements from
    b_under. The reported class is the heavier of the two.
    """
    b_bar, b_under = tabulate_surrogates(model, box, resolution)
    upper = classify(damping_profile(b_bar, model.drift, box), certificate)
    lower = classify(damping_profile(b_under, model.drift, box), certificate)
    notes = [f"upper surrogate: {n}" for n in upper.notes] + [f"lower surrogate: {n}" for n in lower.notes]
    if not upper.classifiable:
        return TailPrediction(NOT_CLASSIFIABLE, p_up=0.0, p_low=lower.p_low, notes=notes)
    tail_class = upper.tail_class if not lower.classifiable else _heavier(upper.tail_class, lower.tail_class)
    class_range = (lower.tail_class if lower.classifiable else tail_class, upper.tail_class)
    return TailPrediction(tail_class, p_up=upper.p_up, p_low=lower.p_low,
                          scaling_bounds=upper.scaling_bounds,
                          variance_infinite=lower.classifiable and lower.p_low <= 2.0,
                          notes=notes, class_range=class_range, level=upper.level)
