"""
Theory Subpackage

Generator calculus, tail classification and the numerical certificates that
back the predictions:
- Generator and carre du champ on test functions with analytic derivatives
- Tail classes and moment thresholds per damping family
- Drift-inequality checks and membership certificates on a box
- The Feynman-Kac potential theta by coupled Monte Carlo
"""

from .certificates import (
    AmCertificate, LyapunovCheckReport, check_Am, search_eta, verify_drift_inequality,
)
from .classify import (
    NOT_CLASSIFIABLE, TailPrediction, classify, classify_matrix, moment_upper_threshold,
    spekf_exact_threshold,
)
from .feynman_kac import ThetaEstimate, theta_feynman_kac, theta_residual
from .generator import (
    GeneratorFn, apply_generator, carre_du_champ, compose, gamma_integral_oracle, surrogate_moment,
)

__all__ = [
    'AmCertificate', 'GeneratorFn', 'LyapunovCheckReport', 'NOT_CLASSIFIABLE', 'TailPrediction',
    'ThetaEstimate', 'apply_generator', 'carre_du_champ', 'check_Am', 'classify', 'classify_matrix',
    'compose', 'gamma_integral_oracle', 'moment_upper_threshold', 'search_eta',
    'spekf_exact_threshold', 'surrogate_moment', 'theta_feynman_kac', 'theta_residual',
    'verify_drift_inequality',
]
