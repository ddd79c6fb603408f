"""
damping-lab

Simulation and verification lab for conditional Gaussian SDEs with stochastic
damping, dX = -b(u) X dt + sigma_x dW driven by a hidden diffusion u:
- Damping families, hidden drifts and scalar or matrix models
- Long-run and ensemble integration with reproducible noise streams
- Tail-class regression, Hill indices, moment scaling and large deviations
- Theoretical tail classes, thresholds and certificates (see damping_lab.theory)
"""

__version__ = "1.0.0"
__author__ = "damping-lab developers"

from .analysis import fit_tail, hill_index, ldp_empirical, moment_scaling_exponent
from .integrate import SimConfig, ensemble_expectation, simulate_stream
from .model import OU, Affine, Constant, GradientForm, Hinge, Power, ScalarModel, Tabulated

__all__ = [
    'Affine', 'Constant', 'GradientForm', 'Hinge', 'OU', 'Power', 'ScalarModel', 'SimConfig',
    'Tabulated', 'ensemble_expectation', 'fit_tail', 'hill_index', 'ldp_empirical',
    'moment_scaling_exponent', 'simulate_stream',
]
