"""Numerical laboratory for entropic gradient descent via two-scale SDEs.

Builds the invariant measure of the fast variable, the smoothed loss and
its gradient, simulates the perturbed controlled pair and its averaged
limits, estimates control values by Monte Carlo, and solves the 1-D
effective HJB Cauchy problem.
"""

from .control import (
    AdaptiveDescentLaw,
    ConstantLaw,
    ExtendedControlLaw,
    FeedbackLaw,
    PayoffSpec,
    PiecewiseConstantLaw,
    ValueEstimate,
    bang_bang_family,
    constant_family,
    effective_diffusion,
    effective_drift,
    effective_payoff,
    estimate_value_effective,
    estimate_value_perturbed,
    payoff,
    threshold_family,
)
from .errors import (
    ConfigError,
    DivergedError,
    FamilyMismatchError,
    MethodError,
    TwoScaleError,
    UnstableStepError,
)
from .gibbs import (
    GibbsFactory,
    GibbsRepresentation,
    LangevinConfig,
    MomentTable,
    build_gibbs,
    local_entropy,
    local_entropy_gradient,
    moments,
)
from .hjb import EffectiveHamiltonian, HjbSolution, effective_hamiltonian_eval, solve_effective_hjb_1d
from .lab import ExperimentConfig, run_convergence_study, run_quasi_optimality, run_value_ordering
from .problems import CoupledPotential, TestProblem, check_monotonicity, make_problem
from .sde import (
    BrownianStore,
    SigmaSpec,
    TrajectoryBundle,
    TwoScaleSpec,
    integrate_effective_ode,
    integrate_effective_sde,
    integrate_two_scale,
)

__version__ = "0.1.0"
