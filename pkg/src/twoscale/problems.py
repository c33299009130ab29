"""Benchmark loss landscapes and the coupled fast-variable potential.

A problem is a loss phi with its gradient and a global Lipschitz constant
for the gradient. The coupled potential adds the quadratic tether
Phi(y, x) = phi(y) + |x - y|^2 / (2*gamma), which drives the fast variable;
it is only accepted when gamma < 1/L so that the fast drift is strongly
monotone with rate kappa = 1/gamma - L > 0.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

FAMILIES = ("quadratic", "zero", "saturated_double_well")

# Family codes consumed by the compiled SDE kernels.
FAMILY_CODES = {"zero": 0, "quadratic": 1, "saturated_double_well": 2}

# Saturated double well: w(s) = (s^2 - 1)^2 / 4 on |s| <= 2, continued
# beyond by the quadratic Taylor polynomial at s = +-2. The continuation
# keeps w'' = 11, so max |w''| = 11 globally and the landscape keeps its
# two wells at +-1 inside the region of interest.
SDW_EDGE = 2.0
SDW_VALUE_EDGE = 2.25   # w(2)
SDW_SLOPE_EDGE = 6.0    # w'(2)
SDW_CURVATURE = 11.0    # w''(2) = global Lipschitz constant of w'


def _sdw_w(s: np.ndarray) -> np.ndarray:
    s = np.asarray(s, dtype=float)
    a = np.abs(s)
    inner = (s * s - 1.0) ** 2 / 4.0
    t = a - SDW_EDGE
    outer = SDW_VALUE_EDGE + SDW_SLOPE_EDGE * t + 0.5 * SDW_CURVATURE * t * t
    return np.where(a <= SDW_EDGE, inner, outer)


def _sdw_dw(s: np.ndarray) -> np.ndarray:
    s = np.asarray(s, dtype=float)
    a = np.abs(s)
    inner = s * (s * s - 1.0)
    outer = np.sign(s) * (SDW_SLOPE_EDGE + SDW_CURVATURE * (a - SDW_EDGE))
    return np.where(a <= SDW_EDGE, inner, outer)


def _sdw_d2w(s: np.ndarray) -> np.ndarray:
    s = np.asarray(s, dtype=float)
    return np.where(np.abs(s) <= SDW_EDGE, 3.0 * s * s - 1.0, SDW_CURVATURE)


@dataclass(frozen=True)
class TestProblem:
    """A loss landscape: value, gradient and gradient Lipschitz bound.

    ``eval``/``grad`` accept a point of shape (dim,) or a batch (N, dim)
    and return a float / (N,) array and an array of the same shape as the
    input, respectively.
    """

    name: str
    dim: int
    eval: Callable[[np.ndarray], np.ndarray]
    grad: Callable[[np.ndarray], np.ndarray]
    lipschitz_grad: float
    lower_bounded: bool = True
    family_code: int = 0
    # elementwise second derivative (separable families); used by Newton
    # searches for the coupled-potential minimizer
    hess_diag: Callable[[np.ndarray], np.ndarray] | None = None


def _batched_sum(term: Callable[[np.ndarray], np.ndarray]) -> Callable[[np.ndarray], np.ndarray]:
    def evaluate(x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        out = np.sum(term(x), axis=-1)
        return float(out) if out.ndim == 0 else out

    return evaluate


def make_problem(name: str, params: dict | None = None) -> TestProblem:
    """Build a registered problem family.

    params: ``{"dim": n}`` with n >= 1; unknown keys are rejected.
    """
    params = dict(params or {})
    dim = params.pop("dim", 1)
    if params:
        raise ValueError(f"unknown problem parameters: {sorted(params)}")
    if not isinstance(dim, (int, np.integer)) or dim < 1:
        raise ValueError(f"dim must be a positive integer, got {dim!r}")
    dim = int(dim)

    if name == "quadratic":
        return TestProblem(
            name="quadratic",
            dim=dim,
            eval=_batched_sum(lambda x: 0.5 * x * x),
            grad=lambda x: np.asarray(x, dtype=float).copy(),
            lipschitz_grad=1.0,
            family_code=FAMILY_CODES["quadratic"],
            hess_diag=lambda x: np.ones_like(np.asarray(x, dtype=float)),
        )
    if name == "zero":
        return TestProblem(
            name="zero",
            dim=dim,
            eval=_batched_sum(lambda x: 0.0 * x),
            grad=lambda x: np.zeros_like(np.asarray(x, dtype=float)),
            lipschitz_grad=0.0,
            family_code=FAMILY_CODES["zero"],
            hess_diag=lambda x: np.zeros_like(np.asarray(x, dtype=float)),
        )
    if name == "saturated_double_well":
        return TestProblem(
            name="saturated_double_well",
            dim=dim,
            eval=_batched_sum(_sdw_w),
            grad=lambda x: _sdw_dw(np.asarray(x, dtype=float)),
            lipschitz_grad=SDW_CURVATURE,
            family_code=FAMILY_CODES["saturated_double_well"],
            hess_diag=lambda x: _sdw_d2w(np.asarray(x, dtype=float)),
        )
    raise ValueError(f"unknown problem family {name!r}; known: {FAMILIES}")


@dataclass(frozen=True)
class CoupledPotential:
    """Phi(y, x) = phi(y) + |x - y|^2 / (2*gamma) at inverse temperature beta.

    Construction enforces 0 < gamma < 1/L (strong monotonicity of the fast
    drift) and beta > 0.
    """

    problem: TestProblem
    gamma: float
    beta: float

    def __post_init__(self):
        if self.gamma <= 0.0:
            raise ValueError(f"gamma must be positive, got {self.gamma}")
        if self.beta <= 0.0:
            raise ValueError(f"beta must be positive, got {self.beta}")
        L = self.problem.lipschitz_grad
        if L > 0.0 and self.gamma >= 1.0 / L:
            raise ValueError(
                f"gamma={self.gamma} violates gamma < 1/L = {1.0 / L:.6g} "
                f"for problem {self.problem.name!r}"
            )

    @property
    def kappa(self) -> float:
        """Strong-monotonicity rate 1/gamma - L of the fast drift."""
        return 1.0 / self.gamma - self.problem.lipschitz_grad

    def value(self, y: np.ndarray, x: np.ndarray) -> np.ndarray:
        """Phi(y, x); y of shape (dim,) or (N, dim), x of shape (dim,)."""
        y = np.asarray(y, dtype=float)
        x = np.asarray(x, dtype=float)
        quad = np.sum((x - y) ** 2, axis=-1) / (2.0 * self.gamma)
        return self.problem.eval(y) + quad

    def grad_y(self, y: np.ndarray, x: np.ndarray) -> np.ndarray:
        """d/dy Phi(y, x) = grad phi(y) + (y - x)/gamma."""
        y = np.asarray(y, dtype=float)
        x = np.asarray(x, dtype=float)
        return self.problem.grad(y) + (y - x) / self.gamma

    def drift_b(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        """Fast drift b(x, y) = -grad phi(y) + (x - y)/gamma."""
        return -self.grad_y(y, x)


@dataclass(frozen=True)
class MonotonicityReport:
    kappa: float
    max_normalized_defect: float
    passed: bool
    samples: int
    tolerance: float


def check_monotonicity(
    pot: CoupledPotential,
    samples: int = 200,
    radius: float = 5.0,
    seed: int = 0,
    tolerance: float = 1e-9,
) -> MonotonicityReport:
    """Sample (x, y1, y2) triples and test the one-sided Lipschitz bound.

    For each triple computes
    d = (b(x,y1) - b(x,y2)) . (y1 - y2) + kappa*|y1 - y2|^2, normalized by
    |y1 - y2|^2; passes iff the maximum is <= tolerance.
    """
    if samples < 1:
        raise ValueError("samples must be >= 1")
    rng = np.random.default_rng(seed)
    dim = pot.problem.dim
    worst = -np.inf
    for _ in range(samples):
        x, y1, y2 = rng.uniform(-radius, radius, size=(3, dim))
        if np.allclose(y1, y2):
            continue
        diff = y1 - y2
        sq = float(np.dot(diff, diff))
        d = float(np.dot(pot.drift_b(x, y1) - pot.drift_b(x, y2), diff)) + pot.kappa * sq
        worst = max(worst, d / sq)
    return MonotonicityReport(
        kappa=pot.kappa,
        max_normalized_defect=worst,
        passed=worst <= tolerance,
        samples=samples,
        tolerance=tolerance,
    )
