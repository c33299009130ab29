"""Averaged Hamiltonian evaluation and a 1-D backward monotone solver.

The averaged Hamiltonian integrates the pointwise Bellman integrand
against mu_x, minimizing over the control grid either inside the integral
(per fast node; equivalent to minimizing over measurable y-dependent
controls) or outside (constant controls, the Hamiltonian that a family of
time-varying standard laws approximates). The Cauchy problem
-V_t + Hbar(t, x, DV, D2V) + lam*V = 0, V(T) = gbar is stepped backward
with an explicit Lax-Friedrichs–type monotone scheme.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import UnstableStepError
from .gibbs import GibbsFactory
from .problems import CoupledPotential


class EffectiveHamiltonian:
    """Hbar(t, x, p, P) built from slow data averaged against mu_x.

    f(x, nodes, u) -> (N,) drift values (model drift by default), sigma
    (optional, scalar diffusion) and running payoff l(t, x, nodes, u) are
    evaluated on the control grid x quadrature nodes once per slow point
    and cached; each (p, P) evaluation is then a minimum over cached
    coefficient rows.
    """

    def __init__(
        self,
        pot: CoupledPotential,
        gibbs_factory: GibbsFactory,
        u_grid,
        f: Callable | None = None,
        sigma: Callable | None = None,
        running: Callable | None = None,
        pointwise: bool = True,
        running_time_free: bool = True,
    ):
        self.pot = pot
        self.factory = gibbs_factory
        self.u_grid = np.asarray(u_grid, dtype=float)
        if self.u_grid.ndim != 1 or len(self.u_grid) < 1:
            raise ValueError("u_grid must be a non-empty 1-D array")
        self.f = f or self._model_drift
        self.sigma = sigma
        self.running = running
        self.pointwise = pointwise
        self.running_time_free = running_time_free
        self._cache: dict[tuple, tuple] = {}

    def _model_drift(self, x, nodes, u):
        return -(u * (x[0] - nodes[:, 0])) / self.pot.gamma

    def _coefficients(self, x: np.ndarray):
        key = tuple(x.tolist())
        hit = self._cache.get(key)
        if hit is not None:
            return hit
        gibbs = self.factory(x)
        nodes, weights = gibbs.nodes, gibbs.weights
        n_u, n_nodes = len(self.u_grid), nodes.shape[0]
        F = np.empty((n_u, n_nodes))
        S = np.zeros((n_u, n_nodes))
        L0 = np.zeros((n_u, n_nodes))
        for i, u in enumerate(self.u_grid):
            uu = np.full(n_nodes, u)
            F[i] = np.asarray(self.f(x, nodes, uu), dtype=float)
            if self.sigma is not None:
                sv = np.asarray(self.sigma(x, nodes, uu), dtype=float)
                S[i] = sv * sv
            if self.running is not None and self.running_time_free:
                L0[i] = np.asarray(self.running(0.0, x, nodes, uu), dtype=float)
        entry = (weights, F, S, L0)
        if len(self._cache) > 8192:
            self._cache.pop(next(iter(self._cache)))
        self._cache[key] = entry
        return entry

    def _running_matrix(self, t: float, x: np.ndarray):
        if self.running is None:
            return None
        if self.running_time_free:
            return self._coefficients(x)[3]
        gibbs = self.factory(x)
        nodes = gibbs.nodes
        out = np.empty((len(self.u_grid), nodes.shape[0]))
        for i, u in enumerate(self.u_grid):
            out[i] = np.asarray(self.running(t, x, nodes, np.full(nodes.shape[0], u)), dtype=float)
        return out

    def eval(self, t: float, x, p: float, P: float, pointwise: bool | None = None) -> float:
        """Hbar at (t, x, p, P); `pointwise` overrides the instance mode."""
        x = np.atleast_1d(np.asarray(x, dtype=float))
        weights, F, S, L0 = self._coefficients(x)
        L = self._running_matrix(t, x) if self.running is not None else None
        integrand = -S * P - F * p
        if L is not None:
            integrand = integrand - L
        mode = self.pointwise if pointwise is None else pointwise
        if mode:
            return float(weights @ integrand.min(axis=0))
        return float((integrand @ weights).min())

    def slope_bound(self, x_values, p_scale: float, pointwise: bool | None = None) -> float:
        """1.2 x max |dHbar/dp| over sampled x and p by central differences."""
        dp = max(1e-6, 1e-3 * p_scale)
        worst = 0.0
        for xv in np.atleast_1d(x_values):
            for p in (-p_scale, -0.5 * p_scale, 0.0, 0.5 * p_scale, p_scale):
                hi = self.eval(0.0, xv, p + dp, 0.0, pointwise=pointwise)
                lo = self.eval(0.0, xv, p - dp, 0.0, pointwise=pointwise)
                worst = max(worst, abs(hi - lo) / (2.0 * dp))
        return 1.2 * worst

    def curvature_bound(self, x_values, pointwise: bool | None = None) -> float:
        """max |dHbar/dP| over sampled x (averaged squared diffusion)."""
        if self.sigma is None:
            return 0.0
        dP = 1e-4
        worst = 0.0
        for xv in np.atleast_1d(x_values):
            hi = self.eval(0.0, xv, 0.0, dP, pointwise=pointwise)
            lo = self.eval(0.0, xv, 0.0, -dP, pointwise=pointwise)
            worst = max(worst, abs(hi - lo) / (2.0 * dP))
        return worst


def effective_hamiltonian_eval(H: EffectiveHamiltonian, t: float, x, p: float, P: float) -> float:
    return H.eval(t, x, p, P)


@dataclass(frozen=True)
class HjbSolution:
    """Grid solution of the backward effective Cauchy problem."""

    t_grid: np.ndarray
    x_grid: np.ndarray
    values: np.ndarray  # (n_t, n_x), values[k] at t_grid[k]; values[-1] = terminal
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if not np.all(np.isfinite(self.values)):
            raise ValueError("HJB solution contains non-finite values")
        for arr in (self.t_grid, self.x_grid, self.values):
            arr.flags.writeable = False

    def value_at(self, t: float, x: float) -> float:
        """Bilinear interpolation on the (t, x) grid."""
        tg, xg = self.t_grid, self.x_grid
        i = int(np.clip(np.searchsorted(tg, t) - 1, 0, len(tg) - 2))
        j = int(np.clip(np.searchsorted(xg, x) - 1, 0, len(xg) - 2))
        wt = np.clip((t - tg[i]) / (tg[i + 1] - tg[i]), 0.0, 1.0)
        wx = np.clip((x - xg[j]) / (xg[j + 1] - xg[j]), 0.0, 1.0)
        v = self.values
        return float(
            (1 - wt) * ((1 - wx) * v[i, j] + wx * v[i, j + 1])
            + wt * ((1 - wx) * v[i + 1, j] + wx * v[i + 1, j + 1])
        )

    def to_csv(self, path, float_fmt=repr):
        lines = ["# schema_version=1", "t,x,V"]
        for i, t in enumerate(self.t_grid):
            for j, x in enumerate(self.x_grid):
                lines.append(f"{float_fmt(float(t))},{float_fmt(float(x))},{float_fmt(float(self.values[i, j]))}")
        with open(path, "w", newline="\n") as fh:
            fh.write("\n".join(lines) + "\n")


def solve_effective_hjb_1d(
    H: EffectiveHamiltonian,
    terminal: Callable[[np.ndarray], np.ndarray],
    lam: float,
    domain: tuple[float, float],
    n_x: int,
    n_t: int | None = None,
    T: float = 1.0,
    pointwise: bool | None = None,
    cfl_safety: float = 0.8,
) -> HjbSolution:
    """Explicit monotone Lax-Friedrichs scheme for the 1-D Cauchy problem.

    Central differences feed Hbar; the dissipation uses a finite-difference
    bound on |dHbar/dp| (x1.2). A user n_t violating the monotonicity CFL
    bound is refused. Boundary nodes use linear-extrapolation ghosts
    (one-sided gradient, zero curvature).
    """
    if n_x < 3:
        raise ValueError("need n_x >= 3")
    a, b = domain
    x_grid = np.linspace(a, b, n_x)
    dx = x_grid[1] - x_grid[0]
    v_T = np.asarray([terminal(np.array([xv])) for xv in x_grid], dtype=float).reshape(n_x)

    p_scale = 1.5 * float(np.max(np.abs(np.gradient(v_T, dx)))) + 1e-6
    sample_x = x_grid[:: max(1, n_x // 16)]
    theta = H.slope_bound(sample_x, p_scale, pointwise=pointwise)
    curv = H.curvature_bound(sample_x, pointwise=pointwise)
    if theta <= 0.0 and curv <= 0.0 and lam == 0.0:
        dt_max = T
    else:
        dt_max = 1.0 / (2.0 * curv / dx**2 + theta / dx + lam + 1e-300)
    if n_t is None:
        n_t = max(1, math.ceil(T / (cfl_safety * dt_max)))
    dt = T / n_t
    if dt > dt_max * (1.0 + 1e-9):
        raise UnstableStepError(
            f"n_t={n_t} gives dt={dt:g} above the CFL bound {dt_max:g} "
            f"(theta={theta:g}, curvature={curv:g}, lam={lam:g})"
        )

    t_grid = np.linspace(0.0, T, n_t + 1)
    values = np.empty((n_t + 1, n_x))
    values[-1] = v_T
    v = v_T.copy()
    for k in range(n_t - 1, -1, -1):
        t = t_grid[k + 1]
        v_ghost = np.concatenate(([2.0 * v[0] - v[1]], v, [2.0 * v[-1] - v[-2]]))
        pc = (v_ghost[2:] - v_ghost[:-2]) / (2.0 * dx)
        d2 = (v_ghost[2:] - 2.0 * v + v_ghost[:-2]) / dx**2
        if float(np.max(np.abs(pc))) > p_scale:
            raise UnstableStepError(
                f"gradient magnitude {np.max(np.abs(pc)):.3g} left the dissipation "
                f"envelope {p_scale:.3g} at t={t:.4g}; the scheme would lose "
                "monotonicity (dissipation constant no longer dominates |dH/dp|)"
            )
        hbar = np.array(
            [H.eval(t, x_grid[j], float(pc[j]), float(d2[j]), pointwise=pointwise) for j in range(n_x)]
        )
        v = v - dt * (hbar - 0.5 * theta * dx * d2 + lam * v)
        values[k] = v
    meta = {
        "theta": theta,
        "curvature_bound": curv,
        "dt": dt,
        "dx": dx,
        "cfl_dt_max": dt_max,
        "n_t": n_t,
        "pointwise": H.pointwise if pointwise is None else pointwise,
    }
    return HjbSolution(t_grid=t_grid, x_grid=x_grid, values=values, meta=meta)
