"""Control laws, payoffs, averaged coefficients and Monte-Carlo values.

Standard laws are deterministic functions of time (or of (t, x) through a
feedback table); extended laws additionally read the fast variable through
a lookup table on a fixed y-grid with nearest-node extension. Averaging a
coefficient against mu_x is delegated to a GibbsFactory, so every
evaluator here shares one quadrature representation per slow point.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import MethodError
from .gibbs import GibbsFactory, GibbsRepresentation
from .problems import CoupledPotential
from .sde import BrownianStore, TrajectoryBundle, TwoScaleSpec, integrate_effective_ode, integrate_effective_sde, integrate_two_scale


def _clip_range(values, u_range):
    lo, hi = u_range
    if np.any(np.asarray(values) < lo - 1e-12) or np.any(np.asarray(values) > hi + 1e-12):
        raise ValueError(f"control values outside range [{lo}, {hi}]")
    return np.clip(values, lo, hi)


class ConstantLaw:
    """u_t = u for all t."""

    def __init__(self, u: float, u_range=(0.0, 1.0)):
        self.u = float(_clip_range(u, u_range))
        self.u_range = tuple(u_range)
        self.law_id = f"const:{self.u:g}"

    def at(self, t, x=None) -> float:
        return self.u

    def step_values(self, times) -> np.ndarray:
        return np.full(len(times), self.u)

    def integral_over(self, a: float, b: float) -> float:
        return self.u * (b - a)

    def values_on(self, y, t=None, x=None) -> np.ndarray:
        return np.full(np.shape(y), self.u)

    def bind(self, t=None, x=None):
        return self


class PiecewiseConstantLaw:
    """Right-continuous schedule: values[i] on [switch[i-1], switch[i])."""

    def __init__(self, switch_times: Sequence[float], values: Sequence[float], u_range=(0.0, 1.0)):
        self.switch_times = np.asarray(switch_times, dtype=float)
        if np.any(np.diff(self.switch_times) <= 0):
            raise ValueError("switch times must be strictly increasing")
        if len(values) != len(self.switch_times) + 1:
            raise ValueError("need exactly one more value than switch times")
        self.values = np.asarray(_clip_range(values, u_range), dtype=float)
        self.u_range = tuple(u_range)
        switches = ";".join(f"{s:g}" for s in self.switch_times)
        vals = ";".join(f"{v:g}" for v in self.values)
        self.law_id = f"pwc:[{vals}]@[{switches}]"

    def at(self, t, x=None) -> float:
        return float(self.values[np.searchsorted(self.switch_times, t, side="right")])

    def step_values(self, times) -> np.ndarray:
        idx = np.searchsorted(self.switch_times, np.asarray(times), side="right")
        return self.values[idx]

    def integral_over(self, a: float, b: float) -> float:
        edges = np.concatenate(([a], np.clip(self.switch_times, a, b), [b]))
        return float(np.sum(self.values * np.diff(edges)))


class FeedbackLaw:
    """u(t, x) on a rectangular grid with nearest-node lookup."""

    needs_state = True

    def __init__(self, t_grid, x_grid, table, u_range=(0.0, 1.0)):
        self.t_grid = np.asarray(t_grid, dtype=float)
        self.x_grid = np.asarray(x_grid, dtype=float)
        self.table = np.asarray(_clip_range(table, u_range), dtype=float)
        if self.table.shape != (len(self.t_grid), len(self.x_grid)):
            raise ValueError("table shape must be (len(t_grid), len(x_grid))")
        self.u_range = tuple(u_range)
        self.law_id = f"feedback:{len(self.t_grid)}x{len(self.x_grid)}"

    def at(self, t, x=None) -> float:
        xv = 0.0 if x is None else float(np.atleast_1d(x)[0])
        i = int(np.argmin(np.abs(self.t_grid - t)))
        j = int(np.argmin(np.abs(self.x_grid - xv)))
        return float(self.table[i, j])

    def at_states(self, t, x_paths) -> np.ndarray:
        i = int(np.argmin(np.abs(self.t_grid - t)))
        j = np.argmin(np.abs(self.x_grid[None, :] - np.asarray(x_paths)[:, :1]), axis=1)
        return self.table[i, j]


class ExtendedControlLaw:
    """nu: y -> U as a lookup table with nearest-node extension."""

    def __init__(self, y_grid, values, u_range=(0.0, 1.0), law_id=None):
        self.y_grid = np.asarray(y_grid, dtype=float)
        self.values = np.asarray(_clip_range(values, u_range), dtype=float)
        if self.y_grid.ndim != 1 or self.values.shape != self.y_grid.shape:
            raise ValueError("y_grid and values must be matching 1-D arrays")
        steps = np.diff(self.y_grid)
        if np.any(steps <= 0):
            raise ValueError("y_grid must be strictly increasing")
        self._uniform = bool(np.allclose(steps, steps[0], rtol=1e-9))
        self.u_range = tuple(u_range)
        self.law_id = law_id or f"table:{len(self.y_grid)}"

    @classmethod
    def from_constant(cls, u: float, y_grid, u_range=(0.0, 1.0)) -> "ExtendedControlLaw":
        return cls(y_grid, np.full(len(y_grid), float(u)), u_range, law_id=f"table-const:{u:g}")

    @classmethod
    def on_support(cls, gibbs: GibbsRepresentation, fn: Callable[[np.ndarray], np.ndarray], u_range=(0.0, 1.0), n_nodes: int = 257, law_id=None) -> "ExtendedControlLaw":
        """Table on the representation's support box (shared y-grid)."""
        lo, hi = gibbs.support_box[0]
        grid = np.linspace(lo, hi, n_nodes)
        return cls(grid, fn(grid), u_range, law_id=law_id)

    def values_on(self, y, t=None, x=None) -> np.ndarray:
        y = np.asarray(y, dtype=float)
        if self._uniform:
            dy = self.y_grid[1] - self.y_grid[0]
            idx = np.clip(np.rint((y - self.y_grid[0]) / dy).astype(int), 0, len(self.y_grid) - 1)
        else:
            idx = np.clip(np.searchsorted(self.y_grid, y), 1, len(self.y_grid) - 1)
            left = self.y_grid[idx - 1]
            right = self.y_grid[idx]
            idx = np.where(np.abs(y - left) <= np.abs(right - y), idx - 1, idx)
        return self.values[idx]

    def static_table_1d(self):
        if not self._uniform:
            raise MethodError("compiled path needs a uniform table grid")
        return float(self.y_grid[0]), float(self.y_grid[1] - self.y_grid[0]), self.values

    def bind(self, t=None, x=None):
        return self


class AdaptiveDescentLaw:
    """Feedback nu_t(y) = hi where (x - y)*x > 0 else lo.

    This is the pointwise minimizer of the model Hamiltonian along a
    descent trajectory; applied to the perturbed pair it reads the fast
    state, u_t = nu(Y_t), which is an admissible control.
    """

    def __init__(self, lo: float = 0.0, hi: float = 1.0, u_range=(0.0, 1.0)):
        _clip_range([lo, hi], u_range)
        self.lo = float(lo)
        self.hi = float(hi)
        self.u_range = tuple(u_range)
        self.law_id = f"descent:{self.lo:g}->{self.hi:g}"

    def descent_params(self):
        return self.lo, self.hi

    def values_on(self, y, t=None, x=None) -> np.ndarray:
        if x is None:
            raise ValueError("descent law needs the current slow state")
        y = np.asarray(y, dtype=float)
        xv = np.asarray(x, dtype=float)
        return np.where((xv - y) * xv > 0.0, self.hi, self.lo)

    def bind(self, t=None, x=None):
        if x is None:
            raise ValueError("descent law needs the current slow state to bind")
        return _BoundDescent(self, float(np.atleast_1d(np.asarray(x, dtype=float))[0]))


class _BoundDescent:
    """An AdaptiveDescentLaw frozen at one slow state (a plain y-table)."""

    def __init__(self, law: AdaptiveDescentLaw, x: float):
        self._law = law
        self._x = x
        self.law_id = law.law_id

    def values_on(self, y, t=None, x=None) -> np.ndarray:
        return self._law.values_on(y, x=self._x)


def constant_family(u_values: Sequence[float], u_range=(0.0, 1.0)) -> list:
    return [ConstantLaw(u, u_range) for u in u_values]


def bang_bang_family(
    n_switches: int,
    T: float,
    u_pair=(0.0, 1.0),
    u_range=(0.0, 1.0),
    include_constants: bool = True,
) -> list:
    """Single-switch schedules over a uniform switch-time grid (both orders)."""
    lo, hi = u_pair
    laws: list = []
    if include_constants:
        laws += [ConstantLaw(lo, u_range), ConstantLaw(hi, u_range)]
    for s in np.linspace(0.0, T, n_switches + 2)[1:-1]:
        laws.append(PiecewiseConstantLaw([s], [hi, lo], u_range))
        laws.append(PiecewiseConstantLaw([s], [lo, hi], u_range))
    return laws


def threshold_family(y_grid, thresholds: Sequence[float], lo=0.0, hi=1.0, u_range=(0.0, 1.0)) -> list:
    """Static y-threshold tables, both orientations per threshold."""
    laws = []
    for c in thresholds:
        laws.append(ExtendedControlLaw(y_grid, np.where(y_grid <= c, hi, lo), u_range, law_id=f"thr-le:{c:g}"))
        laws.append(ExtendedControlLaw(y_grid, np.where(y_grid >= c, hi, lo), u_range, law_id=f"thr-ge:{c:g}"))
    return laws


@dataclass(frozen=True)
class PayoffSpec:
    """Discounted terminal-plus-running payoff on [t0, T].

    terminal: g(x, y) with x (P, n) and y (P, m) or None; running:
    l(s, x, y, u) -> (P,). orientation selects sup or inf when a family
    of laws is compared.
    """

    T: float
    terminal: Callable | None = None
    running: Callable | None = None
    lam: float = 0.0
    t0: float = 0.0
    orientation: str = "max"

    def __post_init__(self):
        if self.lam < 0.0:
            raise ValueError("discount lambda must be non-negative")
        if self.T <= self.t0:
            raise ValueError("need T > t0")
        if self.orientation not in ("max", "min"):
            raise ValueError("orientation must be 'max' or 'min'")

    def better(self, a: float, b: float) -> bool:
        return a > b if self.orientation == "max" else a < b


def fit_growth_constant(spec: PayoffSpec, dim: int, radius: float = 5.0, samples: int = 300, seed: int = 1) -> float:
    """Fitted K with |g|, |l| <= K(1 + |x|^2 + |y|) on sampled points."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(samples):
        x = rng.uniform(-radius, radius, size=(1, dim))
        y = rng.uniform(-radius, radius, size=(1, dim))
        s = rng.uniform(spec.t0, spec.T)
        u = rng.uniform(0.0, 1.0, size=1)
        bound = 1.0 + float(np.sum(x * x)) + float(np.linalg.norm(y))
        if spec.terminal is not None:
            worst = max(worst, abs(float(np.atleast_1d(spec.terminal(x, y))[0])) / bound)
        if spec.running is not None:
            worst = max(worst, abs(float(np.atleast_1d(spec.running(s, x, y, u))[0])) / bound)
    return worst


@dataclass(frozen=True)
class ValueEstimate:
    mean: float
    std_err: float
    n_paths: int
    law_id: str

    def csv_row(self) -> str:
        return f"{self.law_id},{self.mean!r},{self.std_err!r},{self.n_paths}"


def payoff(bundle: TrajectoryBundle, spec: PayoffSpec) -> ValueEstimate:
    """Per-path discounted payoff: trapezoid-in-time running term + terminal."""
    times = bundle.times
    if abs(times[0] - spec.t0) > 1e-9 or abs(times[-1] - spec.T) > 1e-9:
        raise ValueError(
            f"bundle horizon [{times[0]}, {times[-1]}] does not match payoff [{spec.t0}, {spec.T}]"
        )
    n_paths, n_stored, _ = bundle.x_paths.shape
    total = np.zeros(n_paths)
    if spec.terminal is not None:
        y_term = None if bundle.y_paths is None else bundle.y_paths[:, -1, :]
        g = np.asarray(spec.terminal(bundle.x_paths[:, -1, :], y_term), dtype=float)
        total += math.exp(spec.lam * (spec.t0 - spec.T)) * g
    if spec.running is not None:
        if bundle.controls_applied is None:
            raise ValueError("running payoff needs recorded controls")
        vals = np.empty((n_paths, n_stored))
        for k in range(n_stored):
            kk = min(k, n_stored - 2)
            u = bundle.controls_applied[..., kk]
            u_vec = np.broadcast_to(np.atleast_1d(u), (n_paths,))
            y_k = None if bundle.y_paths is None else bundle.y_paths[:, k, :]
            vals[:, k] = np.asarray(
                spec.running(float(times[k]), bundle.x_paths[:, k, :], y_k, u_vec), dtype=float
            ) * math.exp(spec.lam * (spec.t0 - times[k]))
        total += np.trapezoid(vals, times, axis=1)
    mean = float(total.mean())
    std_err = float(total.std(ddof=1) / math.sqrt(n_paths)) if n_paths > 1 else 0.0
    return ValueEstimate(mean=mean, std_err=std_err, n_paths=n_paths, law_id=bundle.meta.get("law_id", ""))


def _nu_values_on_nodes(nu, nodes: np.ndarray) -> np.ndarray:
    """Control values on quadrature nodes for a constant or table payload."""
    n = nodes.shape[0]
    if nu is None:
        raise ValueError("this evaluator was built without a bound law; pass nu")
    if isinstance(nu, (int, float)):
        return np.full(n, float(nu))
    if hasattr(nu, "values_on"):
        if nodes.shape[1] != 1 and not isinstance(nu, ConstantLaw):
            raise ValueError("table controls support one fast dimension")
        return np.asarray(nu.values_on(nodes[:, 0]), dtype=float)
    raise TypeError(f"cannot interpret control payload {nu!r}")


class EffectiveDrift:
    """x -> integral of f(x, y, nu(y)) d mu_x(y); linear in nu for fixed x."""

    def __init__(self, pot: CoupledPotential, gibbs_factory: GibbsFactory, f: Callable | None = None, law_value=None):
        self.pot = pot
        self.factory = gibbs_factory
        self.f = f or self._model_drift
        self.law_value = law_value

    def _model_drift(self, x, nodes, u):
        return -(u[:, None] * (x[None, :] - nodes)) / self.pot.gamma

    def __call__(self, x, nu=None) -> np.ndarray:
        x = np.atleast_1d(np.asarray(x, dtype=float))
        gibbs = self.factory(x)
        u = _nu_values_on_nodes(nu if nu is not None else self.law_value, gibbs.nodes)
        vals = np.asarray(self.f(x, gibbs.nodes, u), dtype=float)
        return gibbs.expectation(vals)


class EffectiveDiffusion:
    """x -> PSD square root of integral of sigma sigma^T d mu_x."""

    def __init__(self, pot: CoupledPotential, gibbs_factory: GibbsFactory, sigma: Callable | None, law_value=None, eig_floor: float = -1e-8):
        self.pot = pot
        self.factory = gibbs_factory
        self.sigma = sigma
        self.law_value = law_value
        self.eig_floor = eig_floor

    def __call__(self, x, nu=None):
        x = np.atleast_1d(np.asarray(x, dtype=float))
        if self.sigma is None:
            return 0.0 if x.size == 1 else np.zeros((x.size, x.size))
        gibbs = self.factory(x)
        u = _nu_values_on_nodes(nu if nu is not None else self.law_value, gibbs.nodes)
        vals = np.asarray(self.sigma(x, gibbs.nodes, u), dtype=float)
        if vals.ndim == 1:  # scalar sigma in one slow dimension
            avg = float(gibbs.expectation(vals * vals))
            if avg < self.eig_floor:
                raise ValueError(f"averaged covariance {avg} below tolerance")
            return math.sqrt(max(avg, 0.0))
        cov = gibbs.expectation(np.einsum("nir,njr->nij", vals, vals))
        eigvals, eigvecs = np.linalg.eigh(cov)
        if np.any(eigvals < self.eig_floor):
            raise ValueError(f"averaged covariance has eigenvalue {eigvals.min()} < {self.eig_floor}")
        eigvals = np.clip(eigvals, 0.0, None)
        return (eigvecs * np.sqrt(eigvals)) @ eigvecs.T


def effective_drift(pot, gibbs_factory, f=None, law_value=None) -> EffectiveDrift:
    return EffectiveDrift(pot, gibbs_factory, f, law_value)


def effective_diffusion(pot, gibbs_factory, sigma=None, law_value=None) -> EffectiveDiffusion:
    return EffectiveDiffusion(pot, gibbs_factory, sigma, law_value)


def effective_payoff(pot, gibbs_factory, spec: PayoffSpec, law_value=None):
    """Averaged terminal and running payoffs (gbar, lbar)."""

    def gbar(x) -> float:
        x = np.atleast_1d(np.asarray(x, dtype=float))
        if spec.terminal is None:
            return 0.0
        gibbs = gibbs_factory(x)
        vals = np.asarray(
            spec.terminal(np.broadcast_to(x, (gibbs.nodes.shape[0], x.size)), gibbs.nodes),
            dtype=float,
        )
        return float(gibbs.expectation(vals))

    def lbar(s, x, nu=None) -> float:
        x = np.atleast_1d(np.asarray(x, dtype=float))
        if spec.running is None:
            return 0.0
        gibbs = gibbs_factory(x)
        u = _nu_values_on_nodes(nu if nu is not None else law_value, gibbs.nodes)
        vals = np.asarray(
            spec.running(s, np.broadcast_to(x, (gibbs.nodes.shape[0], x.size)), gibbs.nodes, u),
            dtype=float,
        )
        return float(gibbs.expectation(vals))

    return gbar, lbar


def evaluate_family_perturbed(
    spec: TwoScaleSpec,
    payoff_spec: PayoffSpec,
    x0,
    y0,
    law_family: Sequence,
    n_paths: int,
    store: BrownianStore,
    stored_points: int = 2000,
) -> list[ValueEstimate]:
    """Payoff of every law on the perturbed pair with common random numbers."""
    if not law_family:
        raise ValueError("law family must be non-empty")
    out = []
    for law in law_family:
        bundle = integrate_two_scale(
            spec, law, x0, y0, payoff_spec.T - payoff_spec.t0, n_paths, store,
            stored_points=stored_points,
        )
        out.append(payoff(bundle, payoff_spec))
    return out


def _pick_best(estimates: list[ValueEstimate], payoff_spec: PayoffSpec) -> ValueEstimate:
    best = estimates[0]
    for est in estimates[1:]:
        if payoff_spec.better(est.mean, best.mean):
            best = est
    return best


def estimate_value_perturbed(
    spec: TwoScaleSpec,
    payoff_spec: PayoffSpec,
    x0,
    y0,
    law_family: Sequence,
    n_paths: int,
    store: BrownianStore,
    stored_points: int = 2000,
) -> ValueEstimate:
    """Best (per orientation) payoff over the family; see evaluate_family_perturbed."""
    estimates = evaluate_family_perturbed(
        spec, payoff_spec, x0, y0, law_family, n_paths, store, stored_points
    )
    return _pick_best(estimates, payoff_spec)


def _deterministic_effective_value(fbar, gbar, lbar, law, x0, payoff_spec: PayoffSpec, n_steps: int) -> ValueEstimate:
    bundle = integrate_effective_ode(fbar.pot, fbar, law, x0, payoff_spec.T - payoff_spec.t0, n_steps=n_steps)
    total = 0.0
    if gbar is not None:
        total += math.exp(payoff_spec.lam * (payoff_spec.t0 - payoff_spec.T)) * gbar(bundle.x_paths[0, -1, :])
    if lbar is not None and payoff_spec.running is not None:
        times = bundle.times
        vals = np.empty(len(times))
        for k, t in enumerate(times):
            xk = bundle.x_paths[0, k, :]
            nu = law.bind(t=t, x=xk) if hasattr(law, "values_on") else float(law.at(t, x=xk)) if getattr(law, "needs_state", False) else float(law.at(t))
            vals[k] = lbar(float(t), xk, nu) * math.exp(payoff_spec.lam * (payoff_spec.t0 - t))
        total += float(np.trapezoid(vals, times))
    return ValueEstimate(mean=float(total), std_err=0.0, n_paths=1, law_id=law.law_id)


def evaluate_family_effective(
    fbar: EffectiveDrift,
    sigbar,
    gbar,
    lbar,
    x0,
    law_family: Sequence,
    payoff_spec: PayoffSpec,
    n_paths: int = 1,
    store: BrownianStore | None = None,
    n_steps: int = 2000,
) -> list[ValueEstimate]:
    """Effective-problem value of every law; deterministic when sigbar is falsy."""
    if not law_family:
        raise ValueError("law family must be non-empty")
    deterministic = sigbar is None or (isinstance(sigbar, (int, float)) and sigbar == 0.0) or (
        isinstance(sigbar, EffectiveDiffusion) and sigbar.sigma is None
    )
    if not deterministic and payoff_spec.running is not None:
        raise NotImplementedError("running payoff with stochastic effective dynamics")
    out = []
    for law in law_family:
        if deterministic:
            out.append(_deterministic_effective_value(fbar, gbar, lbar, law, x0, payoff_spec, n_steps))
        else:
            if store is None:
                raise ValueError("stochastic effective estimation needs a BrownianStore")
            bundle = integrate_effective_sde(
                fbar, sigbar, law, x0, payoff_spec.T - payoff_spec.t0, n_paths, store, n_steps=n_steps
            )
            terminal = (lambda x, y: np.asarray([gbar(x[p]) for p in range(x.shape[0])])) if gbar else None
            spec_eff = PayoffSpec(
                T=payoff_spec.T, terminal=terminal, running=None, lam=payoff_spec.lam,
                t0=payoff_spec.t0, orientation=payoff_spec.orientation,
            )
            est = payoff(bundle, spec_eff)
            out.append(ValueEstimate(est.mean, est.std_err, est.n_paths, law.law_id))
    return out


def estimate_value_effective(
    fbar: EffectiveDrift,
    sigbar,
    gbar,
    lbar,
    x0,
    law_family: Sequence,
    payoff_spec: PayoffSpec,
    n_paths: int = 1,
    store: BrownianStore | None = None,
    n_steps: int = 2000,
) -> ValueEstimate:
    """Best (per orientation) effective value; see evaluate_family_effective."""
    estimates = evaluate_family_effective(
        fbar, sigbar, gbar, lbar, x0, law_family, payoff_spec, n_paths, store, n_steps
    )
    return _pick_best(estimates, payoff_spec)


def golden_section_refine(build_law, lo: float, hi: float, evaluate, orientation: str = "min", iters: int = 20):
    """Refine a 1-parameter law family by golden-section search.

    build_law(s) -> law; evaluate(law) -> float. Returns (law, parameter,
    value) at the best point found.
    """
    inv_phi = (math.sqrt(5.0) - 1.0) / 2.0
    sign = 1.0 if orientation == "min" else -1.0
    a, b = float(lo), float(hi)
    c = b - inv_phi * (b - a)
    d = a + inv_phi * (b - a)
    fc = sign * evaluate(build_law(c))
    fd = sign * evaluate(build_law(d))
    for _ in range(iters):
        if fc < fd:
            b, d, fd = d, c, fc
            c = b - inv_phi * (b - a)
            fc = sign * evaluate(build_law(c))
        else:
            a, c, fc = c, d, fd
            d = a + inv_phi * (b - a)
            fd = sign * evaluate(build_law(d))
    s = c if fc < fd else d
    law = build_law(s)
    return law, s, evaluate(law)
