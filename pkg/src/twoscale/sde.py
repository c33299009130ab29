"""Time integrators on a reproducible Brownian-path store.

Euler-Maruyama for the perturbed slow/fast pair, deterministic RK4 (or
Euler) stepping for the averaged ODE, and Euler-Maruyama for the averaged
SDE. All stochastic draws come from counter-keyed Philox streams, so a
(seed, law, spec) triple reproduces trajectories bit for bit and common
random numbers across control laws are free.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import DivergedError, UnstableStepError
from .problems import CoupledPotential

NOISE_CHUNK = 512
DEFAULT_STORED_POINTS = 2000
EFFECTIVE_ODE_STEPS = 2000


def _mix64(seed: int) -> np.uint64:
    mask = 0xFFFFFFFFFFFFFFFF
    z = (int(seed) + 0x9E3779B97F4A7C15) & mask
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & mask
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & mask
    return np.uint64(z ^ (z >> 31))


class BrownianStore:
    """Lazily generated Gaussian increments keyed by (seed, stream, step).

    Increments for step k come from a Philox generator keyed by
    (seed, stream, k // chunk) in (step, path, component) layout; for a
    fixed path count the draw at (path, k) is a pure function of
    (seed, stream, path, k), which is what reproducibility and common
    random numbers across law families require. The last chunks are
    memoized so sequential integrators do not regenerate them.
    """

    def __init__(self, seed: int, dim: int, grid_dt: float):
        if dim < 1:
            raise ValueError("dim must be >= 1")
        if grid_dt <= 0.0:
            raise ValueError("grid_dt must be positive")
        self.seed = int(seed)
        self.dim = int(dim)
        self.grid_dt = float(grid_dt)
        self._key0 = _mix64(self.seed)
        self._memo: dict[tuple, np.ndarray] = {}

    def with_dt(self, grid_dt: float) -> "BrownianStore":
        return BrownianStore(self.seed, self.dim, grid_dt)

    def _chunk(self, stream: int, chunk_idx: int, n_paths: int) -> np.ndarray:
        memo_key = (stream, chunk_idx, n_paths)
        hit = self._memo.get(memo_key)
        if hit is not None:
            return hit
        key = np.array(
            [self._key0, (np.uint64(stream) << np.uint64(48)) | np.uint64(chunk_idx)],
            dtype=np.uint64,
        )
        gen = np.random.Generator(np.random.Philox(key=key))
        raw = gen.standard_normal((NOISE_CHUNK, n_paths, self.dim))
        if len(self._memo) > 4:
            self._memo.pop(next(iter(self._memo)))
        self._memo[memo_key] = raw
        return raw

    def increments(self, k0: int, n_steps: int, n_paths: int, stream: int = 0) -> np.ndarray:
        """Increments for steps [k0, k0 + n_steps), scaled to variance grid_dt."""
        if k0 < 0 or n_steps < 0:
            raise ValueError("k0 and n_steps must be non-negative")
        out = np.empty((n_steps, n_paths, self.dim))
        filled = 0
        k = k0
        while filled < n_steps:
            chunk_idx, offset = divmod(k, NOISE_CHUNK)
            take = min(NOISE_CHUNK - offset, n_steps - filled)
            out[filled : filled + take] = self._chunk(stream, chunk_idx, n_paths)[
                offset : offset + take
            ]
            filled += take
            k += take
        out *= math.sqrt(self.grid_dt)
        return out


@dataclass(frozen=True)
class SigmaSpec:
    """Slow-diffusion specification: zero, constant c*I, or vanishing sqrt(eps)*c*I."""

    kind: str = "zero"
    value: float = 0.0

    def __post_init__(self):
        if self.kind not in ("zero", "constant", "vanishing"):
            raise ValueError(f"unknown sigma kind {self.kind!r}")

    def at_epsilon(self, epsilon: float) -> float:
        if self.kind == "zero":
            return 0.0
        if self.kind == "constant":
            return self.value
        return math.sqrt(epsilon) * self.value

    @classmethod
    def coerce(cls, spec) -> "SigmaSpec":
        if isinstance(spec, cls):
            return spec
        if spec is None or (isinstance(spec, str) and spec == "zero") or spec == 0:
            return cls("zero", 0.0)
        if isinstance(spec, (int, float)):
            return cls("constant", float(spec))
        if isinstance(spec, (tuple, list)) and len(spec) == 2 and spec[0] == "vanishing":
            return cls("vanishing", float(spec[1]))
        raise ValueError(f"cannot interpret sigma spec {spec!r}")


@dataclass(frozen=True)
class TwoScaleSpec:
    """Parameters of the perturbed pair: potential, scale separation, noise.

    The fast diffusion coefficient is sqrt(2/(epsilon*beta)) exactly; the
    slow drift defaults to the model -u*(x - y)/gamma and can be replaced
    by a callable f(x, y, u) -> (P, n) for generality (python path).
    """

    pot: CoupledPotential
    epsilon: float
    sigma: SigmaSpec = field(default_factory=SigmaSpec)
    shared_noise: bool = True
    slow_drift: Callable | None = None

    def __post_init__(self):
        if self.epsilon <= 0.0:
            raise ValueError("epsilon must be positive")
        object.__setattr__(self, "sigma", SigmaSpec.coerce(self.sigma))

    @property
    def fast_noise_coef(self) -> float:
        return math.sqrt(2.0 / (self.epsilon * self.pot.beta))

    def stable_step_bound(self) -> float:
        """Largest admissible Euler step: 0.1*eps/(1 + beta*(L + 1/gamma))."""
        pot = self.pot
        stiffness = pot.problem.lipschitz_grad + 1.0 / pot.gamma
        return 0.1 * self.epsilon / (1.0 + pot.beta * stiffness)


def resolve_step(spec: TwoScaleSpec, T: float, h: float | None, stored_points: int):
    """Choose (h, n_steps, stride) with h dividing T and a uniform stored grid."""
    bound = spec.stable_step_bound()
    if h is not None:
        if h > bound * (1.0 + 1e-12):
            raise UnstableStepError(
                f"h={h:g} exceeds the stability bound {bound:g} for epsilon={spec.epsilon:g}"
            )
        h_max = h
    else:
        h_max = min(bound, 1e-3 * T)
    n_steps = max(1, math.ceil(T / h_max - 1e-9))
    stored = max(1, min(stored_points, n_steps))
    n_steps = stored * math.ceil(n_steps / stored)  # uniform storage grid
    return T / n_steps, n_steps, n_steps // stored


@dataclass(frozen=True)
class TrajectoryBundle:
    """Simulated paths on a uniform stored time grid.

    x_paths: (n_paths, S, n); y_paths: (n_paths, S, m) or None for averaged
    dynamics; controls_applied: (S-1,) when path-uniform else (n_paths, S-1),
    holding the control entering each stored interval.
    """

    times: np.ndarray
    x_paths: np.ndarray
    y_paths: np.ndarray | None
    controls_applied: np.ndarray | None
    meta: dict

    def __post_init__(self):
        if not np.all(np.isfinite(self.x_paths)):
            raise DivergedError("bundle contains non-finite slow states")
        if self.y_paths is not None and not np.all(np.isfinite(self.y_paths)):
            raise DivergedError("bundle contains non-finite fast states")
        dt = np.diff(self.times)
        if np.any(dt <= 0) or (len(dt) > 1 and not np.allclose(dt, dt[0], rtol=1e-9)):
            raise ValueError("times must increase with a constant step")
        for arr in (self.times, self.x_paths, self.y_paths, self.controls_applied):
            if arr is not None:
                arr.flags.writeable = False

    @property
    def n_paths(self) -> int:
        return self.x_paths.shape[0]

    def terminal_x(self) -> np.ndarray:
        return self.x_paths[:, -1, :]

    def to_csv(self, path, float_fmt=repr):
        """Write (path, t, x..., y..., u) rows; schema comment first."""
        n, s, dim_x = self.x_paths.shape
        dim_y = 0 if self.y_paths is None else self.y_paths.shape[2]
        cols = (
            ["path", "t"]
            + [f"x{d}" for d in range(dim_x)]
            + [f"y{d}" for d in range(dim_y)]
            + ["u"]
        )
        lines = ["# schema_version=1", ",".join(cols)]
        for p in range(n):
            for k in range(s):
                row = [str(p), float_fmt(float(self.times[k]))]
                row += [float_fmt(float(v)) for v in self.x_paths[p, k]]
                if self.y_paths is not None:
                    row += [float_fmt(float(v)) for v in self.y_paths[p, k]]
                if self.controls_applied is None:
                    row.append("")
                else:
                    kk = min(k, s - 2)
                    u = (
                        self.controls_applied[kk]
                        if self.controls_applied.ndim == 1
                        else self.controls_applied[p, kk]
                    )
                    row.append(float_fmt(float(u)))
                lines.append(",".join(row))
        with open(path, "w", newline="\n") as fh:
            fh.write("\n".join(lines) + "\n")


def _law_kernel_mode(law, dim_x: int, dim_y: int):
    """Map a control law onto a compiled-kernel mode, or None for the python path."""
    from . import _kernels

    if hasattr(law, "step_values"):
        return (_kernels.U_MODE_SCALAR, None)
    if dim_x == 1 and dim_y == 1:
        if hasattr(law, "static_table_1d"):
            return (_kernels.U_MODE_TABLE, law.static_table_1d())
        if hasattr(law, "descent_params"):
            return (_kernels.U_MODE_DESCENT, law.descent_params())
    return None


def integrate_two_scale(
    spec: TwoScaleSpec,
    law,
    x0,
    y0,
    T: float,
    n_paths: int,
    store: BrownianStore,
    h: float | None = None,
    freeze_slow: bool = False,
    stored_points: int = DEFAULT_STORED_POINTS,
) -> TrajectoryBundle:
    """Euler-Maruyama for the perturbed pair under a control law.

    The step comes from the stability recipe (a user-supplied h above the
    bound is refused, never silently subsampled); states are stored on a
    uniform sub-grid of the integration grid.
    """
    pot = spec.pot
    dim = pot.problem.dim
    x0 = np.broadcast_to(np.atleast_1d(np.asarray(x0, dtype=float)), (dim,))
    y0 = np.broadcast_to(np.atleast_1d(np.asarray(y0, dtype=float)), (dim,))
    h_step, n_steps, stride = resolve_step(spec, T, h, stored_points)
    if abs(store.grid_dt - h_step) > 1e-15 * max(1.0, h_step):
        store = store.with_dt(h_step)

    x = np.tile(x0, (n_paths, 1))
    y = np.tile(y0, (n_paths, 1))
    n_stored = n_steps // stride + 1
    xs = np.empty((n_paths, n_stored, dim))
    ys = np.empty((n_paths, n_stored, dim))
    xs[:, 0], ys[:, 0] = x, y

    sig = spec.sigma.at_epsilon(spec.epsilon)
    use_xnoise = sig != 0.0 and not freeze_slow
    times = np.linspace(0.0, T, n_stored)

    mode_info = None if spec.slow_drift is not None else _law_kernel_mode(law, dim, dim)
    if mode_info is not None:
        controls = _run_kernel_path(
            spec, law, mode_info, x, y, xs, ys, n_steps, stride, h_step,
            sig, use_xnoise, store, freeze_slow,
        )
    else:
        controls = _run_python_path(
            spec, law, x, y, xs, ys, n_steps, stride, h_step, sig, use_xnoise,
            store, freeze_slow,
        )

    meta = {
        "seed": store.seed,
        "h": h_step,
        "n_steps": n_steps,
        "epsilon": spec.epsilon,
        "sigma": (spec.sigma.kind, spec.sigma.value),
        "shared_noise": spec.shared_noise,
        "law_id": getattr(law, "law_id", str(law)),
        "freeze_slow": freeze_slow,
    }
    return TrajectoryBundle(times=times, x_paths=xs, y_paths=ys, controls_applied=controls, meta=meta)


def _run_kernel_path(
    spec, law, mode_info, x, y, xs, ys, n_steps, stride, h_step, sig, use_xnoise,
    store, freeze_slow,
):
    from . import _kernels

    pot = spec.pot
    n_paths = x.shape[0]
    mode, payload = mode_info
    tab_y0, tab_dy = 0.0, 1.0
    tab_vals = np.zeros(1)
    u_lo = u_hi = 0.0
    u_steps_all = np.zeros(1)
    if mode == _kernels.U_MODE_SCALAR:
        u_steps_all = np.asarray(law.step_values(np.arange(n_steps) * h_step), dtype=float)
    elif mode == _kernels.U_MODE_TABLE:
        tab_y0, tab_dy, tab_vals = payload
        tab_vals = np.ascontiguousarray(tab_vals, dtype=float)
    else:
        u_lo, u_hi = payload

    uniform_u = mode == _kernels.U_MODE_SCALAR
    n_stored = xs.shape[1]
    controls = np.empty(n_stored - 1) if uniform_u else np.empty((n_paths, n_stored - 1))
    u_first = np.empty(n_paths)
    dummy = np.zeros((1, 1, 1))

    k = 0
    for blk in range(n_stored - 1):
        left = stride
        first_sub = True
        while left > 0:
            take = min(NOISE_CHUNK - (k % NOISE_CHUNK), left)
            dwy = store.increments(k, take, n_paths, stream=0)
            if use_xnoise:
                dwx = dwy if spec.shared_noise else store.increments(k, take, n_paths, stream=1)
            else:
                dwx = dummy
            u_chunk = u_steps_all[k : k + take] if uniform_u else u_steps_all
            _kernels.two_scale_block(
                x, y, pot.problem.family_code, pot.gamma, spec.epsilon, pot.beta,
                h_step, mode, u_chunk, tab_y0, tab_dy, tab_vals, u_lo, u_hi,
                sig, use_xnoise, dwx, dwy, freeze_slow, u_first,
            )
            if first_sub:
                if uniform_u:
                    controls[blk] = u_steps_all[k]
                else:
                    controls[:, blk] = u_first
                first_sub = False
            k += take
            left -= take
        if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
            finite = np.isfinite(x).all(axis=1) & np.isfinite(y).all(axis=1)
            bad = int(np.argmin(finite))
            raise DivergedError(
                f"two-scale state diverged near step {k}, path {bad}", step=k, path=bad
            )
        xs[:, blk + 1], ys[:, blk + 1] = x, y
    return controls


def _run_python_path(
    spec, law, x, y, xs, ys, n_steps, stride, h_step, sig, use_xnoise, store, freeze_slow,
):
    pot = spec.pot
    n_paths = x.shape[0]
    n_stored = xs.shape[1]
    controls = np.empty((n_paths, n_stored - 1))
    drift = spec.slow_drift or (lambda xx, yy, uu: -(uu[:, None] * (xx - yy)) / pot.gamma)
    sqrt2 = math.sqrt(2.0)
    k = 0
    for blk in range(n_stored - 1):
        for sub in range(stride):
            t = k * h_step
            u = _law_values_for_paths(law, t, x, y)
            if sub == 0:
                controls[:, blk] = u
            dwy = store.increments(k, 1, n_paths, stream=0)[0]
            if not freeze_slow:
                x_new = x + drift(x, y, u) * h_step
                if use_xnoise:
                    dwx = dwy if spec.shared_noise else store.increments(k, 1, n_paths, stream=1)[0]
                    x_new = x_new + sqrt2 * sig * dwx
            else:
                x_new = x
            y = y + (pot.drift_b(x, y) / spec.epsilon) * h_step + spec.fast_noise_coef * dwy
            x = x_new
            k += 1
        if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
            raise DivergedError(f"two-scale state diverged near step {k}", step=k)
        xs[:, blk + 1], ys[:, blk + 1] = x, y
    return controls


def _law_values_for_paths(law, t, x, y):
    """Evaluate a law for every path at time t (python integration path)."""
    n_paths = x.shape[0]
    if hasattr(law, "values_on"):
        return np.asarray(law.values_on(y[:, 0], t=t, x=x[:, 0]), dtype=float)
    if hasattr(law, "at_states"):
        return np.asarray(law.at_states(t, x), dtype=float)
    return np.full(n_paths, float(law.at(t)))


def integrate_effective_ode(
    pot: CoupledPotential,
    fbar,
    law,
    x0,
    T: float,
    n_steps: int = EFFECTIVE_ODE_STEPS,
    method: str = "rk4",
) -> TrajectoryBundle:
    """Deterministic trajectory of dx/dt = fbar(x, nu_t) (RK4 or Euler)."""
    dim = pot.problem.dim
    x = np.array(np.broadcast_to(np.atleast_1d(np.asarray(x0, dtype=float)), (dim,)))
    h = T / n_steps
    xs = np.empty((1, n_steps + 1, dim))
    xs[0, 0] = x
    controls = np.empty(n_steps)

    def rhs(t, state):
        return np.asarray(fbar(state, _law_nu(law, t, state)), dtype=float)

    for k in range(n_steps):
        t = k * h
        controls[k] = _control_scalar(law, t, x)
        if method == "rk4":
            k1 = rhs(t, x)
            k2 = rhs(t + 0.5 * h, x + 0.5 * h * k1)
            k3 = rhs(t + 0.5 * h, x + 0.5 * h * k2)
            k4 = rhs(t + h, x + h * k3)
            x = x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        elif method == "euler":
            x = x + h * rhs(t, x)
        else:
            raise ValueError(f"unknown method {method!r}")
        if not np.all(np.isfinite(x)):
            raise DivergedError(f"effective ODE diverged at step {k}", step=k)
        xs[0, k + 1] = x

    times = np.linspace(0.0, T, n_steps + 1)
    meta = {"h": h, "method": method, "law_id": getattr(law, "law_id", str(law))}
    return TrajectoryBundle(times=times, x_paths=xs, y_paths=None, controls_applied=controls, meta=meta)


def _law_nu(law, t, x):
    """The per-time control payload handed to the averaged evaluators."""
    if hasattr(law, "values_on"):
        return law.bind(t=t, x=x) if hasattr(law, "bind") else law
    return float(law.at(t, x=x)) if getattr(law, "needs_state", False) else float(law.at(t))


def _control_scalar(law, t, x):
    if hasattr(law, "values_on"):
        return float("nan")  # y-dependent; no single scalar exists
    return float(law.at(t, x=x)) if getattr(law, "needs_state", False) else float(law.at(t))


def integrate_effective_sde(
    fbar,
    sigbar,
    law,
    x0,
    T: float,
    n_paths: int,
    store: BrownianStore,
    n_steps: int = EFFECTIVE_ODE_STEPS,
) -> TrajectoryBundle:
    """Euler-Maruyama for dX = fbar ds + sqrt(2)*sigbar dW (averaged SDE).

    ``sigbar(x, nu)`` must return the PSD square-root diffusion as a scalar
    (isotropic) or an (n, n) matrix.
    """
    x0 = np.atleast_1d(np.asarray(x0, dtype=float))
    dim = x0.shape[0]
    h = T / n_steps
    if abs(store.grid_dt - h) > 1e-15 * max(1.0, h):
        store = store.with_dt(h)
    x = np.tile(x0, (n_paths, 1))
    xs = np.empty((n_paths, n_steps + 1, dim))
    xs[:, 0] = x
    controls = np.empty(n_steps)
    sqrt2 = math.sqrt(2.0)
    for k in range(n_steps):
        t = k * h
        nu = _law_nu(law, t, x[0])
        controls[k] = _control_scalar(law, t, x[0])
        dw = store.increments(k, 1, n_paths, stream=0)[0][:, :dim]
        drift = np.stack([np.asarray(fbar(x[p], nu), dtype=float) for p in range(n_paths)])
        diff = np.stack([_as_matrix(sigbar(x[p], nu), dim) for p in range(n_paths)])
        x = x + drift * h + sqrt2 * np.einsum("pij,pj->pi", diff, dw)
        if not np.all(np.isfinite(x)):
            raise DivergedError(f"effective SDE diverged at step {k}", step=k)
        xs[:, k + 1] = x
    times = np.linspace(0.0, T, n_steps + 1)
    meta = {"h": h, "seed": store.seed, "law_id": getattr(law, "law_id", str(law))}
    return TrajectoryBundle(times=times, x_paths=xs, y_paths=None, controls_applied=controls, meta=meta)


def _as_matrix(value, dim: int) -> np.ndarray:
    value = np.asarray(value, dtype=float)
    if value.ndim == 0:
        return np.eye(dim) * float(value)
    if value.shape != (dim, dim):
        raise ValueError(f"sigbar must return a scalar or ({dim},{dim}) matrix")
    return value
