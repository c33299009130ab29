"""The fast variable's invariant (Gibbs) measure and derived quantities.

The measure mu_x has density proportional to exp(-beta*Phi(y, x)). It is
realized either by deterministic tensor-grid quadrature (fast dimension
<= 2, exact normalizer) or by unadjusted Langevin sampling of the frozen-x
fast process (any dimension, normalizer unknown). The smoothed loss, its
gradient and the absolute moments are integrals against this measure.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
import numpy as np

from .errors import DivergedError, MethodError
from .problems import CoupledPotential

QUAD_POINTS_1D = 257
SUPPORT_HALFWIDTH_FACTOR = 10.0
BOX_RECHECK_TOL = 1e-10
NOISE_CHUNK = 512


@dataclass(frozen=True)
class LangevinConfig:
    """Sampler settings for the frozen-x fast process.

    step/burn_in/stride default to the stiffness-based recipe:
    h = min(0.1/(beta*(L + 1/gamma)), 0.01), burn_in = ceil(10/(kappa*h)),
    and retained samples spaced ceil(0.5/(kappa*h)) steps apart across
    n_chains independent chains (spacing keeps retained samples close to
    independent so the reported block std_err is tight as well as honest).
    """

    n_samples: int = 100_000
    n_chains: int = 2000
    step: float | None = None
    burn_in: int | None = None
    stride: int | None = None
    seed: int = 0

    def resolve(self, pot: CoupledPotential) -> tuple[float, int, int]:
        L = pot.problem.lipschitz_grad
        stiffness = L + 1.0 / pot.gamma
        h = self.step if self.step is not None else min(0.1 / (pot.beta * stiffness), 0.01)
        if h <= 0.0:
            raise ValueError("Langevin step must be positive")
        burn = self.burn_in if self.burn_in is not None else math.ceil(10.0 / (pot.kappa * h))
        stride = self.stride if self.stride is not None else max(1, math.ceil(0.5 / (pot.kappa * h)))
        return h, int(burn), int(stride)


def _minimize_coupled(pot: CoupledPotential, x: np.ndarray, y0: np.ndarray | None = None) -> np.ndarray:
    """Minimizer of Phi(., x), unique because Phi'' >= kappa > 0.

    Coordinatewise Newton when the problem exposes a diagonal Hessian
    (all built-in families are separable), otherwise the contraction
    y <- x - gamma*grad phi(y) with factor gamma*L < 1.
    """
    prob = pot.problem
    gamma = pot.gamma
    y = np.array(x if y0 is None else y0, dtype=float)
    if prob.hess_diag is not None:
        inv_g = 1.0 / gamma
        for _ in range(80):
            grad = prob.grad(y) + (y - x) * inv_g
            curv = prob.hess_diag(y) + inv_g  # >= kappa > 0
            step = grad / curv
            y -= step
            if np.max(np.abs(step)) < 1e-13:
                return y
        return y
    for _ in range(800):
        y_next = x - gamma * prob.grad(y)
        if np.max(np.abs(y_next - y)) < 1e-13:
            return y_next
        y = y_next
    return y


@dataclass(frozen=True)
class GibbsRepresentation:
    """Realized mu_x: quadrature nodes/weights or retained Langevin samples.

    Quadrature: ``nodes`` (N, m), probability ``weights`` (N,), and
    ``log_normalizer`` = log integral of exp(-beta*Phi(., x)).
    Langevin: ``sample_store`` (n_chains, keep, m); weights are uniform and
    the normalizer is unknown (None).
    """

    pot: CoupledPotential
    x: np.ndarray
    method: str
    support_box: np.ndarray            # (m, 2) quadrature bounds (also for langevin box hints)
    log_normalizer: float | None = None
    nodes: np.ndarray | None = None
    weights: np.ndarray | None = None
    sample_store: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        for arr in (self.x, self.support_box, self.nodes, self.weights, self.sample_store):
            if arr is not None:
                arr.flags.writeable = False

    @property
    def dim(self) -> int:
        return self.pot.problem.dim

    def log_density(self, y: np.ndarray) -> np.ndarray:
        """log of the normalized density; requires a quadrature build."""
        if self.log_normalizer is None:
            raise MethodError("log_density needs the quadrature normalizer")
        return -self.pot.beta * self.pot.value(y, self.x) - self.log_normalizer

    def density(self, y: np.ndarray) -> np.ndarray:
        return np.exp(self.log_density(y))

    def flat_samples(self) -> np.ndarray:
        if self.sample_store is None:
            raise MethodError("no sample store on a quadrature build")
        chains, keep, m = self.sample_store.shape
        return self.sample_store.reshape(chains * keep, m)

    def expectation(self, values: np.ndarray) -> np.ndarray:
        """Integrate per-node/per-sample values (first axis) against mu_x."""
        values = np.asarray(values, dtype=float)
        if self.method == "quadrature":
            return np.tensordot(self.weights, values, axes=(0, 0))
        chains, keep, _ = self.sample_store.shape
        return values.reshape(chains * keep, *values.shape[1:]).mean(axis=0)

    def chain_block_means(self, values: np.ndarray) -> np.ndarray:
        """Per-chain means of per-sample values, for honest error bars."""
        if self.sample_store is None:
            raise MethodError("chain statistics need a langevin build")
        chains, keep, _ = self.sample_store.shape
        return values.reshape(chains, keep, *values.shape[1:]).mean(axis=1)


def _tensor_grid(center: np.ndarray, halfwidth: float, n_points: int):
    """(nodes, log trapezoid weights, box) for a tensor grid around center."""
    axes = [np.linspace(c - halfwidth, c + halfwidth, n_points) for c in center]
    m = len(axes)
    if m == 1:
        nodes = axes[0][:, None]
        log_w = np.full(n_points, math.log(axes[0][1] - axes[0][0]))
        log_w[0] -= math.log(2.0)
        log_w[-1] -= math.log(2.0)
    else:
        grids = np.meshgrid(*axes, indexing="ij")
        nodes = np.stack([g.ravel() for g in grids], axis=-1)
        log_w = np.zeros(nodes.shape[0])
        for axis_idx, ax in enumerate(axes):
            w1 = np.full(len(ax), math.log(ax[1] - ax[0]))
            w1[0] -= math.log(2.0)
            w1[-1] -= math.log(2.0)
            shape = [1] * m
            shape[axis_idx] = len(ax)
            log_w += np.broadcast_to(w1.reshape(shape), [len(a) for a in axes]).ravel()
    box = np.stack([[ax[0], ax[-1]] for ax in axes])
    return nodes, log_w, box


def _log_mass_on(pot, x, nodes, log_w):
    log_vals = -pot.beta * pot.value(nodes, x) + log_w
    peak = log_vals.max()
    return float(peak + math.log(np.exp(log_vals - peak).sum())), log_vals


def _build_quadrature(
    pot: CoupledPotential,
    x: np.ndarray,
    quad_points: int,
    halfwidth: float | None = None,
    center_hint: np.ndarray | None = None,
    validate_box: bool = True,
) -> GibbsRepresentation:
    m = pot.problem.dim
    if m > 2:
        raise ValueError(f"quadrature supports fast dimension <= 2, got {m}")
    center = _minimize_coupled(pot, x, y0=center_hint)
    if halfwidth is None:
        halfwidth = SUPPORT_HALFWIDTH_FACTOR * max(math.sqrt(pot.gamma / pot.beta), 1.0)

    nodes, log_w, box = _tensor_grid(center, halfwidth, quad_points)
    log_z, log_vals = _log_mass_on(pot, x, nodes, log_w)
    expansions = 0
    if validate_box:
        # Confining tails: doubling the box must leave log Z unchanged.
        while True:
            wide_nodes, wide_log_w, _ = _tensor_grid(center, 2.0 * halfwidth, 2 * quad_points - 1)
            log_z_wide, _ = _log_mass_on(pot, x, wide_nodes, wide_log_w)
            if abs(log_z_wide - log_z) < BOX_RECHECK_TOL:
                break
            halfwidth *= 2.0
            expansions += 1
            if expansions > 3:
                raise ValueError("support box failed to stabilize; potential not confining?")
            nodes, log_w, box = _tensor_grid(center, halfwidth, quad_points)
            log_z, log_vals = _log_mass_on(pot, x, nodes, log_w)

    weights = np.exp(log_vals - log_z)
    return GibbsRepresentation(
        pot=pot,
        x=np.array(x, dtype=float),
        method="quadrature",
        support_box=box,
        log_normalizer=log_z,
        nodes=nodes,
        weights=weights,
        meta={"quad_points": quad_points, "halfwidth": halfwidth, "expansions": expansions},
    )


def _build_langevin(pot: CoupledPotential, x: np.ndarray, config: LangevinConfig) -> GibbsRepresentation:
    m = pot.problem.dim
    h, burn, stride = config.resolve(pot)
    chains = max(1, min(config.n_chains, config.n_samples))
    keep = math.ceil(config.n_samples / chains)

    noise_std = math.sqrt(2.0 * h / pot.beta)
    center = _minimize_coupled(pot, x)
    y = np.tile(center, (chains, 1))
    rng = np.random.default_rng(np.random.SeedSequence([int(config.seed) & 0xFFFFFFFF, 0x67BB5]))

    store = np.empty((chains, keep, m))
    total_steps = burn + keep * stride
    kept = 0
    step_idx = 0
    while step_idx < total_steps:
        block = min(NOISE_CHUNK, total_steps - step_idx)
        noise = rng.standard_normal((block, chains, m))
        for j in range(block):
            y += -pot.grad_y(y, x) * h + noise_std * noise[j]
            step_idx += 1
            if step_idx > burn and (step_idx - burn) % stride == 0 and kept < keep:
                store[:, kept, :] = y
                kept += 1
        if not np.all(np.isfinite(y)):
            bad = int(np.argmax(~np.isfinite(y).all(axis=1)))
            raise DivergedError(
                f"Langevin chain {bad} diverged at step {step_idx} (h={h:g})",
                step=step_idx,
                path=bad,
            )
    halfwidth = SUPPORT_HALFWIDTH_FACTOR * max(math.sqrt(pot.gamma / pot.beta), 1.0)
    box = np.stack([[c - halfwidth, c + halfwidth] for c in center])
    return GibbsRepresentation(
        pot=pot,
        x=np.array(x, dtype=float),
        method="langevin",
        support_box=box,
        sample_store=store,
        meta={
            "step": h,
            "burn_in": burn,
            "stride": stride,
            "n_chains": chains,
            "keep_per_chain": keep,
            "seed": config.seed,
        },
    )


def build_gibbs(
    pot: CoupledPotential,
    x: np.ndarray | float,
    method: str = "quadrature",
    quad_points: int = QUAD_POINTS_1D,
    sampler: LangevinConfig | None = None,
) -> GibbsRepresentation:
    """Realize mu_x by quadrature (dim <= 2) or Langevin sampling."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    if x.shape != (pot.problem.dim,):
        raise ValueError(f"x must have shape ({pot.problem.dim},), got {x.shape}")
    if method == "quadrature":
        return _build_quadrature(pot, x, quad_points)
    if method == "langevin":
        return _build_langevin(pot, x, sampler or LangevinConfig())
    raise ValueError(f"unknown method {method!r}; use 'quadrature' or 'langevin'")


def local_entropy(gibbs: GibbsRepresentation) -> float:
    """Smoothed loss value at gibbs.x.

    Uses the exact quadrature normalizer and the heat-kernel constant at
    time gamma/beta:  -(1/beta) * (log Z(x) - (m/2) log(2*pi*gamma/beta)).
    """
    if gibbs.method != "quadrature" or gibbs.log_normalizer is None:
        raise MethodError("local_entropy needs a quadrature build (exact normalizer)")
    pot = gibbs.pot
    m = gibbs.dim
    log_kernel = 0.5 * m * math.log(2.0 * math.pi * pot.gamma / pot.beta)
    return -(gibbs.log_normalizer - log_kernel) / pot.beta


@dataclass(frozen=True)
class GradientEstimate:
    value: np.ndarray
    std_err: np.ndarray | None = None


def local_entropy_gradient(gibbs: GibbsRepresentation) -> GradientEstimate:
    """(x - E[y]) / gamma; with samples, adds a chain-block std error."""
    gamma = gibbs.pot.gamma
    if gibbs.method == "quadrature":
        mean = gibbs.expectation(gibbs.nodes)
        return GradientEstimate(value=(gibbs.x - mean) / gamma)
    samples = gibbs.flat_samples()
    if samples.size == 0:
        raise ValueError("empty sample store")
    mean = samples.mean(axis=0)
    block = gibbs.chain_block_means(samples)
    n_chains = block.shape[0]
    se = block.std(axis=0, ddof=1) / math.sqrt(n_chains) if n_chains > 1 else np.full_like(mean, np.nan)
    return GradientEstimate(value=(gibbs.x - mean) / gamma, std_err=se / gamma)


@dataclass(frozen=True)
class MomentTable:
    """First/second absolute moments and the mean of mu_x."""

    x: np.ndarray
    mean: np.ndarray
    m1: float
    m2: float
    method: str
    std_err_mean: np.ndarray | None = None
    std_err_m2: float | None = None

    def __post_init__(self):
        if self.m1 > math.sqrt(self.m2) * (1.0 + 1e-12):
            raise ValueError("moment table violates m1 <= sqrt(m2)")
        if self.m2 < float(np.dot(self.mean, self.mean)) * (1.0 - 1e-12):
            raise ValueError("moment table violates m2 >= |mean|^2")

    def csv_row(self) -> str:
        xs = ";".join(repr(float(v)) for v in self.x)
        ms = ";".join(repr(float(v)) for v in self.mean)
        se = "" if self.std_err_mean is None else ";".join(repr(float(v)) for v in self.std_err_mean)
        return f"{xs},{ms},{self.m1!r},{self.m2!r},{self.method},{se}"


def moments(gibbs: GibbsRepresentation) -> MomentTable:
    """MomentTable of mu_x from the realized representation."""
    if gibbs.method == "quadrature":
        r = np.linalg.norm(gibbs.nodes, axis=1)
        return MomentTable(
            x=gibbs.x,
            mean=gibbs.expectation(gibbs.nodes),
            m1=float(gibbs.expectation(r)),
            m2=float(gibbs.expectation(r * r)),
            method="quadrature",
        )
    samples = gibbs.flat_samples()
    r2 = np.sum(samples * samples, axis=1)
    block_mean = gibbs.chain_block_means(samples)
    block_m2 = gibbs.chain_block_means(r2[:, None])[:, 0]
    n_chains = block_mean.shape[0]
    se_mean = block_mean.std(axis=0, ddof=1) / math.sqrt(n_chains) if n_chains > 1 else None
    se_m2 = float(block_m2.std(ddof=1) / math.sqrt(n_chains)) if n_chains > 1 else None
    return MomentTable(
        x=gibbs.x,
        mean=samples.mean(axis=0),
        m1=float(np.sqrt(r2).mean()),
        m2=float(r2.mean()),
        method="langevin",
        std_err_mean=se_mean,
        std_err_m2=se_m2,
    )


class GibbsFactory:
    """Build-and-cache quadrature representations keyed by the slow point.

    Safe for concurrent read-only use once populated. The box-doubling
    validation runs on the first build only (the confinement margin is
    x-independent for the admissible potentials: Phi(., x) - min grows at
    least kappa*|y - y*|^2/2 everywhere); later builds reuse the validated
    half-width and warm-start the minimizer from the previous center.
    """

    def __init__(self, pot: CoupledPotential, quad_points: int = QUAD_POINTS_1D, max_entries: int = 8192):
        self.pot = pot
        self.quad_points = quad_points
        self.max_entries = max_entries
        self._cache: dict[tuple, GibbsRepresentation] = {}
        self._halfwidth: float | None = None
        self._last_center: np.ndarray | None = None

    def __call__(self, x: np.ndarray | float) -> GibbsRepresentation:
        x = np.atleast_1d(np.asarray(x, dtype=float))
        key = tuple(x.tolist())
        hit = self._cache.get(key)
        if hit is not None:
            return hit
        rep = _build_quadrature(
            self.pot,
            x,
            self.quad_points,
            halfwidth=self._halfwidth,
            center_hint=self._last_center,
            validate_box=self._halfwidth is None,
        )
        self._halfwidth = rep.meta["halfwidth"]
        self._last_center = 0.5 * (rep.support_box[:, 0] + rep.support_box[:, 1])
        if len(self._cache) >= self.max_entries:
            self._cache.pop(next(iter(self._cache)))
        self._cache[key] = rep
        return rep
