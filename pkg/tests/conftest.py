import pytest

from twoscale.control import ConstantLaw
from twoscale.problems import CoupledPotential, make_problem
from twoscale.sde import BrownianStore, TwoScaleSpec, integrate_two_scale


@pytest.fixture(scope="session")
def quad_pot():
    return CoupledPotential(make_problem("quadratic", {"dim": 1}), gamma=0.5, beta=1.0)


@pytest.fixture(scope="session")
def zero_pot():
    return CoupledPotential(make_problem("zero", {"dim": 1}), gamma=1.0, beta=1.0)


@pytest.fixture(scope="session")
def sdw_pot():
    return CoupledPotential(
        make_problem("saturated_double_well", {"dim": 1}), gamma=1.0 / 12.0, beta=1.0
    )


@pytest.fixture(scope="session", autouse=True)
def warm_kernels(quad_pot):
    """Compile the integrator kernel once so timed tests measure compute."""
    spec = TwoScaleSpec(quad_pot, epsilon=0.5)
    store = BrownianStore(0, 1, 1.0)
    integrate_two_scale(spec, ConstantLaw(1.0), 1.0, 0.0, 0.05, 2, store)
    yield
