import numpy as np
import pytest

from segcox import ScenarioConfig

BETA = np.log(1.5)
OMEGA = np.log(2.0)


def make_scenario(**overrides) -> ScenarioConfig:
    """Common-disease reference scenario; override any field."""
    base = dict(
        n=3000,
        target_incidence=0.5,
        beta=BETA,
        omega=OMEGA,
        tau_quantile=0.5,
        rho_xw=0.8,
        m_valid=500,
        k_repeats=2,
        t_star=10.0,
        design="EV_X",
        method="RC1",
        replications=10,
        seed=20260810,
        disease="common",
    )
    base.update(overrides)
    return ScenarioConfig(**base)


@pytest.fixture(scope="session")
def rng():
    return np.random.default_rng(1234)
