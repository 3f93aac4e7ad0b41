import numpy as np
import pytest

from hbmodal.fem import StructuralModelClass, shear_frame
from hbmodal.synthetic import synthetic_case_5_1

#: acceptance criterion -> (passed, detail); printed in the terminal summary
ACCEPTANCE_LINES = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE_LINES):
        ok, detail = ACCEPTANCE_LINES[key]
        terminalreporter.write_line(f"{key}: {'PASS' if ok else 'FAIL'}  {detail}")


def random_chain(rng, n_dof=5, n_param=3):
    """Random shear chain with ``n_param`` parameterized stories plus one mass parameter."""
    masses = rng.uniform(0.8, 1.5, n_dof)
    stiff = rng.uniform(500.0, 2000.0, n_dof)
    base = shear_frame(masses, stiff, parameterized=list(range(n_param)), theta_box=(0.3, 3.0))
    m_sub = np.zeros((n_dof, n_dof))
    m_sub[-1, -1] = masses[-1]
    m0 = base.m0.copy()
    m0[-1, -1] = 0.0
    return StructuralModelClass(k0=base.k0, m0=m0, k_sub=base.k_sub, m_sub=(m_sub,),
                                theta_lower=np.full(n_param + 1, 0.3), theta_upper=np.full(n_param + 1, 3.0),
                                name="chain5")


@pytest.fixture(scope="session")
def case51():
    return synthetic_case_5_1()


@pytest.fixture(scope="session")
def two_story(case51):
    return case51[0]


@pytest.fixture(scope="session")
def datasets51(case51):
    return case51[1]


@pytest.fixture(scope="session")
def chain5():
    return random_chain(np.random.default_rng(42))


@pytest.fixture(scope="session")
def ecm51(case51):
    from hbmodal.ecm import EcmConfig, run_ecm

    model, ds = case51
    return run_ecm(ds, model, EcmConfig(isotropic=True))


@pytest.fixture(scope="session")
def em51(case51, ecm51):
    from hbmodal.hyper import laplace_theta, run_em

    model, ds = case51
    posts = [laplace_theta(d, ecm51.discrepancy, model, th) for d, th in zip(ds, ecm51.theta_hat)]
    return run_em(posts)
