import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cavityrb.certification import (CertificationConstants, InfSupSolver, InvalidBeta,
                                    SingularInterpolation, beta_surrogate, certify,
                                    compute_constants, inverse_constant, lipschitz_rho,
                                    projector_constant, sobolev_constants, verify_theorem,
                                    write_certificates)
from cavityrb.mesh import ParameterBox, ParameterPoint


# -- certificate algebra -------------------------------------------------------------------

def test_worked_example():
    c = certify(0.05, 2.0, 10.0)
    assert abs(c.tau_n - 0.5) < 1e-15
    assert abs(c.delta_n - 0.1 * (1 - math.sqrt(0.5))) < 1e-15
    assert abs(c.delta_n - 0.0292893218813452) < 1e-14


def test_closed_form_limits():
    c0 = certify(0.0, 0.3, 2.0)
    assert c0.tau_n == 0.0 and c0.delta_n == 0.0 and c0.defined
    beta, rho = 0.3, 2.0
    c1 = certify(beta ** 2 / (4 * rho), beta, rho)
    assert abs(c1.tau_n - 1.0) < 1e-15
    assert abs(c1.delta_n - beta / (2 * rho)) < 1e-14


def test_undefined_certificate():
    c = certify(1.0, 0.1, 1.0)
    assert not c.defined and math.isnan(c.delta_n) and c.indicator == c.tau_n > 1


@pytest.mark.parametrize("args", [(0.1, 0.0, 1.0), (0.1, -1.0, 1.0), (0.1, float("nan"), 1.0)])
def test_invalid_beta(args):
    with pytest.raises(InvalidBeta):
        certify(*args)


@settings(max_examples=100, deadline=None)
@given(st.floats(1e-12, 1e2), st.floats(1e-6, 1e2), st.floats(1e-3, 1e3))
def test_certificate_formula_properties(eps, beta, rho):
    c = certify(eps, beta, rho)
    assert c.tau_n == pytest.approx(4 * eps * rho / beta ** 2, rel=1e-14)
    if c.defined:
        # Delta lies between the linearised estimate eps/beta and twice it
        assert eps / beta * (1 - 1e-12) <= c.delta_n <= 2 * eps / beta * (1 + 1e-12)


def test_verify_theorem_report():
    c = certify(0.05, 2.0, 10.0)
    rep = verify_theorem(c, 0.01, gamma=5.0)
    assert rep["bound_holds"] and rep["effectivity"] == pytest.approx(c.delta_n / 0.01)
    assert rep["effectivity"] >= 1
    assert rep["effectivity_cap"] == pytest.approx(2 * 5.0 / 2.0 + 0.5)
    bad = verify_theorem(certify(1.0, 0.1, 1.0), 0.01)
    assert bad["bound_holds"] is None


def test_certificate_csv(tmp_path):
    path = tmp_path / "c.csv"
    write_certificates(path, [(ParameterPoint(1e3, 1.0), certify(0.05, 2.0, 10.0), 0.01),
                              (ParameterPoint(2e3, 1.0), certify(1.0, 0.1, 1.0), None)])
    lines = path.read_text().splitlines()
    assert len(lines) == 3 and lines[0].startswith("rayleigh,height,epsilon_n")


# -- constants ----------------------------------------------------------------------------------

def test_sobolev_constants_mesh_stable(fom8, fom16):
    c8 = sobolev_constants(fom8.space)
    c16 = sobolev_constants(fom16.space)
    for a, b in zip(c8, c16):
        assert a > 0 and abs(a - b) / b < 0.05


def test_sobolev_constant_bounds_random_fields(fom8, rng):
    s = fom8.space
    c_u, _ = sobolev_constants(s)
    free = s.layout.velocity_free[: len(s.layout.velocity_free) // 2]
    w = s.quad_weights
    for _ in range(20):
        v = np.zeros(s.n_p2)
        v[free] = rng.standard_normal(len(free))
        ratio = (w @ (s.V @ v) ** 4) ** 0.25 / s.h1_seminorm(v)
        assert ratio <= c_u * (1 + 1e-8)


def test_sobolev_constant_invariant_under_reordering(fom8):
    a = sobolev_constants(fom8.space, seed=0)
    b = sobolev_constants(fom8.space, seed=7)
    assert a == pytest.approx(b, rel=1e-6)


def test_projector_and_inverse_constants(fom8):
    assert projector_constant(fom8.space) >= 1.0  # P* fixes fields orthogonal to P1
    assert 0 < inverse_constant(fom8.space, samples=10) < 10


def test_rho_properties():
    c = CertificationConstants(0.285, 0.373, 1.72, 0.5, 0.225, 0.1, 16)
    assert lipschitz_rho(2.0, c) >= lipschitz_rho(1.0, c) > 0
    for h in np.linspace(0.5, 2.0, 7):
        assert lipschitz_rho(h, c) > 0
    bigger = lipschitz_rho(1.5, c, snapshot_sup_bounds=(2.0, 2.0))
    assert bigger >= lipschitz_rho(1.5, c, snapshot_sup_bounds=(1.0, 1.0))
    with pytest.raises(ValueError):
        lipschitz_rho(0.0, c)
    with pytest.raises(ValueError):
        CertificationConstants(-1.0, 0.3, 1.7, 0.5, 0.2, 0.1, 16)


def test_compute_constants_deterministic(fom8):
    a = compute_constants(fom8.space, 0.1, seed=3).as_dict()
    b = compute_constants(fom8.space, 0.1, seed=3).as_dict()
    assert a == b


# -- inf-sup ------------------------------------------------------------------------------------

def test_beta_positive_and_bounded_by_gamma(fom8):
    mu = ParameterPoint(1e3, 1.0)
    state = fom8.solve(mu).vector()
    solver = InfSupSolver(fom8)
    beta = solver.beta(mu, state)
    gamma = solver.gamma(mu, state)
    assert 0 < beta < gamma


def test_beta_matches_dense_svd(space4):
    from cavityrb.fom import FullOrderModel
    from cavityrb.riesz import XInnerProduct
    from scipy.linalg import cholesky, solve_triangular, svdvals
    fom = FullOrderModel(space4)
    mu = ParameterPoint(2e3, 1.5)
    state = fom.solve(mu).vector()
    beta = InfSupSolver(fom).beta(mu, state)
    x = XInnerProduct(space4, zero_mean_pressure=True)
    J = (x.embed.T @ fom.forms.jacobian(state, mu) @ x.embed).toarray()
    L = cholesky(x.gram.toarray(), lower=True)
    A = solve_triangular(L, solve_triangular(L, J, lower=True).T, lower=True).T
    assert beta == pytest.approx(svdvals(A).min(), rel=1e-8)


def test_beta_invariant_under_sign_flip_of_pressure_test(space4):
    """Flipping the sign of a test component is an X-orthogonal change of basis."""
    from cavityrb.fom import FullOrderModel
    from cavityrb.riesz import XInnerProduct
    from scipy.linalg import cholesky, solve_triangular, svdvals
    fom = FullOrderModel(space4)
    mu = ParameterPoint(2e3, 1.0)
    state = fom.solve(mu).vector()
    x = XInnerProduct(space4, zero_mean_pressure=True)
    J = (x.embed.T @ fom.forms.jacobian(state, mu) @ x.embed).toarray()
    L = cholesky(x.gram.toarray(), lower=True)
    white = lambda M: solve_triangular(L, solve_triangular(L, M, lower=True).T, lower=True).T
    D = np.ones(len(J))
    D[-x.block_sizes[-1]:] = -1
    assert svdvals(white(D[:, None] * J)).min() == pytest.approx(svdvals(white(J)).min(), rel=1e-10)


# -- surrogate ----------------------------------------------------------------------------------

def test_surrogate_interpolates_nodes():
    box = ParameterBox((1e3, 1e4), (0.5, 2.0))
    nodes = box.grid(3, 3)
    vals = [0.01 * (1 + m.height) / math.sqrt(m.rayleigh / 1e3) for m in nodes]
    sur = beta_surrogate(list(zip(nodes, vals)), box)
    for m, v in zip(nodes, vals):
        assert abs(sur(m) - v) <= 1e-10 * v
    assert sur.loo_error < 0.2


def test_surrogate_constant_data():
    box = ParameterBox((1e3, 1e4), (1.0, 1.0))
    nodes = box.grid(5)
    sur = beta_surrogate([(m, 0.3) for m in nodes], box)
    for m in box.sample(10, np.random.default_rng(0)):
        assert sur(m) == pytest.approx(0.3, rel=1e-12)


def test_surrogate_rejects_bad_training():
    box = ParameterBox((1e3, 1e4), (1.0, 1.0))
    m = ParameterPoint(2e3, 1.0)
    with pytest.raises(SingularInterpolation):
        beta_surrogate([(m, 0.1), (m, 0.2), (ParameterPoint(3e3, 1.0), 0.1),
                        (ParameterPoint(4e3, 1.0), 0.1)], box)
    with pytest.raises(ValueError):
        beta_surrogate([(m, 0.1)], box)
