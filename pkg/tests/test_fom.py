import numpy as np
import pytest

from cavityrb.fom import FomConfig, FullOrderModel, NonConvergence, solve_fom, solve_supremizer
from cavityrb.mesh import ParameterPoint


def test_config_validation():
    with pytest.raises(ValueError):
        FomConfig(dt=0.0)
    with pytest.raises(ValueError):
        FomConfig(steady_tol=-1.0)


@pytest.mark.parametrize("height", [0.5, 1.0, 2.0])
def test_conduction_state(fom8, height):
    sol = fom8.solve(ParameterPoint(0.0, height))
    assert sol.info["steps"] <= 2
    assert fom8.space.x_norm(sol, include_lift=False) < 1e-10


def test_single_roll_flow(fom8):
    mu = ParameterPoint(5e3, 1.0)
    sol = fom8.solve(mu)
    s = fom8.space
    assert s.h1_seminorm(sol.velocity[:s.n_p2]) > 1.0
    # steady: the residual vanishes
    assert fom8.residual_dual_norm(sol.vector(), mu) < 1e-7
    # the fields honour the constraints
    assert np.all(sol.velocity[s.layout.velocity_fixed] == 0)
    assert np.all(sol.temperature[s.layout.temperature_fixed] == 0)
    assert abs(s.pressure_mean(sol.pressure)) < 1e-12
    # buoyancy drives a clockwise roll: hot fluid rises at the left wall
    centre_left = np.argmin(np.hypot(s.p2_points[:, 0] - 0.15, s.p2_points[:, 1] - 0.5))
    assert sol.velocity[s.n_p2 + centre_left] > 0


def test_increment_log(fom8, tmp_path):
    path = tmp_path / "inc.csv"
    sol = solve_fom(ParameterPoint(1e3, 1.0), model=fom8, log_path=path)
    lines = path.read_text().splitlines()
    assert lines[0] == "step,increment_norm,wall_time_s"
    assert len(lines) == sol.info["steps"] + 1
    assert float(lines[-1].split(",")[1]) < 1e-10


def test_nonconvergence_reported(fom8):
    with pytest.raises(NonConvergence) as exc:
        fom8.solve(ParameterPoint(1e4, 1.0), FomConfig(max_steps=3))
    assert exc.value.last_increment > 1e-10


def test_supremizer_properties(fom8, rng):
    s = fom8.space
    assert np.all(solve_supremizer(np.zeros(s.n_p1), 1.2, fom8) == 0)
    q = s.remove_pressure_mean(rng.standard_normal(s.n_p1))
    t = fom8.solve_supremizer(q, 1.2)
    n2 = s.n_p2
    lhs = t[:n2] @ (s.K @ t[:n2]) + t[n2:] @ (s.K @ t[n2:])
    rhs = fom8.supremizer_rhs(q, 1.2) @ t
    assert abs(lhs - rhs) < 1e-12 * abs(lhs)
    assert np.allclose(fom8.solve_supremizer(3.5 * q, 1.2), 3.5 * t, rtol=0, atol=1e-12 * np.abs(t).max())


def test_model_from_divisions():
    m = FullOrderModel(4)
    assert m.space.mesh.divisions_per_side == 4
