"""Full-order steady solver: semi-implicit pseudo-time marching.

Each step solves one linear Oseen-type system in which the advecting velocity
and the eddy viscosity are taken from the previous iterate, while diffusion,
pressure and buoyancy are implicit.  The zero-mean pressure condition is
imposed through one Lagrange multiplier row.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as sla

from .assembly import BoussinesqForms
from .mesh import ParameterPoint
from .spaces import FESolution, TaylorHoodSpace

__all__ = [
    "FomConfig",
    "NonConvergence",
    "LinearSolveFailure",
    "FullOrderModel",
    "solve_fom",
    "solve_supremizer",
]


class NonConvergence(RuntimeError):
    """Iteration limit reached; ``last_increment`` holds the final increment norm."""

    def __init__(self, message, last_increment=float("nan")):
        super().__init__(message)
        self.last_increment = last_increment


class LinearSolveFailure(RuntimeError):
    pass


@dataclass(frozen=True)
class FomConfig:
    dt: float = 0.01
    steady_tol: float = 1e-10
    max_steps: int = 20000
    linear_solver_tol: float = 1e-8

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if not self.steady_tol > 0:
            raise ValueError("steady_tol must be positive")
        if self.max_steps < 1:
            raise ValueError("max_steps must be >= 1")


# Saddle-point step matrices are structurally symmetric: symmetric-mode ordering
# with a small pivot threshold roughly halves the fill of the default COLAMD path.
_SYMMETRIC = dict(permc_spec="MMD_AT_PLUS_A", diag_pivot_thresh=0.01,
                  options=dict(SymmetricMode=True))
_GENERAL = dict(permc_spec="COLAMD")


def _factor(matrix, symmetric=True):
    try:
        return sla.splu(matrix.tocsc(), **(_SYMMETRIC if symmetric else _GENERAL))
    except RuntimeError as exc:  # singular factor
        raise LinearSolveFailure(str(exc)) from exc


def _solve_checked(matrix, rhs, tol):
    """Factor and solve, retrying with partial pivoting if the residual is poor."""
    scale = max(np.linalg.norm(rhs), 1.0)
    for symmetric in (True, False):
        sol = _factor(matrix, symmetric).solve(rhs)
        if np.all(np.isfinite(sol)) and np.linalg.norm(matrix @ sol - rhs) <= tol * scale:
            return sol
    raise LinearSolveFailure(f"linear residual {np.linalg.norm(matrix @ sol - rhs):.3e} "
                             f"exceeds {tol:.1e}")


class FullOrderModel:
    """Finite-element discretisation bound to one mesh and model constants."""

    def __init__(self, space: TaylorHoodSpace | int, prandtl=0.71, c_s=0.1):
        if not isinstance(space, TaylorHoodSpace):
            space = TaylorHoodSpace(space)
        self.space = space
        self.forms = BoussinesqForms(space, prandtl, c_s)
        self.free = space.free
        n2 = space.n_p2
        # zero-mean constraint restricted to the free dofs (pressure dofs are all free)
        m = np.zeros(space.layout.size)
        m[3 * n2:] = space.pressure_mass_vector
        self._mean_row = sp.csr_matrix(m[self.free])
        self._vel_free = space.layout.velocity_free
        self._riesz = None
        self._supremizer_lu = None

    @property
    def prandtl(self):
        return self.forms.prandtl

    @property
    def c_s(self):
        return self.forms.c_s

    # -- helpers -------------------------------------------------------------------
    def _saddle(self, block):
        """Append the multiplier row/column to a free-dof matrix."""
        m = self._mean_row
        return sp.bmat([[block, m.T], [m, None]], format="csc")

    def to_solution(self, mu: ParameterPoint, state, info=None) -> FESolution:
        s = self.space
        u, th, p = s.split(state)
        sol = FESolution(mu, u.copy(), th.copy(), p.copy(), info=info or {})
        sol.x_norm = s.x_norm(sol)
        return sol

    def initial_state(self) -> np.ndarray:
        """Conduction state: zero velocity and pressure, temperature equal to the lift."""
        return np.zeros(self.space.layout.size)

    # -- residual ---------------------------------------------------------------
    def residual(self, state, mu: ParameterPoint) -> np.ndarray:
        """Residual of the steady problem restricted to free test functions."""
        return self.forms.residual(state, mu)[self.free]

    def riesz_factor(self):
        """Cholesky-like factor of the X Gram matrix on the free dofs (cached)."""
        if self._riesz is None:
            X = self.space.X[self.free][:, self.free]
            self._riesz = _factor(X)
        return self._riesz

    def residual_dual_norm(self, state, mu: ParameterPoint) -> float:
        """X-dual norm of the residual, computed through a Riesz solve."""
        r = self.residual(state, mu)
        z = self.riesz_factor().solve(r)
        return float(np.sqrt(max(r @ z, 0.0)))

    # -- steady solve --------------------------------------------------------------
    def solve(self, mu: ParameterPoint, config: FomConfig = FomConfig(), initial=None,
              log_path=None) -> FESolution:
        s, forms, free = self.space, self.forms, self.free
        mass = (mu.height / config.dt) * forms.affine.mass[free][:, free]
        linear = forms.linear_matrix(mu)
        lift = forms.lift_vector
        n2 = s.n_p2
        state = self.initial_state() if initial is None else np.array(initial, dtype=float)
        history = []
        t0 = time.perf_counter()
        increment = float("inf")
        for step in range(1, config.max_steps + 1):
            raw = state + lift
            oseen = linear + forms.nonlinear_matrix(raw[:2 * n2], mu)
            lhs = self._saddle(mass + oseen[free][:, free])
            rhs = np.concatenate([mass @ state[free] - oseen[free] @ lift, [0.0]])
            try:
                sol = _solve_checked(lhs, rhs, config.linear_solver_tol)
            except LinearSolveFailure as exc:
                raise LinearSolveFailure(f"step {step}: {exc}") from exc
            new = np.zeros_like(state)
            new[free] = sol[:-1]
            increment = s.x_norm_of_vector(new - state)
            state = new
            history.append((step, increment, time.perf_counter() - t0))
            if increment < config.steady_tol:
                break
        else:
            _write_log(log_path, history)
            raise NonConvergence(f"no steady state after {config.max_steps} steps "
                                 f"(increment {increment:.3e})", increment)
        _write_log(log_path, history)
        info = {"steps": len(history), "increment": increment,
                "wall_time": time.perf_counter() - t0,
                "increments": [h[1] for h in history]}
        return self.to_solution(mu, state, info)

    # -- supremizer ------------------------------------------------------------------
    def solve_supremizer(self, pressure, height: float) -> np.ndarray:
        """Velocity ``T q`` with ``(grad T q, grad v) = -h int q dx v1 - int q dy v2``."""
        s = self.space
        if self._supremizer_lu is None:
            K2 = sp.block_diag([s.K, s.K], format="csr")
            self._supremizer_lu = _factor(K2[self._vel_free][:, self._vel_free])
        rhs = self.supremizer_rhs(pressure, height)
        out = np.zeros(2 * s.n_p2)
        out[self._vel_free] = self._supremizer_lu.solve(rhs[self._vel_free])
        if not np.all(np.isfinite(out)):
            raise LinearSolveFailure("non-finite supremizer")
        return out

    def supremizer_rhs(self, pressure, height: float) -> np.ndarray:
        s = self.space
        return np.concatenate([height * (s.Bx.T @ pressure), s.By.T @ pressure])


def _write_log(path, history):
    if path is None:
        return
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "increment_norm", "wall_time_s"])
        for step, inc, t in history:
            w.writerow([step, f"{inc:.10e}", f"{t:.6f}"])


def solve_fom(mu: ParameterPoint, config: FomConfig = FomConfig(), model: FullOrderModel | None = None,
              n_h: int = 16, log_path=None) -> FESolution:
    """Steady full-order solution at ``mu`` (builds a model on ``n_h`` if none is given)."""
    model = model or FullOrderModel(n_h)
    return model.solve(mu, config, log_path=log_path)


def solve_supremizer(pressure, height: float, model: FullOrderModel) -> np.ndarray:
    return model.solve_supremizer(pressure, height)
