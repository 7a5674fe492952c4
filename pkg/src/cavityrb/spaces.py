"""P2 velocity / P2 temperature / P1 pressure spaces on the reference square.

Every form in the package is evaluated through sparse "quadrature-point
evaluation" matrices: ``V`` maps nodal coefficients to values at all
quadrature points of the mesh, ``Dx`` and ``Dy`` to partial derivatives.
A weighted bilinear form is then ``A^T diag(w * q) B``.

Global vectors are laid out as ``[u1, u2, theta, p]`` with the scalar P2
nodes numbered vertices first, then edge midpoints.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .mesh import ParameterPoint, UniformMesh, build_uniform_mesh, write_vtk

__all__ = [
    "QUADRATURE",
    "DofLayout",
    "FESolution",
    "TaylorHoodSpace",
    "lift_values",
]


def _triangle_rule():
    """7-point symmetric rule on the unit triangle, exact for degree 5."""
    r = np.sqrt(15.0)
    a, b = (6 - r) / 21, (6 + r) / 21
    wa, wb = (155 - r) / 1200, (155 + r) / 1200
    pts = np.array([[1 / 3, 1 / 3],
                    [a, a], [1 - 2 * a, a], [a, 1 - 2 * a],
                    [b, b], [1 - 2 * b, b], [b, 1 - 2 * b]])
    w = np.array([9 / 40, wa, wa, wa, wb, wb, wb]) / 2.0
    return pts, w


QUADRATURE = _triangle_rule()


def _p2_shape(pts):
    """P2 shape values (nq, 6) and reference gradients (nq, 6, 2)."""
    xi, eta = pts[:, 0], pts[:, 1]
    l0, l1, l2 = 1 - xi - eta, xi, eta
    dl = np.array([[-1.0, -1.0], [1.0, 0.0], [0.0, 1.0]])
    lam = np.stack([l0, l1, l2], axis=1)
    val = np.column_stack([
        l0 * (2 * l0 - 1), l1 * (2 * l1 - 1), l2 * (2 * l2 - 1),
        4 * l0 * l1, 4 * l1 * l2, 4 * l2 * l0,
    ])
    grad = np.empty((len(pts), 6, 2))
    for k in range(3):
        grad[:, k] = (4 * lam[:, k] - 1)[:, None] * dl[k]
    for k, (i, j) in enumerate(((0, 1), (1, 2), (2, 0))):
        grad[:, 3 + k] = 4 * (lam[:, i, None] * dl[j] + lam[:, j, None] * dl[i])
    return val, grad


def _p1_shape(pts):
    xi, eta = pts[:, 0], pts[:, 1]
    val = np.column_stack([1 - xi - eta, xi, eta])
    grad = np.broadcast_to(np.array([[-1.0, -1.0], [1.0, 0.0], [0.0, 1.0]]), (len(pts), 3, 2))
    return val, grad


def lift_values(points) -> np.ndarray:
    """Lift ``theta_g(x, y) = 1 - x``: equals 1 on the left wall, 0 on the right."""
    return 1.0 - np.asarray(points)[..., 0]


@dataclass(frozen=True, eq=False)
class DofLayout:
    """Dof counts, offsets and Dirichlet sets of the mixed space."""

    n_p2: int
    n_p1: int
    velocity_fixed: np.ndarray
    temperature_fixed: np.ndarray

    @property
    def n_velocity(self) -> int:
        return 2 * self.n_p2

    @property
    def n_temperature(self) -> int:
        return self.n_p2

    @property
    def n_pressure(self) -> int:
        return self.n_p1

    @property
    def size(self) -> int:
        return 3 * self.n_p2 + self.n_p1

    @property
    def slices(self) -> dict:
        n2 = self.n_p2
        return {"u1": slice(0, n2), "u2": slice(n2, 2 * n2), "u": slice(0, 2 * n2),
                "theta": slice(2 * n2, 3 * n2), "p": slice(3 * n2, 3 * n2 + self.n_p1)}

    @property
    def velocity_free(self) -> np.ndarray:
        return np.setdiff1d(np.arange(self.n_velocity), self.velocity_fixed)

    @property
    def temperature_free(self) -> np.ndarray:
        return np.setdiff1d(np.arange(self.n_p2), self.temperature_fixed)

    @property
    def free(self) -> np.ndarray:
        """Unconstrained global dofs (pressure included, mean handled separately)."""
        n2 = self.n_p2
        return np.concatenate([self.velocity_free, 2 * n2 + self.temperature_free,
                               3 * n2 + np.arange(self.n_p1)])


@dataclass(eq=False)
class FESolution:
    """Full-order state; ``temperature`` is the fluctuation about the lift."""

    parameter: ParameterPoint
    velocity: np.ndarray
    temperature: np.ndarray
    pressure: np.ndarray
    x_norm: float = float("nan")
    info: dict = field(default_factory=dict)

    def vector(self) -> np.ndarray:
        return np.concatenate([self.velocity, self.temperature, self.pressure])


class TaylorHoodSpace:
    """Mixed P2-P2-P1 space on a uniform reference mesh.

    Parameters
    ----------
    mesh : UniformMesh or int
        Reference mesh, or the number of divisions per side.
    """

    def __init__(self, mesh):
        if not isinstance(mesh, UniformMesh):
            mesh = build_uniform_mesh(mesh)
        self.mesh = mesh
        nv, ne = mesh.n_vertices, mesh.n_edges
        self.n_p2 = nv + ne
        self.n_p1 = nv
        self.cells = np.hstack([mesh.triangles, nv + mesh.triangle_edges])
        mids = mesh.vertices[mesh.edges].mean(axis=1)
        self.p2_points = np.vstack([mesh.vertices, mids])

        on_bnd = lambda *s: np.concatenate([mesh.boundary_vertices(*s)] +
                                           [nv + mesh.boundary_edges[k] for k in s])
        vel_nodes = np.unique(on_bnd("left", "right", "bottom", "top"))
        temp_nodes = np.unique(on_bnd("left", "right"))
        self.layout = DofLayout(self.n_p2, self.n_p1,
                                np.concatenate([vel_nodes, self.n_p2 + vel_nodes]), temp_nodes)
        self._build_quadrature()
        self._build_matrices()

    # -- quadrature-level evaluation -------------------------------------------------
    def _build_quadrature(self):
        mesh = self.mesh
        pts, w = QUADRATURE
        nq = len(w)
        tri = mesh.triangles
        p0, p1, p2 = (mesh.vertices[tri[:, k]] for k in range(3))
        jac = np.stack([p1 - p0, p2 - p0], axis=2)  # (E, 2, 2), columns are edge vectors
        det = jac[:, 0, 0] * jac[:, 1, 1] - jac[:, 0, 1] * jac[:, 1, 0]
        inv_t = np.linalg.inv(jac).transpose(0, 2, 1)
        self.element_det = det

        v2, g2 = _p2_shape(pts)
        v1, g1 = _p1_shape(pts)
        grad2 = np.einsum("eab,qkb->eqka", inv_t, g2)  # (E, nq, 6, 2)
        grad1 = np.einsum("eab,qkb->eqka", inv_t, g1)

        ne = len(tri)
        self.n_quad = ne * nq
        self.quad_weights = (det[:, None] * w[None, :]).ravel()
        self.quad_points = (p0[:, None, :] + np.einsum("eab,qb->eqa", jac, pts)).reshape(-1, 2)
        self.quad_per_cell = nq

        rows6 = np.repeat(np.arange(self.n_quad), 6)
        cols6 = np.repeat(self.cells, nq, axis=0).ravel()
        shape2 = (self.n_quad, self.n_p2)
        self.V = sp.csr_matrix((np.broadcast_to(v2, (ne, nq, 6)).ravel(), (rows6, cols6)), shape2)
        self.Dx = sp.csr_matrix((grad2[..., 0].ravel(), (rows6, cols6)), shape2)
        self.Dy = sp.csr_matrix((grad2[..., 1].ravel(), (rows6, cols6)), shape2)

        rows3 = np.repeat(np.arange(self.n_quad), 3)
        cols3 = np.repeat(tri, nq, axis=0).ravel()
        shape1 = (self.n_quad, self.n_p1)
        self.V1 = sp.csr_matrix((np.broadcast_to(v1, (ne, nq, 3)).ravel(), (rows3, cols3)), shape1)
        self.D1x = sp.csr_matrix((grad1[..., 0].ravel(), (rows3, cols3)), shape1)
        self.D1y = sp.csr_matrix((grad1[..., 1].ravel(), (rows3, cols3)), shape1)

        # P1 interpolant expressed in P2 coefficients; Pstar = I - P
        nv = self.mesh.n_vertices
        e = self.mesh.edges
        rows = np.concatenate([np.arange(nv), nv + np.arange(len(e)), nv + np.arange(len(e))])
        cols = np.concatenate([np.arange(nv), e[:, 0], e[:, 1]])
        vals = np.concatenate([np.ones(nv), 0.5 * np.ones(2 * len(e))])
        self.P = sp.csr_matrix((vals, (rows, cols)), (self.n_p2, self.n_p2))
        self.Pstar = (sp.identity(self.n_p2, format="csr") - self.P).tocsr()
        self.Dx_star = (self.Dx @ self.Pstar).tocsr()
        self.Dy_star = (self.Dy @ self.Pstar).tocsr()

    def weighted(self, left, right, q=None) -> sp.csr_matrix:
        """Matrix of ``int q * (left basis)_i * (right basis)_j`` (rows: ``left``)."""
        w = self.quad_weights if q is None else self.quad_weights * q
        return (left.T @ sp.diags(w) @ right).tocsr()

    def _build_matrices(self):
        V, Dx, Dy = self.V, self.Dx, self.Dy
        self.Kxx = self.weighted(Dx, Dx)
        self.Kyy = self.weighted(Dy, Dy)
        self.K = (self.Kxx + self.Kyy).tocsr()
        self.M2 = self.weighted(V, V)
        self.M1 = self.weighted(self.V1, self.V1)
        self.pressure_mass_vector = self.V1.T @ self.quad_weights
        # rows: pressure test, columns: velocity component trial
        self.Bx = -self.weighted(self.V1, Dx)
        self.By = -self.weighted(self.V1, Dy)

        lay = self.layout
        self.lift = lift_values(self.p2_points)
        self.X = sp.block_diag([self.K, self.K, self.K, self.M1], format="csr")
        self._free = lay.free

    # -- fields -------------------------------------------------------------------------
    def split(self, vec):
        s = self.layout.slices
        return vec[s["u"]], vec[s["theta"]], vec[s["p"]]

    def velocity_components(self, velocity):
        n2 = self.n_p2
        return velocity[:n2], velocity[n2:]

    def at_quad(self, coeffs) -> np.ndarray:
        return self.V @ coeffs

    def grad_at_quad(self, coeffs, fluctuation: bool = False):
        if fluctuation:
            return self.Dx_star @ coeffs, self.Dy_star @ coeffs
        return self.Dx @ coeffs, self.Dy @ coeffs

    def interpolate(self, func) -> np.ndarray:
        """Nodal P2 interpolant of ``func(x, y)``."""
        return np.asarray(func(self.p2_points[:, 0], self.p2_points[:, 1]), dtype=float)

    # -- norms ----------------------------------------------------------------------------
    def x_norm_vectors(self, velocity, temperature, pressure) -> float:
        """``sqrt(|grad u|^2 + |grad theta|^2 + |p|^2)`` on the reference domain."""
        u1, u2 = self.velocity_components(velocity)
        val = (u1 @ (self.K @ u1) + u2 @ (self.K @ u2) + temperature @ (self.K @ temperature)
               + pressure @ (self.M1 @ pressure))
        return float(np.sqrt(max(val, 0.0)))

    def x_norm(self, solution: FESolution, include_lift: bool = True) -> float:
        """X-norm of a state; the lift is added back to the temperature by default."""
        theta = solution.temperature + self.lift if include_lift else solution.temperature
        return self.x_norm_vectors(solution.velocity, theta, solution.pressure)

    def x_norm_of_vector(self, vec) -> float:
        return float(np.sqrt(max(vec @ (self.X @ vec), 0.0)))

    def h1_seminorm(self, coeffs) -> float:
        return float(np.sqrt(max(coeffs @ (self.K @ coeffs), 0.0)))

    def l2_norm_p1(self, coeffs) -> float:
        return float(np.sqrt(max(coeffs @ (self.M1 @ coeffs), 0.0)))

    def pressure_mean(self, pressure) -> float:
        return float(self.pressure_mass_vector @ pressure)

    def remove_pressure_mean(self, pressure) -> np.ndarray:
        return pressure - self.pressure_mass_vector @ pressure / self.pressure_mass_vector.sum()

    # -- VMS projector ---------------------------------------------------------------
    def vms_project(self, field) -> np.ndarray:
        """Nodal P1 interpolant of a P2 field (or stacked velocity), in P2 coefficients."""
        field = np.asarray(field, dtype=float)
        if field.shape[0] == 2 * self.n_p2:
            a, b = self.velocity_components(field)
            return np.concatenate([self.P @ a, self.P @ b])
        return self.P @ field

    def vms_fluctuation(self, field) -> np.ndarray:
        return np.asarray(field, dtype=float) - self.vms_project(field)

    # -- lift -------------------------------------------------------------------------
    def apply_lift(self, raw_temperature, tol: float = 1e-10) -> np.ndarray:
        """Fluctuation ``raw - theta_g``; raw must equal 1 on the left and 0 on the right."""
        raw = np.asarray(raw_temperature, dtype=float)
        fixed = self.layout.temperature_fixed
        bad = np.abs(raw[fixed] - self.lift[fixed])
        if bad.size and bad.max() > tol:
            raise ValueError(f"temperature violates wall values by {bad.max():.3e}")
        out = raw - self.lift
        out[fixed] = 0.0
        return out

    def remove_lift(self, fluctuation) -> np.ndarray:
        return np.asarray(fluctuation, dtype=float) + self.lift

    # -- constrained-space helpers ---------------------------------------------------
    @property
    def free(self) -> np.ndarray:
        return self._free

    def zero_mean_basis(self) -> sp.csr_matrix:
        """Sparse basis (n_p1 x n_p1-1) of the zero-mean pressure subspace."""
        m = self.pressure_mass_vector
        n = self.n_p1
        rows = np.concatenate([np.arange(n - 1), np.full(n - 1, n - 1)])
        cols = np.concatenate([np.arange(n - 1), np.arange(n - 1)])
        vals = np.concatenate([np.ones(n - 1), -m[:-1] / m[-1]])
        return sp.csr_matrix((vals, (rows, cols)), (n, n - 1))

    # -- output -----------------------------------------------------------------------
    def vertex_fields(self, solution: FESolution) -> dict:
        nv = self.mesh.n_vertices
        u1, u2 = self.velocity_components(solution.velocity)
        theta = solution.temperature + self.lift
        return {"velocity": np.column_stack([u1[:nv], u2[:nv]]),
                "temperature": theta[:nv], "pressure": np.asarray(solution.pressure)}

    def write_vtk(self, path, solution: FESolution) -> None:
        write_vtk(path, self.mesh, solution.parameter.height, self.vertex_fields(solution))
