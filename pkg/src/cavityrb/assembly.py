"""Forms of the Boussinesq VMS-Smagorinsky problem on the reference square.

Linear forms are stored as parameter-independent global blocks with scalar
coefficient functions of ``mu``; the convective and eddy-viscosity terms are
produced on demand by kernels acting on quadrature-point fields.

All global matrices act on the raw state ``[u1, u2, theta, p]`` (temperature
including the lift) with rows ordered as test functions ``[v1, v2, psi, q]``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .mesh import ParameterPoint, map_to_original
from .spaces import QUADRATURE, TaylorHoodSpace, _p1_shape, _p2_shape

__all__ = [
    "DEFAULT_PRANDTL",
    "DEFAULT_SMAGORINSKY",
    "eddy_viscosity",
    "eddy_viscosity_derivative",
    "AffineOperatorSet",
    "assemble_affine",
    "BoussinesqForms",
    "assemble_on_original",
]

DEFAULT_PRANDTL = 0.71
DEFAULT_SMAGORINSKY = 0.1

LINEAR_BLOCKS = ("A_ux", "A_uy", "B_x", "B_y", "F_buoy", "A_tx", "A_ty")


def _prefactor(height, c_s, n_h):
    return c_s ** 2 * (height ** 2 + 1.0) / n_h ** 2


def eddy_viscosity(grad_components, height, c_s=DEFAULT_SMAGORINSKY, n_h=50):
    """Smagorinsky eddy viscosity in reference coordinates.

    ``grad_components`` is ``(dx u1, dy u1, dx u2, dy u2)`` (scalars or arrays);
    the ``1/height`` factors convert reference y-derivatives to physical ones.
    """
    if n_h < 2 or height <= 0:
        raise ValueError("need n_h >= 2 and height > 0")
    gx1, gy1, gx2, gy2 = (np.asarray(g, dtype=float) for g in grad_components)
    inv2 = 1.0 / height ** 2
    mag = np.sqrt(gx1 ** 2 + inv2 * gy1 ** 2 + gx2 ** 2 + inv2 * gy2 ** 2)
    return _prefactor(height, c_s, n_h) * mag


def eddy_viscosity_derivative(grad_components, direction_components, height,
                              c_s=DEFAULT_SMAGORINSKY, n_h=50):
    """Gateaux derivative of :func:`eddy_viscosity` along ``direction_components``.

    Set to zero where the gradient vanishes.
    """
    g = [np.asarray(a, dtype=float) for a in grad_components]
    z = [np.asarray(a, dtype=float) for a in direction_components]
    inv2 = 1.0 / height ** 2
    mag = np.sqrt(g[0] ** 2 + inv2 * g[1] ** 2 + g[2] ** 2 + inv2 * g[3] ** 2)
    dot = g[0] * z[0] + inv2 * g[1] * z[1] + g[2] * z[2] + inv2 * g[3] * z[3]
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.where(mag > 0, dot / np.where(mag > 0, mag, 1.0), 0.0)
    return _prefactor(height, c_s, n_h) * out


def theta_functions(prandtl):
    """Scalar coefficient of every affine block as a function of ``mu``."""
    pr = prandtl
    return {
        "A_ux": lambda mu: pr * mu.height,
        "A_uy": lambda mu: pr / mu.height,
        "B_x": lambda mu: mu.height,
        "B_y": lambda mu: 1.0,
        "F_buoy": lambda mu: pr * mu.rayleigh * mu.height,
        "A_tx": lambda mu: mu.height,
        "A_ty": lambda mu: 1.0 / mu.height,
        "C_x": lambda mu: mu.height,
        "C_y": lambda mu: 1.0,
        "S_ux": lambda mu: mu.height,
        "S_uy": lambda mu: 1.0 / mu.height,
        "S_tx": lambda mu: mu.height / pr,
        "S_ty": lambda mu: 1.0 / (pr * mu.height),
        "mass": lambda mu: mu.height,
    }


@dataclass(eq=False)
class AffineOperatorSet:
    """Parameter-independent global blocks and their coefficient functions."""

    blocks: dict
    theta: dict
    prandtl: float
    mass: sp.csr_matrix = None
    norms: dict = field(default_factory=dict)

    def coefficients(self, mu: ParameterPoint) -> dict:
        return {k: self.theta[k](mu) for k in self.blocks}

    def linear_operator(self, mu: ParameterPoint) -> sp.csr_matrix:
        out = None
        for name, block in self.blocks.items():
            term = self.theta[name](mu) * block
            out = term if out is None else out + term
        return out.tocsr()


def _embed(space, rows, cols, block):
    """Place a sparse block at row/col offsets ``rows``/``cols`` of a global matrix."""
    n = space.layout.size
    b = block.tocoo()
    return sp.csr_matrix((b.data, (b.row + rows, b.col + cols)), (n, n))


def assemble_affine(space: TaylorHoodSpace, prandtl=DEFAULT_PRANDTL) -> AffineOperatorSet:
    """Assemble every linear block once on the reference mesh."""
    if len(space.free) == 0:
        raise ValueError("layout has no free dofs")
    n2 = space.n_p2
    o_u2, o_t, o_p = n2, 2 * n2, 3 * n2
    Kxx, Kyy, M2 = space.Kxx, space.Kyy, space.M2
    blocks = {
        "A_ux": _embed(space, 0, 0, Kxx) + _embed(space, o_u2, o_u2, Kxx),
        "A_uy": _embed(space, 0, 0, Kyy) + _embed(space, o_u2, o_u2, Kyy),
        "B_x": _embed(space, 0, o_p, space.Bx.T) + _embed(space, o_p, 0, space.Bx),
        "B_y": _embed(space, o_u2, o_p, space.By.T) + _embed(space, o_p, o_u2, space.By),
        "F_buoy": _embed(space, o_u2, o_t, -M2),
        "A_tx": _embed(space, o_t, o_t, Kxx),
        "A_ty": _embed(space, o_t, o_t, Kyy),
    }
    blocks = {k: v.tocsr() for k, v in blocks.items()}
    mass = (_embed(space, 0, 0, M2) + _embed(space, o_u2, o_u2, M2)
            + _embed(space, o_t, o_t, M2)).tocsr()
    return AffineOperatorSet(blocks, theta_functions(prandtl), prandtl, mass,
                             {"X": space.X, "M1": space.M1})


class BoussinesqForms:
    """Residual, Jacobian and linearised operators of the full-order problem.

    Parameters
    ----------
    space : TaylorHoodSpace
    prandtl : float
    c_s : float
        Smagorinsky constant.
    """

    def __init__(self, space: TaylorHoodSpace, prandtl=DEFAULT_PRANDTL, c_s=DEFAULT_SMAGORINSKY):
        self.space = space
        self.prandtl = float(prandtl)
        self.c_s = float(c_s)
        self.n_h = space.mesh.divisions_per_side
        self.affine = assemble_affine(space, prandtl)
        self.theta = self.affine.theta
        n2 = space.n_p2
        self.n = space.layout.size
        self.lift_vector = np.zeros(self.n)
        self.lift_vector[2 * n2:3 * n2] = space.lift
        self._linear_cache = (None, None)

    # -- helpers ------------------------------------------------------------------
    def raw(self, state):
        """Add the lift to a state vector holding the temperature fluctuation."""
        return state + self.lift_vector

    def split(self, vec):
        n2 = self.space.n_p2
        return vec[:n2], vec[n2:2 * n2], vec[2 * n2:3 * n2], vec[3 * n2:]

    def fluctuation_gradients(self, velocity):
        s = self.space
        u1, u2 = s.velocity_components(velocity)
        return (s.Dx_star @ u1, s.Dy_star @ u1, s.Dx_star @ u2, s.Dy_star @ u2)

    def eddy_viscosity_field(self, velocity, height) -> np.ndarray:
        """Quadrature-point eddy viscosity of the VMS fluctuation of ``velocity``."""
        return eddy_viscosity(self.fluctuation_gradients(velocity), height, self.c_s, self.n_h)

    # -- kernels ----------------------------------------------------------------
    def advection_matrices(self, w1, w2):
        """Scalar P2 matrices ``int w1 dx(phi_j) phi_i`` and ``int w2 dy(phi_j) phi_i``."""
        s = self.space
        return s.weighted(s.V, s.Dx, s.V @ w1), s.weighted(s.V, s.Dy, s.V @ w2)

    def reaction_matrices(self, f):
        """Scalar P2 matrices ``int phi_j dx(f) phi_i`` and ``int phi_j dy(f) phi_i``."""
        s = self.space
        return s.weighted(s.V, s.V, s.Dx @ f), s.weighted(s.V, s.V, s.Dy @ f)

    def smagorinsky_matrices(self, q):
        """Scalar P2 matrices of ``int q dx(P* phi_j) dx(P* phi_i)`` and the y analogue."""
        s = self.space
        return s.weighted(s.Dx_star, s.Dx_star, q), s.weighted(s.Dy_star, s.Dy_star, q)

    def _diag3(self, a_u, a_t):
        """Global matrix with ``a_u`` on both velocity blocks and ``a_t`` on temperature."""
        z = sp.csr_matrix((self.space.n_p1, self.space.n_p1))
        return sp.block_diag([a_u, a_u, a_t, z], format="csr")

    # -- linear part --------------------------------------------------------------
    def linear_matrix(self, mu: ParameterPoint) -> sp.csr_matrix:
        key = mu.as_tuple()
        if self._linear_cache[0] != key:
            self._linear_cache = (key, self.affine.linear_operator(mu))
        return self._linear_cache[1]

    def nonlinear_matrix(self, velocity, mu: ParameterPoint, nu=None) -> sp.csr_matrix:
        """Operator of the convective and eddy terms with frozen advecting field/viscosity.

        Includes the coupling ``c_theta(u, theta_g, psi)`` through the raw temperature
        it is applied to; callers pass raw states.
        """
        g = mu.height
        u1, u2 = self.space.velocity_components(velocity)
        cx, cy = self.advection_matrices(u1, u2)
        conv = g * cx + cy
        if nu is None:
            nu = self.eddy_viscosity_field(velocity, g)
        sx, sy = self.smagorinsky_matrices(nu)
        smag_u = g * sx + sy / g
        smag_t = (g * sx + sy / g) / self.prandtl
        return self._diag3(conv + smag_u, conv + smag_t)

    def oseen_matrix(self, velocity, mu: ParameterPoint, nu=None) -> sp.csr_matrix:
        return (self.linear_matrix(mu) + self.nonlinear_matrix(velocity, mu, nu)).tocsr()

    # -- residual / Jacobian -------------------------------------------------------------
    def residual(self, state, mu: ParameterPoint, nu=None) -> np.ndarray:
        """Full residual (all rows) of a fluctuation-form state; ``nu`` overrides the eddy field.

        Evaluated matrix-free at the quadrature points.
        """
        s = self.space
        raw = self.raw(state)
        g = mu.height
        u1, u2, th, _ = self.split(raw)
        w = s.quad_weights
        a1, a2 = s.V @ u1, s.V @ u2
        if nu is None:
            nu = self.eddy_viscosity_field(raw[:2 * s.n_p2], g)
        out = self.linear_matrix(mu) @ raw
        n2 = s.n_p2
        for k, f in enumerate((u1, u2, th)):
            conv = w * (g * a1 * (s.Dx @ f) + a2 * (s.Dy @ f))
            scale = 1.0 if k < 2 else 1.0 / self.prandtl
            sx = w * nu * (g * scale) * (s.Dx_star @ f)
            sy = w * nu * (scale / g) * (s.Dy_star @ f)
            out[k * n2:(k + 1) * n2] += s.V.T @ conv + s.Dx_star.T @ sx + s.Dy_star.T @ sy
        return out

    def residual_assembled(self, state, mu: ParameterPoint, nu=None) -> np.ndarray:
        """Same as :meth:`residual` through the assembled Oseen matrix (cross-check)."""
        raw = self.raw(state)
        return self.oseen_matrix(raw[:2 * self.space.n_p2], mu, nu) @ raw

    def evaluate_nonlinear_forms(self, state, mu: ParameterPoint) -> dict:
        """Residual contributions of each nonlinear term (global test vectors)."""
        raw = self.raw(state)
        s = self.space
        n2 = s.n_p2
        u1, u2, th, _ = self.split(raw)
        g = mu.height
        cx, cy = self.advection_matrices(u1, u2)
        nu = self.eddy_viscosity_field(raw[:2 * n2], g)
        sx, sy = self.smagorinsky_matrices(nu)
        z = np.zeros(self.n)

        def put(a, b=None, c=None):
            out = z.copy()
            if a is not None:
                out[:n2] = a
            if b is not None:
                out[n2:2 * n2] = b
            if c is not None:
                out[2 * n2:3 * n2] = c
            return out

        return {
            "c_ux": put(g * (cx @ u1), g * (cx @ u2)),
            "c_uy": put(cy @ u1, cy @ u2),
            "c_tx": put(None, None, g * (cx @ th)),
            "c_ty": put(None, None, cy @ th),
            "s_ux": put(g * (sx @ u1), g * (sx @ u2)),
            "s_uy": put((sy @ u1) / g, (sy @ u2) / g),
            "s_tx": put(None, None, g * (sx @ th) / self.prandtl),
            "s_ty": put(None, None, (sy @ th) / (self.prandtl * g)),
            "nu": nu,
        }

    def smagorinsky_derivative_matrix(self, velocity, mu: ParameterPoint) -> sp.csr_matrix:
        """Velocity-block matrix of the eddy-viscosity derivative term.

        Entry ``(i, j)`` is
        ``int d nu(P* u)(P* phi_j) [g dx(P* u).dx(P* phi_i) + dy(P* u).dy(P* phi_i) / g]``.
        """
        s = self.space
        g = mu.height
        grads = self.fluctuation_gradients(velocity)
        gx1, gy1, gx2, gy2 = grads
        inv2 = 1.0 / g ** 2
        mag = np.sqrt(gx1 ** 2 + inv2 * gy1 ** 2 + gx2 ** 2 + inv2 * gy2 ** 2)
        scale = np.where(mag > 0, _prefactor(g, self.c_s, self.n_h) / np.where(mag > 0, mag, 1.0), 0.0)
        w = s.quad_weights * scale
        Dxs, Dys = s.Dx_star, s.Dy_star
        # direction functional rows: d nu = scale * (gx1 dx z1 + inv2 gy1 dy z1 + ...)
        dir1 = sp.diags(gx1) @ Dxs + sp.diags(inv2 * gy1) @ Dys
        dir2 = sp.diags(gx2) @ Dxs + sp.diags(inv2 * gy2) @ Dys
        tst1 = sp.diags(g * gx1) @ Dxs + sp.diags(gy1 / g) @ Dys
        tst2 = sp.diags(g * gx2) @ Dxs + sp.diags(gy2 / g) @ Dys
        W = sp.diags(w)
        top = sp.hstack([tst1.T @ W @ dir1, tst1.T @ W @ dir2])
        bot = sp.hstack([tst2.T @ W @ dir1, tst2.T @ W @ dir2])
        return sp.vstack([top, bot]).tocsr()

    def jacobian(self, state, mu: ParameterPoint, eddy_derivative: bool = True) -> sp.csr_matrix:
        """Gateaux derivative of :meth:`residual` (global, all dofs).

        The derivative of the eddy diffusivity with respect to the velocity in
        the energy equation is left out, as in the Lipschitz-constant convention.
        """
        raw = self.raw(state)
        s = self.space
        n2, n1 = s.n_p2, s.n_p1
        g = mu.height
        u1, u2, th, _ = self.split(raw)
        jac = self.oseen_matrix(raw[:2 * n2], mu)
        # derivative with respect to the advecting field
        r1x, r1y = self.reaction_matrices(u1)
        r2x, r2y = self.reaction_matrices(u2)
        rtx, rty = self.reaction_matrices(th)
        zero2 = sp.csr_matrix((n2, n2))
        conv_adv = sp.bmat([
            [g * r1x, r1y, None, None],
            [g * r2x, r2y, None, None],
            [g * rtx, rty, zero2, None],
            [None, None, None, sp.csr_matrix((n1, n1))],
        ], format="csr")
        jac = jac + conv_adv
        if eddy_derivative:
            d = self.smagorinsky_derivative_matrix(raw[:2 * n2], mu)
            jac = jac + sp.block_diag([d, sp.csr_matrix((n2 + n1, n2 + n1))], format="csr")
        return jac.tocsr()


def assemble_on_original(space: TaylorHoodSpace, mu: ParameterPoint, prandtl=DEFAULT_PRANDTL,
                         c_s=DEFAULT_SMAGORINSKY, velocity=None) -> dict:
    """Assemble the forms directly on the stretched cavity (oracle for the affine split).

    Returns global matrices keyed by ``a_u``, ``b``, ``f``, ``a_t``, ``mass`` and,
    when an advecting ``velocity`` is given, ``c`` and ``s`` (convective and eddy
    operators on the velocity and temperature blocks).
    """
    mesh = space.mesh
    pts, w = QUADRATURE
    verts = map_to_original(mesh.vertices, mu.height)
    tri = mesh.triangles
    p0, p1, p2 = (verts[tri[:, k]] for k in range(3))
    jac = np.stack([p1 - p0, p2 - p0], axis=2)
    det = jac[:, 0, 0] * jac[:, 1, 1] - jac[:, 0, 1] * jac[:, 1, 0]
    inv_t = np.linalg.inv(jac).transpose(0, 2, 1)
    v2, g2 = _p2_shape(pts)
    v1, _ = _p1_shape(pts)
    grad2 = np.einsum("eab,qkb->eqka", inv_t, g2)
    ne, nq = len(tri), len(w)
    nquad = ne * nq
    weights = (np.abs(det)[:, None] * w[None, :]).ravel()
    rows6 = np.repeat(np.arange(nquad), 6)
    cols6 = np.repeat(space.cells, nq, axis=0).ravel()
    shape2 = (nquad, space.n_p2)
    V = sp.csr_matrix((np.broadcast_to(v2, (ne, nq, 6)).ravel(), (rows6, cols6)), shape2)
    Dx = sp.csr_matrix((grad2[..., 0].ravel(), (rows6, cols6)), shape2)
    Dy = sp.csr_matrix((grad2[..., 1].ravel(), (rows6, cols6)), shape2)
    rows3 = np.repeat(np.arange(nquad), 3)
    cols3 = np.repeat(tri, nq, axis=0).ravel()
    V1 = sp.csr_matrix((np.broadcast_to(v1, (ne, nq, 3)).ravel(), (rows3, cols3)), (nquad, space.n_p1))

    def form(a, b, q=None):
        ww = weights if q is None else weights * q
        return (a.T @ sp.diags(ww) @ b).tocsr()

    n2 = space.n_p2
    K = form(Dx, Dx) + form(Dy, Dy)
    M2 = form(V, V)
    Bx, By = -form(V1, Dx), -form(V1, Dy)
    o_u2, o_t, o_p = n2, 2 * n2, 3 * n2
    out = {
        "a_u": prandtl * (_embed(space, 0, 0, K) + _embed(space, o_u2, o_u2, K)),
        "b": (_embed(space, 0, o_p, Bx.T) + _embed(space, o_p, 0, Bx)
              + _embed(space, o_u2, o_p, By.T) + _embed(space, o_p, o_u2, By)),
        "f": -prandtl * mu.rayleigh * _embed(space, o_u2, o_t, M2),
        "a_t": _embed(space, o_t, o_t, K),
        "mass": _embed(space, 0, 0, M2) + _embed(space, o_u2, o_u2, M2) + _embed(space, o_t, o_t, M2),
    }
    if velocity is not None:
        u1, u2 = velocity[:n2], velocity[n2:2 * n2]
        conv = form(V, Dx, V @ u1) + form(V, Dy, V @ u2)
        Pstar = space.Pstar
        Dxs, Dys = (Dx @ Pstar).tocsr(), (Dy @ Pstar).tocsr()
        g = (Dxs @ u1, Dys @ u1, Dxs @ u2, Dys @ u2)
        # physical-domain Smagorinsky: (C_S h_K)^2 |grad_o u|, h_K the mapped cell diameter
        h2 = (1.0 + mu.height ** 2) / mesh.divisions_per_side ** 2
        nu = c_s ** 2 * h2 * np.sqrt(sum(c ** 2 for c in g))
        smag = form(Dxs, Dxs, nu) + form(Dys, Dys, nu)
        zero = sp.csr_matrix((space.n_p1, space.n_p1))
        out["c"] = sp.block_diag([conv, conv, conv, zero], format="csr")
        out["s"] = sp.block_diag([smag, smag, smag / prandtl, zero], format="csr")
    return out
