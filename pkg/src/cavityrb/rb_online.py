"""Online stage: reduced Newton solve, reconstruction and residual dual norms.

Reduced unknowns are ordered ``c = [a (2N velocity), b (N temperature), d (N pressure)]``.
The eddy viscosity inside the reduced system is the empirical interpolant
driven by the current velocity iterate: fluctuation gradients are evaluated at
the magic points only, the closed-form viscosity is applied there and the
triangular interpolation system gives the coefficients ``sigma``.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import lu_factor, lu_solve, solve_triangular

from .assembly import eddy_viscosity, eddy_viscosity_derivative
from .certification import ErrorCertificate, certify, lipschitz_rho
from .mesh import ParameterBox, ParameterPoint
from .spaces import FESolution

__all__ = [
    "NewtonDivergence",
    "ReducedSolution",
    "ReducedModel",
    "ResidualSplit",
    "build_residual_split",
    "rb_solve",
    "reconstruct",
    "residual_dual_norm",
    "write_sweep",
]


class NewtonDivergence(RuntimeError):
    pass


@dataclass
class ReducedSolution:
    parameter: ParameterPoint
    velocity_coeffs: np.ndarray
    temperature_coeffs: np.ndarray
    pressure_coeffs: np.ndarray
    newton_iterations: int
    residual_norm: float
    history: list = field(default_factory=list)
    sigma: np.ndarray | None = None

    @property
    def coefficients(self) -> np.ndarray:
        return np.concatenate([self.velocity_coeffs, self.temperature_coeffs, self.pressure_coeffs])


class ReducedModel:
    """Everything the online stage needs; no full-order object is touched.

    Parameters
    ----------
    operators : dict
        Reduced matrices/tensors (see ``rb_offline.project_operators``).
    eim_matrix : ndarray
        Unit lower-triangular EIM interpolation matrix.
    """

    def __init__(self, operators: dict, eim_matrix, *, prandtl, c_s, n_h, box: ParameterBox,
                 snapshot_parameters=(), snapshot_coeffs=None, constants=None, beta=None,
                 residual_split=None, basis=None):
        self.ops = operators
        self.eim_matrix = np.asarray(eim_matrix, dtype=float)
        self.prandtl = float(prandtl)
        self.c_s = float(c_s)
        self.n_h = int(n_h)
        self.box = box
        self.snapshot_parameters = list(snapshot_parameters)
        self.snapshot_coeffs = (np.zeros((0, self.size)) if snapshot_coeffs is None
                                else np.asarray(snapshot_coeffs, dtype=float))
        self.constants = constants
        self.beta = beta
        self.residual_split = residual_split
        self.basis = basis

    # -- sizes ------------------------------------------------------------------------
    @property
    def n_velocity(self) -> int:
        return self.ops["Aux"].shape[0]

    @property
    def n(self) -> int:
        return self.ops["Atx"].shape[0]

    @property
    def size(self) -> int:
        return self.n_velocity + 2 * self.n

    @property
    def m(self) -> int:
        return self.eim_matrix.shape[0]

    def split(self, c):
        v, n = self.n_velocity, self.n
        return c[:v], c[v:v + n], c[v + n:]

    # -- EIM closure ---------------------------------------------------------------------
    def sigma(self, a, height, with_derivative=False):
        """EIM coefficients of the eddy viscosity of the velocity ``a`` (and ``d sigma / d a``)."""
        if self.m == 0:
            z = np.zeros(0)
            return (z, np.zeros((0, len(a)))) if with_derivative else z
        G = self.ops["G"]  # (4, M, V)
        grads = G @ a
        nu = eddy_viscosity(grads, height, self.c_s, self.n_h)
        sig = solve_triangular(self.eim_matrix, nu, lower=True, unit_diagonal=True)
        if not with_derivative:
            return sig
        dnu = np.stack([eddy_viscosity_derivative(grads, G[:, :, j], height, self.c_s, self.n_h)
                        for j in range(G.shape[2])], axis=1)
        dsig = solve_triangular(self.eim_matrix, dnu, lower=True, unit_diagonal=True)
        return sig, dsig

    # -- reduced system --------------------------------------------------------------------
    def _parametrized(self, mu: ParameterPoint) -> dict:
        o, g, pr = self.ops, mu.height, self.prandtl
        return {
            "Lu": pr * (g * o["Aux"] + o["Auy"] / g),
            "Lt": g * o["Atx"] + o["Aty"] / g,
            "B": g * o["Bx"] + o["By"],
            "F": pr * mu.rayleigh * g * o["F"],
            "f": pr * mu.rayleigh * g * o["f_lift"] + 0.0,
            "t": g * o["atx_lift"] + o["aty_lift"] / g,
            "Cu": g * o["Cux"] + o["Cuy"],
            "Ct": g * o["Ctx"] + o["Cty"],
            "ct": g * o["ctx_lift"] + o["cty_lift"],
            "Su": g * o["Sux"] + o["Suy"] / g,
            "St": (g * o["Stx"] + o["Sty"] / g) / pr,
            "st": (g * o["stx_lift"] + o["sty_lift"] / g) / pr,
        }

    def residual_and_jacobian(self, c, mu: ParameterPoint, P=None, jacobian=True):
        P = P or self._parametrized(mu)
        a, b, d = self.split(c)
        if jacobian:
            sig, dsig = self.sigma(a, mu.height, with_derivative=True)
        else:
            sig = self.sigma(a, mu.height)
        Su = np.tensordot(sig, P["Su"], axes=1) if self.m else 0.0 * P["Lu"]
        St = np.tensordot(sig, P["St"], axes=1) if self.m else 0.0 * P["Lt"]
        st = sig @ P["st"] if self.m else np.zeros(self.n)
        Cu_a = np.tensordot(P["Cu"], a, axes=([2], [0]))  # (i, j): sum_k C[i, j, k] a_k
        Ct_b = np.tensordot(P["Ct"], b, axes=([2], [0]))  # (i, j)
        conv_u = Cu_a @ a
        r_v = P["Lu"] @ a + P["B"].T @ d + conv_u + Su @ a + P["F"] @ b + P["f"]
        r_t = P["Lt"] @ b + P["t"] + Ct_b @ a + P["ct"] @ a + St @ b + st
        r_p = P["B"] @ a
        res = np.concatenate([r_v, r_t, r_p])
        if not jacobian:
            return res, None, sig
        v, n = self.n_velocity, self.n
        J = np.zeros((v + 2 * n, v + 2 * n))
        Cu_j = np.tensordot(P["Cu"], a, axes=([1], [0]))  # (i, k): sum_j C[i, j, k] a_j
        J_vv = P["Lu"] + Cu_a + Cu_j + Su
        J_tv = Ct_b + P["ct"]
        if self.m:
            # derivative through the EIM coefficients
            Su_a = np.einsum("sij,j->is", P["Su"], a)
            St_b = np.einsum("sij,j->is", P["St"], b) + P["st"].T
            J_vv = J_vv + Su_a @ dsig
            J_tv = J_tv + St_b @ dsig
        J[:v, :v] = J_vv
        J[:v, v:v + n] = P["F"]
        J[:v, v + n:] = P["B"].T
        J[v:v + n, :v] = J_tv
        J[v:v + n, v:v + n] = P["Lt"] + np.tensordot(P["Ct"], a, axes=([1], [0])) + St
        J[v + n:, :v] = P["B"]
        return res, J, sig

    def residual(self, c, mu: ParameterPoint):
        return self.residual_and_jacobian(c, mu, jacobian=False)[0]

    # -- Newton ---------------------------------------------------------------------------
    def initial_guesses(self, mu: ParameterPoint):
        """Stored snapshot coefficients ordered by scaled parameter distance."""
        if not len(self.snapshot_parameters):
            return [np.zeros(self.size)]
        s = self.box.scaled(mu)
        d = [np.linalg.norm(self.box.scaled(p) - s) for p in self.snapshot_parameters]
        order = np.argsort(d, kind="stable")
        return [self.snapshot_coeffs[i] for i in order]

    def newton(self, mu: ParameterPoint, initial, tol=1e-12, max_iter=30) -> ReducedSolution:
        P = self._parametrized(mu)
        c = np.array(initial, dtype=float)
        # scale for the relative stopping test: forcing at the zero state
        scale = max(1.0, np.linalg.norm(self.residual_and_jacobian(np.zeros_like(c), mu, P, False)[0]))
        history, growth = [], 0
        for it in range(max_iter + 1):
            res, J, sig = self.residual_and_jacobian(c, mu, P)
            rn = float(np.linalg.norm(res))
            if not np.isfinite(rn):
                raise NewtonDivergence(f"non-finite reduced residual at {mu}")
            history.append(rn)
            if rn <= tol * scale:
                a, b, d = self.split(c)
                return ReducedSolution(mu, a.copy(), b.copy(), d.copy(), it, rn, history, sig)
            if len(history) > 1 and rn > history[-2]:
                growth += 1
                if growth >= 5:
                    break
            else:
                growth = 0
            if it == max_iter:
                break
            try:
                step = lu_solve(lu_factor(J, check_finite=False), res, check_finite=False)
            except (ValueError, np.linalg.LinAlgError) as exc:
                raise NewtonDivergence(f"singular reduced Jacobian at {mu}: {exc}") from exc
            c = c - step
            # roundoff floor: the update no longer changes the iterate
            if np.linalg.norm(step) <= 4 * np.finfo(float).eps * max(np.linalg.norm(c), 1.0):
                res = self.residual(c, mu)
                a, b, d = self.split(c)
                rn = float(np.linalg.norm(res))
                history.append(rn)
                return ReducedSolution(mu, a.copy(), b.copy(), d.copy(), it + 1, rn, history,
                                       self.sigma(a, mu.height))
        raise NewtonDivergence(f"reduced Newton did not converge at {mu} "
                               f"(residual history tail {history[-3:]})")

    def solve(self, mu: ParameterPoint, tol=1e-12, max_iter=30, initial=None) -> ReducedSolution:
        if not self.box.contains(mu):
            raise ValueError(f"{mu} lies outside the parameter box {self.box}")
        guesses = [initial] if initial is not None else []
        guesses += self.initial_guesses(mu)
        last = None
        for g in guesses:
            try:
                return self.newton(mu, g, tol, max_iter)
            except NewtonDivergence as exc:
                last = exc
        raise last

    # -- certification ---------------------------------------------------------------------
    def rho(self, height: float) -> float:
        return lipschitz_rho(height, self.constants)

    def epsilon(self, sol: ReducedSolution) -> float:
        if self.residual_split is None:
            raise RuntimeError("model carries no residual blocks")
        return self.residual_split.dual_norm(self, sol)

    def certificate(self, sol: ReducedSolution, epsilon=None, beta=None) -> ErrorCertificate:
        mu = sol.parameter
        eps = self.epsilon(sol) if epsilon is None else epsilon
        source = "exact" if beta is not None else "surrogate"
        b = self.beta(mu) if beta is None else beta
        return certify(eps, b, self.rho(mu.height), source)


def rb_solve(mu: ParameterPoint, model: ReducedModel, newton_tol=1e-12, max_iter=30) -> ReducedSolution:
    return model.solve(mu, newton_tol, max_iter)


def reconstruct(reduced: ReducedSolution, basis) -> FESolution:
    """Full-order fields from reduced coefficients (the lift is carried implicitly)."""
    if len(reduced.velocity_coeffs) != basis.velocity.shape[1] or \
            len(reduced.temperature_coeffs) != basis.temperature.shape[1]:
        raise ValueError("coefficient and basis dimensions differ")
    return FESolution(reduced.parameter, basis.velocity @ reduced.velocity_coeffs,
                      basis.temperature @ reduced.temperature_coeffs,
                      basis.pressure @ reduced.pressure_coeffs,
                      info={"reduced": True, "newton_iterations": reduced.newton_iterations})


# -- residual dual norm: offline/online split ---------------------------------------------

@dataclass
class ResidualSplit:
    """Triangular factor ``R`` with ``eps(mu) = |R theta(mu, c)|``.

    The columns of the whitened residual matrix are the Riesz-scaled full-order
    vectors of every affine term; ``R`` is their QR factor, so the online
    evaluation never forms squared Gram entries.
    """

    R: np.ndarray
    n_velocity: int
    n: int
    m: int

    def coefficients(self, model: ReducedModel, sol: ReducedSolution) -> np.ndarray:
        mu = sol.parameter
        g, pr, ra = mu.height, model.prandtl, mu.rayleigh
        a, b, d = sol.velocity_coeffs, sol.temperature_coeffs, sol.pressure_coeffs
        sig = sol.sigma if sol.sigma is not None else model.sigma(a, g)
        b1 = np.append(b, 1.0)
        targets = np.concatenate([a, b1])
        parts = [pr * g * a, pr / g * a,
                 g * np.concatenate([a, d]), np.concatenate([a, d]),
                 pr * ra * g * b1, g * b1, b1 / g,
                 g * np.outer(a, targets).ravel(), np.outer(a, targets).ravel(),
                 g * np.outer(sig, targets).ravel(), np.outer(sig, targets).ravel() / g]
        return np.concatenate(parts)

    def dual_norm(self, model: ReducedModel, sol: ReducedSolution) -> float:
        return float(np.linalg.norm(self.R @ self.coefficients(model, sol)))


def _residual_columns(forms, basis, eim):
    """Full-order vectors of every affine residual term, in :class:`ResidualSplit` order."""
    s = forms.space
    n2, n1 = s.n_p2, s.n_p1
    n = s.layout.size
    Z, Phi, Xi = basis.velocity, basis.temperature, basis.pressure
    V, N = Z.shape[1], Phi.shape[1]
    ell = forms.lift_vector
    Yv = np.zeros((n, V)); Yv[:2 * n2] = Z
    Yt = np.zeros((n, N + 1)); Yt[2 * n2:3 * n2, :N] = Phi; Yt[:, N] = ell
    Yp = np.zeros((n, N)); Yp[3 * n2:] = Xi
    blk = forms.affine.blocks
    cols = [blk["A_ux"] @ Yv, blk["A_uy"] @ Yv,
            blk["B_x"] @ np.hstack([Yv, Yp]), blk["B_y"] @ np.hstack([Yv, Yp]),
            blk["F_buoy"] @ Yt, blk["A_tx"] @ Yt, blk["A_ty"] @ Yt]
    w = s.quad_weights
    Zq1 = s.V @ Z[:n2]
    Zq2 = s.V @ Z[n2:]
    dx_u = (s.Dx @ Z[:n2], s.Dx @ Z[n2:])
    dy_u = (s.Dy @ Z[:n2], s.Dy @ Z[n2:])
    T = Yt[2 * n2:3 * n2]
    dx_t, dy_t = s.Dx @ T, s.Dy @ T

    def stack(comp_u, comp_t):
        """Global vectors: velocity targets in velocity rows, temperature targets in theta rows."""
        out = np.zeros((n, V + N + 1))
        out[:n2, :V] = comp_u[0]
        out[n2:2 * n2, :V] = comp_u[1]
        out[2 * n2:3 * n2, V:] = comp_t
        return out

    for adv, dxs, dts in ((Zq1, dx_u, dx_t), (Zq2, dy_u, dy_t)):
        group = []
        for j in range(V):
            wa = (w * adv[:, j])[:, None]
            group.append(stack((s.V.T @ (wa * dxs[0]), s.V.T @ (wa * dxs[1])), s.V.T @ (wa * dts)))
        cols.append(np.hstack(group) if group else np.zeros((n, 0)))
    Zs = ((s.Dx_star @ Z[:n2], s.Dx_star @ Z[n2:]), (s.Dy_star @ Z[:n2], s.Dy_star @ Z[n2:]))
    Ts = (s.Dx_star @ T, s.Dy_star @ T)
    Ds = (s.Dx_star, s.Dy_star)
    for axis in range(2):
        group = []
        for q in eim.basis:
            wq = (w * q)[:, None]
            D = Ds[axis]
            group.append(stack((D.T @ (wq * Zs[axis][0]), D.T @ (wq * Zs[axis][1])),
                               D.T @ (wq * Ts[axis]) / forms.prandtl))
        cols.append(np.hstack(group) if group else np.zeros((n, 0)))
    return np.hstack(cols)


def build_residual_split(forms, basis, eim, inner) -> ResidualSplit:
    """Whiten every residual term in the X inner product and keep the QR factor."""
    cols = _residual_columns(forms, basis, eim)
    W = inner.whiten(inner.restrict(cols))
    R = np.linalg.qr(W, mode="r")
    return ResidualSplit(R, basis.velocity.shape[1], basis.temperature.shape[1], len(eim.basis))


def residual_dual_norm(reduced: ReducedSolution, mu: ParameterPoint, model: ReducedModel) -> float:
    """Online residual dual norm (``mu`` must match the solution's parameter)."""
    if reduced.parameter != mu:
        raise ValueError("solution computed at a different parameter")
    return model.epsilon(reduced)


def write_sweep(path, rows) -> None:
    """``rows``: dicts with keys rayleigh, height, n, iterations, epsilon, wall_time."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["rayleigh", "height", "n", "iterations", "epsilon_n", "online_wall_time_s"])
        for r in rows:
            w.writerow([f"{r['rayleigh']:.10g}", f"{r['height']:.10g}", r["n"], r["iterations"],
                        f"{r['epsilon']:.10e}", f"{r['wall_time']:.6e}"])
