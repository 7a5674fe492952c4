"""A-posteriori error certificate of Brezzi-Rappaz-Raviart type.

Given the residual dual norm ``eps``, an inf-sup value ``beta`` of the
linearised operator and a Lipschitz constant ``rho`` of its derivative,

    tau   = 4 eps rho / beta^2
    Delta = beta / (2 rho) * (1 - sqrt(1 - tau))      (only when tau <= 1)

bounds the X-norm distance to the full-order solution.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as sla
from scipy.interpolate import RBFInterpolator
from scipy.linalg import eigh

from .mesh import ParameterBox, ParameterPoint
from .riesz import XInnerProduct
from .spaces import TaylorHoodSpace

__all__ = [
    "InvalidBeta",
    "EigenSolveFailure",
    "NonPositive",
    "SingularInterpolation",
    "SobolevNonConvergence",
    "CertificationConstants",
    "ErrorCertificate",
    "sobolev_constants",
    "inverse_constant",
    "projector_constant",
    "poincare_constant",
    "compute_constants",
    "lipschitz_rho",
    "InfSupSolver",
    "beta_exact",
    "BetaSurrogate",
    "beta_surrogate",
    "certify",
    "verify_theorem",
    "write_certificates",
]


class InvalidBeta(ValueError):
    pass


class EigenSolveFailure(RuntimeError):
    pass


class NonPositive(RuntimeError):
    """Computed inf-sup value is not positive: stability lost at this parameter."""


class SingularInterpolation(ValueError):
    pass


class SobolevNonConvergence(RuntimeError):
    pass


# -- constants --------------------------------------------------------------------

def _l4_constant(space: TaylorHoodSpace, free, rng, n_starts=3, tol=1e-8, max_iter=500):
    """``sup |v|_{L4} / |grad v|_{L2}`` over P2 fields vanishing off ``free`` nodes.

    Fixed point of the Euler-Lagrange system ``K v = lambda * M(v^2) v``:
    solve with the cubic load, renormalise, repeat.
    """
    K = space.K[free][:, free].tocsc()
    lu = sla.splu(K)
    Vf = space.V[:, free].tocsr()
    w = space.quad_weights
    best = 0.0
    # deterministic start: discrete Dirichlet-type bump, then seeded random starts
    x, y = space.p2_points[free].T
    starts = [np.sin(np.pi * x) * np.sin(np.pi * y) + 0.1]
    starts += [rng.standard_normal(len(free)) for _ in range(n_starts - 1)]
    for v in starts:
        v = v / np.sqrt(v @ (K @ v))
        prev = 0.0
        for _ in range(max_iter):
            vq = Vf @ v
            c = (w @ vq ** 4) ** 0.25
            if abs(c - prev) <= tol * c:
                break
            prev = c
            v = lu.solve(Vf.T @ (w * vq ** 3))
            v /= np.sqrt(v @ (K @ v))
        else:
            raise SobolevNonConvergence(f"L4 fixed point stalled at {c:.6g}")
        best = max(best, c)
    return float(best)


def sobolev_constants(space: TaylorHoodSpace, seed: int = 0, tol=1e-8, max_iter=500):
    """Embedding constants ``(C_u, C_theta)`` of H1 into L4 on the reference square.

    ``C_u`` is computed on one velocity component; for ``|v|^4 = (v1^2 + v2^2)^2``
    Minkowski's inequality shows the vector constant equals the scalar one.
    """
    rng = np.random.default_rng(seed)
    lay = space.layout
    vel = lay.velocity_free[: len(lay.velocity_free) // 2]
    c_u = _l4_constant(space, vel, rng, tol=tol, max_iter=max_iter)
    c_t = _l4_constant(space, lay.temperature_free, rng, tol=tol, max_iter=max_iter)
    return c_u, c_t


def inverse_constant(space: TaylorHoodSpace, samples: int = 100, seed: int = 0) -> float:
    """Largest observed ``h |grad v|_inf / |grad v|_L2`` over random velocity fields."""
    rng = np.random.default_rng(seed)
    lay = space.layout
    free = lay.velocity_free[: len(lay.velocity_free) // 2]
    h = space.mesh.h
    best = 0.0
    for _ in range(samples):
        v = np.zeros(space.n_p2)
        v[free] = rng.standard_normal(len(free))
        gx, gy = space.Dx @ v, space.Dy @ v
        ratio = h * np.sqrt(gx ** 2 + gy ** 2).max() / space.h1_seminorm(v)
        best = max(best, ratio)
    return float(best)


def projector_constant(space: TaylorHoodSpace) -> float:
    """Exact ``sup |grad P* v| / |grad v|`` over discrete velocity components."""
    lay = space.layout
    free = lay.velocity_free[: len(lay.velocity_free) // 2]
    K = space.K
    Ps = space.Pstar[:, free]
    A = (Ps.T @ K @ Ps).toarray()
    B = K[free][:, free].toarray()
    top = eigh(A, B, eigvals_only=True, subset_by_index=[len(free) - 1, len(free) - 1])
    return float(np.sqrt(top[0]))


def poincare_constant(space: TaylorHoodSpace) -> float:
    lay = space.layout
    free = lay.velocity_free[: len(lay.velocity_free) // 2]
    K = space.K[free][:, free].toarray()
    M = space.M2[free][:, free].toarray()
    low = eigh(K, M, eigvals_only=True, subset_by_index=[0, 0])
    return float(1.0 / np.sqrt(low[0]))


@dataclass
class CertificationConstants:
    """Mesh constants entering the Lipschitz constant ``rho``."""

    c_u: float
    c_theta: float
    c_f: float
    c_inv: float
    c_p: float
    c_s: float
    n_h: int
    snapshot_sup_bounds: tuple = (0.0, 0.0)

    def __post_init__(self):
        for name in ("c_u", "c_theta", "c_f", "c_inv", "c_p"):
            val = getattr(self, name)
            if not (np.isfinite(val) and val > 0):
                raise ValueError(f"{name} must be positive and finite, got {val}")

    def as_dict(self) -> dict:
        return {"c_u": self.c_u, "c_theta": self.c_theta, "c_f": self.c_f, "c_inv": self.c_inv,
                "c_p": self.c_p, "c_s": self.c_s, "n_h": self.n_h,
                "sup_grad_u": self.snapshot_sup_bounds[0],
                "sup_grad_theta": self.snapshot_sup_bounds[1]}


def compute_constants(space: TaylorHoodSpace, c_s: float, seed: int = 0,
                      snapshot_sup_bounds=(0.0, 0.0)) -> CertificationConstants:
    c_u, c_t = sobolev_constants(space, seed)
    return CertificationConstants(c_u, c_t, projector_constant(space),
                                  inverse_constant(space, seed=seed), poincare_constant(space),
                                  float(c_s), space.mesh.divisions_per_side,
                                  tuple(float(b) for b in snapshot_sup_bounds))


def lipschitz_rho(height: float, constants: CertificationConstants,
                  snapshot_sup_bounds=None) -> float:
    """Lipschitz constant of the derivative, without the mollifier-dependent term.

    Convective part ``max(1, h) (2 C_u^2 + 2 C_u C_theta)``; eddy part
    ``max(h, 1/h) (2 C_S^2 h_K C_f^3 + 3 C_S h_K C_inv)`` with the cell size
    ``h_K = sqrt(h^2 + 1) / N_h`` of the stretched mesh.  The sup bounds only
    enter the dropped term; they are accepted for bookkeeping.
    """
    if not height > 0:
        raise ValueError("height must be positive")
    c = constants
    h_k = math.sqrt(height ** 2 + 1.0) / c.n_h
    conv = max(1.0, height) * (2 * c.c_u ** 2 + 2 * c.c_u * c.c_theta)
    eddy = max(height, 1.0 / height) * (2 * c.c_s ** 2 * h_k * c.c_f ** 3
                                        + 3 * c.c_s * h_k * c.c_inv)
    return float(conv + eddy)


# -- inf-sup ----------------------------------------------------------------------

class InfSupSolver:
    """Extreme singular values of the linearised operator in the X norms."""

    def __init__(self, model, tol: float = 1e-10):
        self.model = model
        self.inner = XInnerProduct(model.space, zero_mean_pressure=True)
        self.tol = tol

    def _operator(self, state, mu):
        E = self.inner.embed
        J = self.model.forms.jacobian(state, mu)
        return (E.T @ J @ E).tocsc()

    def beta(self, mu: ParameterPoint, state) -> float:
        """Smallest singular value of ``L^{-1} J L^{-T}`` (``X = L L^T``)."""
        J0 = self._operator(state, mu)
        try:
            lu = sla.splu(J0)
        except RuntimeError as exc:
            raise NonPositive(f"singular linearisation at {mu}: {exc}") from exc
        x = self.inner
        n = J0.shape[0]

        def apply(v):
            a = x.factor_times(lu.solve(x.factor_times(v), trans="T"), transpose=True)
            return x.factor_times(lu.solve(x.factor_times(a)), transpose=True)

        op = sla.LinearOperator((n, n), matvec=apply, dtype=float)
        try:
            lam = sla.eigsh(op, k=1, which="LM", tol=self.tol, return_eigenvectors=False,
                            v0=np.ones(n))
        except sla.ArpackError as exc:
            raise EigenSolveFailure(str(exc)) from exc
        if not lam[0] > 0 or not np.isfinite(lam[0]):
            raise NonPositive(f"inf-sup value not positive at {mu}")
        return float(1.0 / np.sqrt(lam[0]))

    def gamma(self, mu: ParameterPoint, state) -> float:
        """Largest singular value (continuity constant)."""
        J0 = self._operator(state, mu)
        x = self.inner
        n = J0.shape[0]

        def apply(v):
            a = x.unwhiten_transpose(v)
            a = x.whiten(J0 @ a)
            a = x.unwhiten_transpose(a)
            return x.whiten(J0.T @ a)

        op = sla.LinearOperator((n, n), matvec=apply, dtype=float)
        try:
            lam = sla.eigsh(op, k=1, which="LM", tol=self.tol, return_eigenvectors=False,
                            v0=np.ones(n))
        except sla.ArpackError as exc:
            raise EigenSolveFailure(str(exc)) from exc
        return float(np.sqrt(lam[0]))


def beta_exact(mu: ParameterPoint, state, model, solver: InfSupSolver | None = None) -> float:
    """Inf-sup constant of the derivative at ``state`` (fluctuation form vector)."""
    return (solver or InfSupSolver(model)).beta(mu, state)


@dataclass
class BetaSurrogate:
    """Thin-plate-spline interpolant of ``log(beta)`` in scaled parameter coordinates.

    Working with the logarithm keeps the estimate positive and follows the
    roughly power-law decay of ``beta`` in the Rayleigh number.
    """

    box: ParameterBox
    nodes: np.ndarray
    values: np.ndarray
    loo_error: float = float("nan")

    def __post_init__(self):
        self._dims = [d for d, on in enumerate((self.box.varies_rayleigh, self.box.varies_height)) if on]
        self._interp = None
        if self._dims:
            self._interp = RBFInterpolator(self.nodes[:, self._dims], np.log(self.values),
                                           kernel="thin_plate_spline", degree=1)

    def __call__(self, mu: ParameterPoint) -> float:
        if self._interp is None:
            return float(self.values[0])
        s = self.box.scaled(mu)[self._dims]
        return float(np.exp(self._interp(s[None, :])[0]))


def beta_surrogate(train, box: ParameterBox) -> BetaSurrogate:
    """Interpolate ``(mu, beta)`` pairs; reports the relative leave-one-out error."""
    if len(train) < 4:
        raise ValueError("need at least 4 training pairs")
    nodes = np.array([box.scaled(mu) for mu, _ in train])
    values = np.array([float(b) for _, b in train])
    if not np.all(values > 0):
        raise InvalidBeta("inf-sup training values must be positive")
    if len(np.unique(np.round(nodes, 14), axis=0)) < len(nodes):
        raise SingularInterpolation("duplicate interpolation nodes")
    sur = BetaSurrogate(box, nodes, values)
    errs = []
    for i in range(len(train)):
        keep = np.arange(len(train)) != i
        try:
            sub = BetaSurrogate(box, nodes[keep], values[keep])
        except (np.linalg.LinAlgError, ValueError):
            continue
        mu = train[i][0]
        errs.append(abs(sub(mu) - values[i]) / abs(values[i]))
    sur.loo_error = float(max(errs)) if errs else float("nan")
    return sur


# -- certificate ---------------------------------------------------------------------

@dataclass
class ErrorCertificate:
    epsilon_n: float
    beta_n: float
    rho_n: float
    tau_n: float
    delta_n: float
    defined: bool
    beta_source: str = "exact"
    gamma_n: float | None = None
    effectivity: float | None = None
    extra: dict = field(default_factory=dict)

    @property
    def indicator(self) -> float:
        """Greedy indicator: the bound when defined, otherwise ``tau``."""
        return self.delta_n if self.defined else self.tau_n

    @property
    def certified_beta(self) -> bool:
        return self.beta_source == "exact"


def certify(epsilon: float, beta: float, rho: float, beta_source: str = "exact") -> ErrorCertificate:
    if not beta > 0:
        raise InvalidBeta(f"beta must be positive, got {beta}")
    if not rho > 0:
        raise ValueError(f"rho must be positive, got {rho}")
    if not epsilon >= 0:
        raise ValueError(f"epsilon must be nonnegative, got {epsilon}")
    tau = 4.0 * epsilon * rho / beta ** 2
    if tau <= 1.0:
        # 1 - sqrt(1 - tau) rewritten without cancellation for small tau
        delta = beta / (2.0 * rho) * (tau / (1.0 + math.sqrt(1.0 - tau)))
        return ErrorCertificate(epsilon, beta, rho, tau, delta, True, beta_source)
    return ErrorCertificate(epsilon, beta, rho, tau, float("nan"), False, beta_source)


def verify_theorem(certificate: ErrorCertificate, true_error: float, gamma: float | None = None) -> dict:
    """Compare a certificate with the true X-norm error.

    When ``gamma`` is given, the effectivity cap ``2 gamma / beta + tau`` is reported.
    """
    report = {"true_error": float(true_error), "defined": certificate.defined,
              "delta": certificate.delta_n, "tau": certificate.tau_n}
    if certificate.defined:
        report["bound_holds"] = bool(true_error <= certificate.delta_n)
        report["effectivity"] = (certificate.delta_n / true_error) if true_error > 0 else float("inf")
        certificate.effectivity = report["effectivity"]
    else:
        report["bound_holds"] = None
        report["effectivity"] = None
    if gamma is not None:
        certificate.gamma_n = gamma
        report["gamma"] = gamma
        report["effectivity_cap"] = 2.0 * gamma / certificate.beta_n + certificate.tau_n
    return report


def write_certificates(path, rows) -> None:
    """``rows``: iterable of ``(mu, certificate, true_error or None)``."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["rayleigh", "height", "epsilon_n", "beta_n", "rho_n", "tau_n", "delta_n",
                    "defined", "beta_source", "true_error", "effectivity"])
        for mu, c, err in rows:
            eff = c.delta_n / err if (c.defined and err) else ""
            w.writerow([f"{mu.rayleigh:.10g}", f"{mu.height:.10g}", f"{c.epsilon_n:.10e}",
                        f"{c.beta_n:.10e}", f"{c.rho_n:.10e}", f"{c.tau_n:.10e}",
                        "" if not c.defined else f"{c.delta_n:.10e}", int(c.defined),
                        c.beta_source, "" if err is None else f"{err:.10e}",
                        eff if eff == "" else f"{eff:.6e}"])
