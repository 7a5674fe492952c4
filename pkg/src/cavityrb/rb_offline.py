"""Offline stage: greedy reduced basis with supremizer enrichment.

Bases are kept orthonormal per component in the X inner product
(``H1_0`` seminorm for velocity and temperature, ``L2`` for pressure).
Enrichment at ``mu^k`` appends the velocity snapshot, then the supremizer of
the new pressure mode, so the velocity basis has twice the pressure size.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field

import numpy as np

from .certification import ErrorCertificate, certify, lipschitz_rho
from .mesh import ParameterBox, ParameterPoint
from .rb_online import NewtonDivergence, ReducedModel

__all__ = [
    "RedundantSnapshot",
    "GreedyStall",
    "ReducedBasisSpace",
    "orthonormalize",
    "project_operators",
    "GreedyCertifier",
    "GreedyResult",
    "rb_greedy",
    "write_greedy_log",
]


class RedundantSnapshot(RuntimeError):
    """A new vector is (numerically) in the span of the existing basis."""


class GreedyStall(RuntimeError):
    """The greedy picked a parameter it had already selected."""


@dataclass(eq=False)
class ReducedBasisSpace:
    velocity: np.ndarray
    temperature: np.ndarray
    pressure: np.ndarray
    parameters: list = field(default_factory=list)
    snapshots: list = field(default_factory=list)

    @classmethod
    def empty(cls, space) -> "ReducedBasisSpace":
        return cls(np.zeros((2 * space.n_p2, 0)), np.zeros((space.n_p2, 0)), np.zeros((space.n_p1, 0)))

    @property
    def n(self) -> int:
        return self.pressure.shape[1]

    def embed(self, space) -> np.ndarray:
        """Global matrix mapping reduced coefficients to full-order state vectors."""
        n2 = space.n_p2
        V, N = self.velocity.shape[1], self.n
        Y = np.zeros((space.layout.size, V + 2 * N))
        Y[:2 * n2, :V] = self.velocity
        Y[2 * n2:3 * n2, V:V + N] = self.temperature
        Y[3 * n2:, V + N:] = self.pressure
        return Y

    def coefficients(self, space, state) -> np.ndarray:
        """Component-wise X projections of a full-order state (fluctuation form)."""
        u, th, p = space.split(state)
        K, M1 = space.K, space.M1
        n2 = space.n_p2
        a = self.velocity[:n2].T @ (K @ u[:n2]) + self.velocity[n2:].T @ (K @ u[n2:])
        return np.concatenate([a, self.temperature.T @ (K @ th), self.pressure.T @ (M1 @ p)])


def orthonormalize(vectors, gram, existing=None, rel_tol: float = 1e-10) -> np.ndarray:
    """Modified Gram-Schmidt (two passes) in the inner product ``gram``.

    Returns ``existing`` with the orthonormalised new columns appended.  A column
    whose norm after projection drops below ``rel_tol`` times its original norm
    raises :class:`RedundantSnapshot`.
    """
    vectors = np.asarray(vectors, dtype=float)
    if vectors.ndim == 1:
        vectors = vectors[:, None]
    basis = np.zeros((vectors.shape[0], 0)) if existing is None else np.array(existing, dtype=float)
    for col in vectors.T:
        v = col.copy()
        norm0 = np.sqrt(max(v @ (gram @ v), 0.0))
        if norm0 == 0.0:
            raise RedundantSnapshot("zero vector")
        for _ in range(2):
            for k in range(basis.shape[1]):
                b = basis[:, k]
                v -= (b @ (gram @ v)) * b
        norm = np.sqrt(max(v @ (gram @ v), 0.0))
        if norm < rel_tol * norm0:
            raise RedundantSnapshot(f"relative norm after projection {norm / norm0:.2e}")
        basis = np.column_stack([basis, v / norm])
    return basis


# -- projection -----------------------------------------------------------------------

def _grow2(old, fn, shape):
    """Fill a matrix of ``shape`` reusing the ``old`` leading block."""
    out = np.empty(shape)
    oi, oj = old.shape if old is not None else (0, 0)
    ni, nj = shape
    if oi and oj:
        out[:oi, :oj] = old
    out[oi:, :] = fn(slice(oi, ni), slice(0, nj))
    out[:oi, oj:] = fn(slice(0, oi), slice(oj, nj))
    return out


def _grow3(old, fn, shape):
    out = np.empty(shape)
    o = old.shape if old is not None else (0, 0, 0)
    n = shape
    if all(o):
        out[:o[0], :o[1], :o[2]] = old
    out[o[0]:] = fn(slice(o[0], n[0]), slice(0, n[1]), slice(0, n[2]))
    out[:o[0], o[1]:] = fn(slice(0, o[0]), slice(o[1], n[1]), slice(0, n[2]))
    out[:o[0], :o[1], o[2]:] = fn(slice(0, o[0]), slice(0, o[1]), slice(o[2], n[2]))
    return out


def _grow_stack(old, fn, shape):
    """Stack of matrices ``(M, i, j)`` grown along the last two axes."""
    out = np.empty(shape)
    o = old.shape if old is not None else (shape[0], 0, 0)
    if o[1] and o[2]:
        out[:, :o[1], :o[2]] = old
    out[:, o[1]:, :] = fn(slice(o[1], shape[1]), slice(0, shape[2]))
    out[:, :o[1], o[2]:] = fn(slice(0, o[1]), slice(o[2], shape[2]))
    return out


def project_operators(basis: ReducedBasisSpace, forms, eim, previous: dict | None = None) -> dict:
    """Reduced matrices, tensors and EIM stacks on the current basis.

    With ``previous`` (the result for a leading sub-basis) only new rows,
    columns and slices are computed.
    """
    s = forms.space
    n2 = s.n_p2
    w = s.quad_weights
    Z, Phi, Xi = basis.velocity, basis.temperature, basis.pressure
    V, N = Z.shape[1], Phi.shape[1]
    Q = np.asarray(eim.basis)
    M = Q.shape[0]
    prev = previous or {}
    lift = s.lift

    Z1, Z2 = Z[:n2], Z[n2:]
    q = {
        "v1": s.V @ Z1, "v2": s.V @ Z2,
        "x1": s.Dx @ Z1, "x2": s.Dx @ Z2, "y1": s.Dy @ Z1, "y2": s.Dy @ Z2,
        "sx1": s.Dx_star @ Z1, "sx2": s.Dx_star @ Z2, "sy1": s.Dy_star @ Z1, "sy2": s.Dy_star @ Z2,
        "t": s.V @ Phi, "tx": s.Dx @ Phi, "ty": s.Dy @ Phi,
        "tsx": s.Dx_star @ Phi, "tsy": s.Dy_star @ Phi,
    }
    lx, ly = s.Dx @ lift, s.Dy @ lift
    lsx, lsy = s.Dx_star @ lift, s.Dy_star @ lift

    def gal(A, B):  # sum_q w A_i B_j
        return lambda si, sj: (A[:, si] * w[:, None]).T @ B[:, sj]

    def vel2(a, b):
        return lambda si, sj: gal(q[a + "1"], q[b + "1"])(si, sj) + gal(q[a + "2"], q[b + "2"])(si, sj)

    out = {}
    out["Aux"] = _grow2(prev.get("Aux"), vel2("x", "x"), (V, V))
    out["Auy"] = _grow2(prev.get("Auy"), vel2("y", "y"), (V, V))
    out["Atx"] = _grow2(prev.get("Atx"), gal(q["tx"], q["tx"]), (N, N))
    out["Aty"] = _grow2(prev.get("Aty"), gal(q["ty"], q["ty"]), (N, N))
    Pq = s.V1 @ Xi
    out["Bx"] = _grow2(prev.get("Bx"), lambda si, sj: -gal(Pq, q["x1"])(si, sj), (N, V))
    out["By"] = _grow2(prev.get("By"), lambda si, sj: -gal(Pq, q["y2"])(si, sj), (N, V))
    out["F"] = _grow2(prev.get("F"), lambda si, sj: -gal(q["v2"], q["t"])(si, sj), (V, N))
    out["f_lift"] = -(q["v2"] * w[:, None]).T @ (s.V @ lift)
    out["atx_lift"] = (q["tx"] * w[:, None]).T @ lx
    out["aty_lift"] = (q["ty"] * w[:, None]).T @ ly

    def conv_u(adv, d):
        def fn(si, sj, sk):
            A1 = q["v1"][:, si] * w[:, None]
            A2 = q["v2"][:, si] * w[:, None]
            W = q[adv][:, sj]
            return (np.einsum("qi,qj,qk->ijk", A1, W, q[d + "1"][:, sk], optimize=True)
                    + np.einsum("qi,qj,qk->ijk", A2, W, q[d + "2"][:, sk], optimize=True))
        return fn

    def conv_t(adv, d):
        def fn(si, sj, sk):
            A = q["t"][:, si] * w[:, None]
            return np.einsum("qi,qj,qk->ijk", A, q[adv][:, sj], q[d][:, sk], optimize=True)
        return fn

    out["Cux"] = _grow3(prev.get("Cux"), conv_u("v1", "x"), (V, V, V))
    out["Cuy"] = _grow3(prev.get("Cuy"), conv_u("v2", "y"), (V, V, V))
    out["Ctx"] = _grow3(prev.get("Ctx"), conv_t("v1", "tx"), (N, V, N))
    out["Cty"] = _grow3(prev.get("Cty"), conv_t("v2", "ty"), (N, V, N))
    out["ctx_lift"] = (q["t"] * (w * lx)[:, None]).T @ q["v1"]
    out["cty_lift"] = (q["t"] * (w * ly)[:, None]).T @ q["v2"]

    WQ = Q * w[None, :]  # (M, nq)

    def smag_u(d):
        def fn(si, sj):
            return (np.einsum("sq,qi,qj->sij", WQ, q[d + "1"][:, si], q[d + "1"][:, sj], optimize=True)
                    + np.einsum("sq,qi,qj->sij", WQ, q[d + "2"][:, si], q[d + "2"][:, sj], optimize=True))
        return fn

    def smag_t(d):
        return lambda si, sj: np.einsum("sq,qi,qj->sij", WQ, q[d][:, si], q[d][:, sj], optimize=True)

    out["Sux"] = _grow_stack(prev.get("Sux"), smag_u("sx"), (M, V, V))
    out["Suy"] = _grow_stack(prev.get("Suy"), smag_u("sy"), (M, V, V))
    out["Stx"] = _grow_stack(prev.get("Stx"), smag_t("tsx"), (M, N, N))
    out["Sty"] = _grow_stack(prev.get("Sty"), smag_t("tsy"), (M, N, N))
    out["stx_lift"] = WQ @ (q["tsx"] * lsx[:, None])
    out["sty_lift"] = WQ @ (q["tsy"] * lsy[:, None])
    mp = np.asarray(eim.magic_points, dtype=np.int64)
    out["G"] = np.stack([q["sx1"][mp], q["sy1"][mp], q["sx2"][mp], q["sy2"][mp]])
    return out


# -- greedy ---------------------------------------------------------------------------------

@dataclass
class GreedyCertifier:
    """What the greedy needs to certify a candidate.

    ``epsilon(mu, state)`` returns the residual dual norm of a full-order state
    (the reduced solution embedded in the full space); ``beta(mu)`` the
    inf-sup estimate.
    """

    constants: object
    beta: object
    epsilon: object
    beta_source: str = "surrogate"


@dataclass
class GreedyResult:
    basis: ReducedBasisSpace
    operators: dict
    model: ReducedModel
    log: list
    converged: bool
    certificates: list = field(default_factory=list)


def _pick_center(box: ParameterBox, training):
    s = np.array([box.scaled(mu) for mu in training])
    target = np.array([0.5 if box.varies_rayleigh else 0.0, 0.5 if box.varies_height else 0.0])
    return int(np.argmin(np.linalg.norm(s - target, axis=1)))


def rb_greedy(training_set, tol_rb: float, n_max: int, eim, certifier, *, fom, fom_config,
              box: ParameterBox, snapshot_cache: dict | None = None, newton_tol=1e-12,
              progress=None) -> GreedyResult:
    """Greedy construction driven by the certificate indicator.

    ``certifier`` supplies ``beta(mu)`` (surrogate or exact), ``constants`` for
    ``rho`` and ``epsilon(mu, state)`` (true residual dual norm of a full-order
    state).  The indicator is ``Delta_N`` where ``tau_N <= 1`` and ``tau_N``
    elsewhere.
    """
    if not training_set:
        raise ValueError("empty training set")
    space, forms = fom.space, fom.forms
    cache = {} if snapshot_cache is None else snapshot_cache
    basis = ReducedBasisSpace.empty(space)
    K2 = _block2(space.K)
    ops = None
    log = []
    t0 = time.perf_counter()
    selected = []
    pick = _pick_center(box, training_set)
    warm = {}
    converged = False
    certificates = []
    while True:
        mu = training_set[pick]
        key = mu.as_tuple()
        if key in [m.as_tuple() for m in selected]:
            raise GreedyStall(f"parameter {mu} selected twice")
        if key not in cache:
            cache[key] = fom.solve(mu, fom_config).vector()
        state = cache[key]
        u, th, p = space.split(state)
        pres = orthonormalize(p, space.M1, basis.pressure)
        vel = orthonormalize(u, K2, basis.velocity)
        sup = fom.solve_supremizer(pres[:, -1], mu.height)
        vel = orthonormalize(sup, K2, vel)
        tem = orthonormalize(th, space.K, basis.temperature)
        basis = ReducedBasisSpace(vel, tem, pres, basis.parameters + [mu], basis.snapshots + [state])
        selected.append(mu)
        ops = project_operators(basis, forms, eim, ops)
        coeffs = np.array([basis.coefficients(space, x) for x in basis.snapshots])
        model = ReducedModel(ops, eim.interpolation_matrix, prandtl=forms.prandtl, c_s=forms.c_s,
                             n_h=space.mesh.divisions_per_side, box=box,
                             snapshot_parameters=basis.parameters, snapshot_coeffs=coeffs,
                             constants=certifier.constants, beta=certifier.beta, basis=basis)
        Y = basis.embed(space)
        indicators, certificates = [], []
        max_delta, max_tau = 0.0, 0.0
        for i, m in enumerate(training_set):
            init = warm.get(i)
            if init is not None:
                init = _pad(init, model, basis)
            try:
                sol = model.solve(m, newton_tol, initial=init)
            except NewtonDivergence:
                indicators.append(np.inf)
                certificates.append(None)
                max_tau = np.inf
                continue
            warm[i] = (sol.coefficients, basis.velocity.shape[1], basis.n)
            eps = certifier.epsilon(m, Y @ sol.coefficients)
            cert = certify(eps, certifier.beta(m), lipschitz_rho(m.height, certifier.constants),
                           certifier.beta_source)
            certificates.append(cert)
            indicators.append(cert.indicator)
            max_tau = max(max_tau, cert.tau_n)
            if cert.defined:
                max_delta = max(max_delta, cert.delta_n)
        indicators = np.array(indicators)
        worst = int(np.argmax(indicators))
        row = {"n": basis.n, "rayleigh": mu.rayleigh, "height": mu.height,
               "max_indicator": float(indicators[worst]), "max_delta": max_delta,
               "max_tau": max_tau, "all_defined": bool(all(c is not None and c.defined for c in certificates)),
               "wall_time": time.perf_counter() - t0}
        log.append(row)
        if progress:
            progress(row)
        if indicators[worst] < tol_rb:
            converged = True
            break
        if basis.n >= n_max:
            break
        pick = worst
    return GreedyResult(basis, ops, model, log, converged, certificates)


def _pad(entry, model, basis):
    """Embed warm-start coefficients of a smaller basis into the current layout."""
    c, v_old, n_old = entry
    v_new, n_new = basis.velocity.shape[1], basis.n
    out = np.zeros(v_new + 2 * n_new)
    out[:v_old] = c[:v_old]
    out[v_new:v_new + n_old] = c[v_old:v_old + n_old]
    out[v_new + n_new:v_new + n_new + n_old] = c[v_old + n_old:]
    return out


def _block2(K):
    import scipy.sparse as sp
    return sp.block_diag([K, K], format="csr")


def write_greedy_log(path, log) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["N", "rayleigh", "height", "max_delta", "max_tau", "max_indicator", "wall_time_s"])
        for r in log:
            w.writerow([r["n"], f"{r['rayleigh']:.10g}", f"{r['height']:.10g}", f"{r['max_delta']:.10e}",
                        f"{r['max_tau']:.10e}", f"{r['max_indicator']:.10e}", f"{r['wall_time']:.3f}"])
