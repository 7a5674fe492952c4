"""Empirical interpolation of the eddy-viscosity field.

Fields are sampled at the quadrature points of the mesh.  The greedy build
picks, at every iteration, the training field worst reproduced by the current
interpolant (sup norm), places a magic point where that residual peaks and
appends the residual, normalised to one at the new point, to the basis.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import solve_triangular

__all__ = ["DegenerateSnapshot", "EIMApproximation", "eim_build", "eim_coefficients",
           "write_training_curve"]


class DegenerateSnapshot(RuntimeError):
    """Selected residual vanished before the tolerance was reached."""


@dataclass(eq=False)
class EIMApproximation:
    """Basis fields ``q_k`` (rows of ``basis``) with their magic points.

    ``training_errors[m - 1]`` is the largest sup-norm training error with
    ``m`` basis fields; ``initial_error`` the largest field sup norm.
    """

    basis: np.ndarray
    magic_points: np.ndarray
    training_errors: list = field(default_factory=list)
    selected: list = field(default_factory=list)
    initial_error: float = float("nan")
    tol: float = float("nan")

    @property
    def size(self) -> int:
        return len(self.magic_points)

    @property
    def interpolation_matrix(self) -> np.ndarray:
        """``B[i, j] = q_j(x_i)``; unit lower triangular by construction."""
        return self.basis[:, self.magic_points].T.copy()

    def coefficients(self, values_at_magic_points) -> np.ndarray:
        return eim_coefficients(self, values_at_magic_points)

    def interpolate(self, field_values) -> np.ndarray:
        """Interpolant of a full quadrature-point field."""
        field_values = np.asarray(field_values, dtype=float)
        return self.coefficients(field_values[..., self.magic_points]) @ self.basis

    def truncated(self, m: int) -> "EIMApproximation":
        return EIMApproximation(self.basis[:m].copy(), self.magic_points[:m].copy(),
                                list(self.training_errors[:m]), list(self.selected[:m]),
                                self.initial_error, self.tol)


def eim_coefficients(eim: EIMApproximation, values) -> np.ndarray:
    """Solve the unit lower-triangular interpolation system for ``sigma``.

    ``values`` may be an ``M``-vector or an array of shape ``(k, M)``.
    """
    values = np.asarray(values, dtype=float)
    if eim.size == 0:
        return np.zeros(values.shape[:-1] + (0,))
    B = eim.interpolation_matrix
    sol = solve_triangular(B, values.T, lower=True, unit_diagonal=True)
    return sol.T


def _sample_fields(provider, training_set):
    if callable(provider):
        return np.array([np.asarray(provider(mu), dtype=float) for mu in training_set])
    return np.asarray(provider, dtype=float)


def eim_build(snapshot_provider, training_set, tol: float, max_m: int = 100) -> EIMApproximation:
    """Greedy EIM on quadrature-point fields.

    Parameters
    ----------
    snapshot_provider : callable or array
        Either ``mu -> field`` or a precomputed array ``(len(training_set), n_points)``.
    training_set : sequence
        Parameters, used for bookkeeping (and sampling when a callable is given).
    tol : float
        Stop once the largest training sup-norm error falls below ``tol``.
    max_m : int
        Maximum number of basis fields.
    """
    if len(training_set) == 0:
        raise ValueError("training set is empty")
    if not tol > 0:
        raise ValueError("tol must be positive")
    fields = _sample_fields(snapshot_provider, training_set)
    if fields.ndim != 2 or len(fields) != len(training_set):
        raise ValueError("need one field per training parameter")

    scale = np.abs(fields).max()
    residual = fields.copy()
    sup = np.abs(residual).max(axis=1)
    basis, points, errors, selected = [], [], [], []
    eim = EIMApproximation(np.zeros((0, fields.shape[1])), np.zeros(0, dtype=np.int64),
                           initial_error=float(sup.max()), tol=tol)
    current = float(sup.max())
    while current >= tol and len(points) < max_m:
        k = int(np.argmax(sup))
        r = residual[k]
        if sup[k] <= 1e3 * np.finfo(float).eps * max(scale, np.finfo(float).tiny):
            raise DegenerateSnapshot(
                f"residual of training field {k} is {sup[k]:.3e}; training set too small "
                f"for tolerance {tol:.1e}")
        x = int(np.argmax(np.abs(r)))
        q = r / r[x]
        basis.append(q)
        points.append(x)
        selected.append(k)
        # the new interpolant differs from the old one by (residual at x) * q
        residual -= np.outer(residual[:, x], q)
        residual[:, points] = 0.0  # exact interpolation at the magic points
        sup = np.abs(residual).max(axis=1)
        current = float(sup.max())
        errors.append(current)
    eim.basis = np.array(basis).reshape(len(basis), fields.shape[1])
    eim.magic_points = np.array(points, dtype=np.int64)
    eim.training_errors = errors
    eim.selected = selected
    return eim


def write_training_curve(path, eim: EIMApproximation) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iteration", "sup_norm_error"])
        for m, e in enumerate(eim.training_errors, start=1):
            w.writerow([m, f"{e:.10e}"])
