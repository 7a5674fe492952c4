"""X inner product on the constrained space: Riesz maps, whitening, dual norms.

The Gram matrix restricted to free dofs is block diagonal (two velocity
components, temperature, pressure), so it is factored by a dense Cholesky per
distinct block.  That is cheap at desk-scale meshes and gives the symmetric
factor needed to whiten residual vectors without squaring them.
"""

from __future__ import annotations

import numpy as np
import scipy.sparse as sp
from scipy.linalg import cho_solve, cholesky, solve_triangular

from .spaces import TaylorHoodSpace

__all__ = ["XInnerProduct"]


class XInnerProduct:
    """Coordinates ``c`` of the constrained space map to global vectors ``E @ c``.

    With ``zero_mean_pressure`` the pressure coordinates span the zero-mean
    subspace, which removes the constant-pressure kernel of the saddle point.
    """

    def __init__(self, space: TaylorHoodSpace, zero_mean_pressure: bool = False):
        self.space = space
        lay = space.layout
        n2, n1 = space.n_p2, space.n_p1
        vel = lay.velocity_free
        tem = lay.temperature_free
        n_vc = len(vel) // 2
        if not np.array_equal(vel[n_vc:] - n2, vel[:n_vc]):
            raise ValueError("velocity components must share their free nodes")
        comp_nodes = vel[:n_vc]
        self.zero_mean_pressure = zero_mean_pressure
        sel = lambda rows, size: sp.csr_matrix(
            (np.ones(len(rows)), (rows, np.arange(len(rows)))), (size, len(rows)))
        Ev = sel(comp_nodes, n2)
        Et = sel(tem, n2)
        Ep = space.zero_mean_basis() if zero_mean_pressure else sp.identity(n1, format="csr")
        self.embed = sp.block_diag([Ev, Ev, Et, Ep], format="csr")
        self.block_sizes = (n_vc, n_vc, len(tem), Ep.shape[1])
        K = space.K
        blocks = [(Ev.T @ K @ Ev).toarray(), (Et.T @ K @ Et).toarray(),
                  (Ep.T @ space.M1 @ Ep).toarray()]
        # lower factors: velocity (shared by both components), temperature, pressure
        self._chol = [cholesky(b, lower=True) for b in blocks]
        self._which = (0, 0, 1, 2)
        self.size = sum(self.block_sizes)
        self.gram = (self.embed.T @ space.X @ self.embed).tocsr()

    def _blocks(self, arr):
        out, start = [], 0
        for n in self.block_sizes:
            out.append(slice(start, start + n))
            start += n
        return out

    def restrict(self, global_vec):
        """Coordinates of a functional (global test vector) on the constrained space."""
        return self.embed.T @ global_vec

    def extend(self, coords):
        return self.embed @ coords

    def whiten(self, coords):
        """``L^{-1} r`` block by block; ``|whiten(r)|`` is the dual norm of ``r``."""
        coords = np.asarray(coords, dtype=float)
        out = np.empty_like(coords)
        for sl, k in zip(self._blocks(coords), self._which):
            out[sl] = solve_triangular(self._chol[k], coords[sl], lower=True)
        return out

    def unwhiten_transpose(self, coords):
        """``L^{-T} w`` (so that ``unwhiten_transpose(whiten(r)) = G^{-1} r``)."""
        coords = np.asarray(coords, dtype=float)
        out = np.empty_like(coords)
        for sl, k in zip(self._blocks(coords), self._which):
            out[sl] = solve_triangular(self._chol[k], coords[sl], lower=True, trans="T")
        return out

    def factor_times(self, coords, transpose=False):
        """``L c`` or ``L^T c``."""
        coords = np.asarray(coords, dtype=float)
        out = np.empty_like(coords)
        for sl, k in zip(self._blocks(coords), self._which):
            L = self._chol[k]
            out[sl] = (L.T if transpose else L) @ coords[sl]
        return out

    def riesz(self, coords):
        """Solve ``G z = r`` in coordinates."""
        coords = np.asarray(coords, dtype=float)
        out = np.empty_like(coords)
        for sl, k in zip(self._blocks(coords), self._which):
            out[sl] = cho_solve((self._chol[k], True), coords[sl])
        return out

    def dual_norm(self, global_residual) -> float:
        """X-dual norm of a functional given as a global test vector."""
        w = self.whiten(self.restrict(global_residual))
        return float(np.linalg.norm(w))
