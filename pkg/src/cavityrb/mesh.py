"""Uniform triangulation of the reference unit square and the height map.

The reference cavity is ``[0, 1]^2``.  A cavity of height ``mu_g`` is obtained
by stretching the vertical coordinate, ``(x, y) -> (x, mu_g * y)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "ParameterPoint",
    "ParameterBox",
    "UniformMesh",
    "build_uniform_mesh",
    "map_to_original",
    "jacobian",
    "write_vtk",
]

_TAG_TOL = 1e-12


@dataclass(frozen=True)
class ParameterPoint:
    """Physical/geometric parameter pair ``(Ra, mu_g)``."""

    rayleigh: float
    height: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "rayleigh", float(self.rayleigh))
        object.__setattr__(self, "height", float(self.height))
        if not self.rayleigh >= 0.0:
            raise ValueError(f"rayleigh must be >= 0, got {self.rayleigh}")
        if not self.height > 0.0:
            raise ValueError(f"height must be > 0, got {self.height}")

    def as_tuple(self):
        return (float(self.rayleigh), float(self.height))


@dataclass(frozen=True)
class ParameterBox:
    """Axis-aligned parameter domain ``[Ra_min, Ra_max] x [h_min, h_max]``."""

    rayleigh: tuple = (1e3, 1e4)
    height: tuple = (1.0, 1.0)

    def __post_init__(self):
        lo, hi = self.rayleigh
        if not 0 < lo <= hi:
            raise ValueError(f"invalid Rayleigh range {self.rayleigh}")
        lo, hi = self.height
        if not 0 < lo <= hi:
            raise ValueError(f"invalid height range {self.height}")

    def contains(self, mu: ParameterPoint, rtol: float = 1e-12) -> bool:
        ra_lo, ra_hi = self.rayleigh
        h_lo, h_hi = self.height
        return (ra_lo * (1 - rtol) <= mu.rayleigh <= ra_hi * (1 + rtol)
                and h_lo * (1 - rtol) <= mu.height <= h_hi * (1 + rtol))

    @property
    def varies_rayleigh(self) -> bool:
        return self.rayleigh[1] > self.rayleigh[0]

    @property
    def varies_height(self) -> bool:
        return self.height[1] > self.height[0]

    def scaled(self, mu: ParameterPoint) -> np.ndarray:
        """Coordinates in ``[0, 1]^2``: log-scaled Rayleigh, linear height."""
        ra_lo, ra_hi = self.rayleigh
        h_lo, h_hi = self.height
        s = np.zeros(2)
        if ra_hi > ra_lo:
            s[0] = np.log(mu.rayleigh / ra_lo) / np.log(ra_hi / ra_lo)
        if h_hi > h_lo:
            s[1] = (mu.height - h_lo) / (h_hi - h_lo)
        return s

    def grid(self, n_rayleigh: int, n_height: int = 1) -> list:
        """Tensor grid, log-spaced in Ra and uniform in height."""
        ra = np.geomspace(*self.rayleigh, n_rayleigh) if self.varies_rayleigh else [self.rayleigh[0]]
        hs = np.linspace(*self.height, n_height) if self.varies_height else [self.height[0]]
        return [ParameterPoint(float(r), float(h)) for h in hs for r in ra]

    def sample(self, n: int, rng: np.random.Generator) -> list:
        """Random points, log-uniform in Ra and uniform in height."""
        u = rng.random((n, 2))
        ra_lo, ra_hi = self.rayleigh
        h_lo, h_hi = self.height
        ra = ra_lo * (ra_hi / ra_lo) ** u[:, 0]
        hs = h_lo + (h_hi - h_lo) * u[:, 1]
        return [ParameterPoint(float(r), float(h)) for r, h in zip(ra, hs)]


@dataclass(frozen=True, eq=False)
class UniformMesh:
    """Uniform right-triangle mesh of the unit square.

    Every square cell is split along its lower-left to upper-right diagonal.
    ``edges`` holds the sorted vertex pairs of all mesh edges and
    ``boundary_edges`` maps a side name to the indices of edges on that side.
    """

    divisions_per_side: int
    vertices: np.ndarray
    triangles: np.ndarray
    edges: np.ndarray
    triangle_edges: np.ndarray
    boundary_edges: dict = field(default_factory=dict)

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_triangles(self) -> int:
        return len(self.triangles)

    @property
    def n_edges(self) -> int:
        return len(self.edges)

    @property
    def h(self) -> float:
        """Reference cell diameter ``sqrt(2) / N_h``."""
        return np.sqrt(2.0) / self.divisions_per_side

    def signed_areas(self, height: float = 1.0) -> np.ndarray:
        p = map_to_original(self.vertices, height)
        a, b, c = p[self.triangles[:, 0]], p[self.triangles[:, 1]], p[self.triangles[:, 2]]
        return 0.5 * ((b[:, 0] - a[:, 0]) * (c[:, 1] - a[:, 1])
                      - (b[:, 1] - a[:, 1]) * (c[:, 0] - a[:, 0]))

    def boundary_vertices(self, *sides: str) -> np.ndarray:
        sides = sides or ("left", "right", "bottom", "top")
        idx = [self.edges[self.boundary_edges[s]].ravel() for s in sides]
        return np.unique(np.concatenate(idx))

    def describe(self) -> dict:
        return {"kind": "uniform-unit-square", "divisions_per_side": self.divisions_per_side,
                "diagonal": "lower-left-to-upper-right"}


def build_uniform_mesh(divisions_per_side: int) -> UniformMesh:
    """Triangulate the unit square with ``divisions_per_side`` cells per side."""
    n = int(divisions_per_side)
    if n != divisions_per_side or n < 2:
        raise ValueError(f"divisions_per_side must be an integer >= 2, got {divisions_per_side}")

    xs = np.linspace(0.0, 1.0, n + 1)
    X, Y = np.meshgrid(xs, xs, indexing="xy")
    vertices = np.column_stack([X.ravel(), Y.ravel()])

    i, j = np.meshgrid(np.arange(n), np.arange(n), indexing="xy")
    v00 = (i + j * (n + 1)).ravel()
    v10 = v00 + 1
    v01 = v00 + n + 1
    v11 = v01 + 1
    lower = np.column_stack([v00, v10, v11])
    upper = np.column_stack([v00, v11, v01])
    triangles = np.empty((2 * n * n, 3), dtype=np.int64)
    triangles[0::2] = lower
    triangles[1::2] = upper

    # local edge k joins local vertices (k, k+1 mod 3)
    local = np.stack([triangles[:, [0, 1]], triangles[:, [1, 2]], triangles[:, [2, 0]]], axis=1)
    keys = np.sort(local.reshape(-1, 2), axis=1)
    edges, inverse = np.unique(keys, axis=0, return_inverse=True)
    triangle_edges = inverse.reshape(-1, 3)

    mid = vertices[edges].mean(axis=1)
    both = vertices[edges]
    tags = {}
    for name, axis, value in (("left", 0, 0.0), ("right", 0, 1.0), ("bottom", 1, 0.0), ("top", 1, 1.0)):
        on = np.all(np.abs(both[:, :, axis] - value) < _TAG_TOL, axis=1)
        tags[name] = np.flatnonzero(on & (np.abs(mid[:, axis] - value) < _TAG_TOL))

    return UniformMesh(n, vertices, triangles, edges, triangle_edges, tags)


def map_to_original(point, height: float) -> np.ndarray:
    """Map reference coordinates to the cavity of the given height."""
    p = np.array(point, dtype=float)
    p[..., 1] = p[..., 1] * height
    return p


def jacobian(height: float):
    """Jacobian matrix and determinant of the (linear) height map."""
    return np.diag([1.0, float(height)]), float(height)


def write_vtk(path, mesh: UniformMesh, height: float = 1.0, point_data: dict | None = None,
              title: str = "cavityrb") -> None:
    """Write a legacy-VTK ASCII unstructured grid with optional vertex fields.

    ``point_data`` maps names to arrays of shape ``(n_vertices,)`` (scalars)
    or ``(n_vertices, 2)`` (vectors, padded with a zero third component).
    """
    pts = map_to_original(mesh.vertices, height)
    lines = ["# vtk DataFile Version 3.0", title, "ASCII", "DATASET UNSTRUCTURED_GRID",
             f"POINTS {mesh.n_vertices} double"]
    lines += [f"{x:.17g} {y:.17g} 0" for x, y in pts]
    nt = mesh.n_triangles
    lines.append(f"CELLS {nt} {4 * nt}")
    lines += [f"3 {a} {b} {c}" for a, b, c in mesh.triangles]
    lines.append(f"CELL_TYPES {nt}")
    lines += ["5"] * nt
    if point_data:
        lines.append(f"POINT_DATA {mesh.n_vertices}")
        for name, values in point_data.items():
            values = np.asarray(values, dtype=float)
            if values.ndim == 1:
                lines += [f"SCALARS {name} double 1", "LOOKUP_TABLE default"]
                lines += [f"{v:.17g}" for v in values]
            else:
                lines.append(f"VECTORS {name} double")
                lines += [f"{a:.17g} {b:.17g} 0" for a, b in values[:, :2]]
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
