"""Structured triangulations of the unit square and uniform red refinement.

Meshes are immutable value objects. A refined mesh keeps a link to its parent
together with the child-to-parent triangle map, which is all the two-grid
machinery needs to evaluate coarse basis functions on a fine mesh.

Example
-------
>>> m = refine_uniform(unit_square_mesh(1))
>>> m.n_vertices, m.n_triangles
(9, 8)
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import Optional

import numpy as np


@dataclass(frozen=True, eq=False)
class TriMesh:
    """Conforming triangulation of [0, 1]^2.

    Attributes
    ----------
    vertices : (n_v, 2) float array
    triangles : (n_t, 3) int array, counterclockwise
    level : number of red refinements since the root mesh
    parent : the mesh this one refines, if any
    parent_triangle : (n_t,) int array, index of the parent triangle of each child
    """

    vertices: np.ndarray
    triangles: np.ndarray
    level: int = 0
    parent: Optional["TriMesh"] = field(default=None, repr=False)
    parent_triangle: Optional[np.ndarray] = field(default=None, repr=False)

    def __post_init__(self):
        self.vertices.setflags(write=False)
        self.triangles.setflags(write=False)
        if self.parent_triangle is not None:
            self.parent_triangle.setflags(write=False)

    @property
    def n_vertices(self) -> int:
        return self.vertices.shape[0]

    @property
    def n_triangles(self) -> int:
        return self.triangles.shape[0]

    @cached_property
    def boundary_vertices(self) -> np.ndarray:
        v = self.vertices
        on = (v[:, 0] == 0.0) | (v[:, 0] == 1.0) | (v[:, 1] == 0.0) | (v[:, 1] == 1.0)
        return np.flatnonzero(on)

    @cached_property
    def _edge_data(self):
        # local edge k joins local vertices (k, k+1 mod 3)
        t = self.triangles
        pairs = np.stack([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]], axis=1).reshape(-1, 2)
        pairs = np.sort(pairs, axis=1)
        edges, inverse = np.unique(pairs, axis=0, return_inverse=True)
        return edges, inverse.reshape(-1, 3)

    @property
    def edges(self) -> np.ndarray:
        """(n_e, 2) sorted vertex pairs, lexicographically ordered."""
        return self._edge_data[0]

    @property
    def triangle_edges(self) -> np.ndarray:
        """(n_t, 3) edge index of local edges (0,1), (1,2), (2,0)."""
        return self._edge_data[1]

    @property
    def n_edges(self) -> int:
        return self.edges.shape[0]

    @cached_property
    def signed_areas(self) -> np.ndarray:
        p = self.vertices[self.triangles]
        d1 = p[:, 1] - p[:, 0]
        d2 = p[:, 2] - p[:, 0]
        return 0.5 * (d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0])

    @cached_property
    def h_max(self) -> float:
        e = self.vertices[self.edges]
        return float(np.max(np.linalg.norm(e[:, 1] - e[:, 0], axis=1)))

    @property
    def spacing(self) -> float:
        """Structured grid spacing 1/n (the ``h`` or ``H`` of a level)."""
        return self.h_max / np.sqrt(2.0)

    def ancestor_triangles(self, ancestor: "TriMesh") -> np.ndarray:
        """Index into ``ancestor.triangles`` of the triangle containing each triangle."""
        idx = np.arange(self.n_triangles)
        m = self
        while m is not ancestor:
            if m.parent is None:
                raise ValueError("mesh is not a refinement of the given ancestor")
            idx = m.parent_triangle[idx]
            m = m.parent
        return idx

    def is_refinement_of(self, other: "TriMesh") -> bool:
        m = self
        while m is not None:
            if m is other:
                return True
            m = m.parent
        return False


def unit_square_mesh(n: int) -> TriMesh:
    """Structured n x n mesh, each cell cut from bottom-left to top-right."""
    if int(n) != n or n < 1:
        raise ValueError(f"n must be a positive integer, got {n!r}")
    n = int(n)
    s = np.arange(n + 1) / n
    x, y = np.meshgrid(s, s)
    vertices = np.column_stack([x.ravel(), y.ravel()])
    i, j = np.meshgrid(np.arange(n), np.arange(n))
    v00 = (j * (n + 1) + i).ravel()
    v10 = v00 + 1
    v01 = v00 + n + 1
    v11 = v01 + 1
    lower = np.column_stack([v00, v10, v11])
    upper = np.column_stack([v00, v11, v01])
    triangles = np.stack([lower, upper], axis=1).reshape(-1, 3)
    return TriMesh(vertices, triangles)


def refine_uniform(m: TriMesh) -> TriMesh:
    """Red refinement: split each triangle into four through its edge midpoints.

    Old vertices keep their indices; the midpoint of edge ``e`` becomes vertex
    ``n_vertices + e``. Children of triangle ``k`` are ``4k .. 4k+3``.
    """
    nv = m.n_vertices
    mid = 0.5 * (m.vertices[m.edges[:, 0]] + m.vertices[m.edges[:, 1]])
    vertices = np.vstack([m.vertices, mid])
    a, b, c = m.triangles.T
    mab, mbc, mca = (nv + m.triangle_edges).T
    children = np.stack(
        [
            np.column_stack([a, mab, mca]),
            np.column_stack([mab, b, mbc]),
            np.column_stack([mca, mbc, c]),
            np.column_stack([mab, mbc, mca]),
        ],
        axis=1,
    ).reshape(-1, 3)
    parent_triangle = np.repeat(np.arange(m.n_triangles), 4)
    return TriMesh(vertices, children, m.level + 1, m, parent_triangle)


class MeshFamily:
    """Lazily built nested family; ``family[k]`` is the level-k mesh with spacing 1/(n0 2^k).

    Every space built on one family shares mesh objects, which is how nesting
    is detected.
    """

    def __init__(self, n0: int = 1):
        self._meshes = [unit_square_mesh(n0)]

    def __getitem__(self, level: int) -> TriMesh:
        if level < 0:
            raise IndexError(level)
        while len(self._meshes) <= level:
            self._meshes.append(refine_uniform(self._meshes[-1]))
        return self._meshes[level]

    def level_of(self, m: TriMesh) -> int:
        for k, mk in enumerate(self._meshes):
            if mk is m:
                return k
        raise ValueError("mesh does not belong to this family")


def min_angle(m: TriMesh) -> float:
    """Smallest interior angle over all triangles, in degrees."""
    p = m.vertices[m.triangles]
    angles = []
    for k in range(3):
        u = p[:, (k + 1) % 3] - p[:, k]
        v = p[:, (k + 2) % 3] - p[:, k]
        cos = np.sum(u * v, axis=1) / (np.linalg.norm(u, axis=1) * np.linalg.norm(v, axis=1))
        angles.append(np.degrees(np.arccos(np.clip(cos, -1.0, 1.0))))
    return float(np.min(angles))


def mesh_stats(m: TriMesh) -> dict:
    return {
        "level": m.level,
        "h_max": m.h_max,
        "n_vertices": m.n_vertices,
        "n_triangles": m.n_triangles,
        "min_angle": min_angle(m),
    }
