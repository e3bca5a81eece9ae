"""Periodic hypercubic cell complex in 3 or 4 dimensions.

Cells of dimension ``k`` are keyed by a base vertex ``v`` in ``Z_L^D`` and a
sorted subset of ``k`` axes. Bit arrays over a cell class use the tensor
layout ``(L, ..., L, C)`` where the channel ``C`` enumerates the axis subsets
lexicographically. The canonical integer index of a cell is
``channel * L**D + ravel(base)`` (axes subset major, last coordinate fastest).
"""
from __future__ import annotations

import functools
import itertools
from dataclasses import dataclass
from math import comb

import numpy as np

KIND_NAMES = ("vertex", "edge", "face", "cube", "hypercube")


@dataclass(frozen=True)
class LatticeGeometry:
    dim: int
    size: int

    def __post_init__(self):
        if self.dim not in (3, 4):
            raise ValueError(f"dimension must be 3 or 4, got {self.dim}")
        if self.size < 2:
            raise ValueError(f"side length must be >= 2, got {self.size}")

    @property
    def sites(self) -> int:
        return self.size ** self.dim

    @property
    def site_shape(self) -> tuple[int, ...]:
        return (self.size,) * self.dim

    def axes_subsets(self, k: int) -> tuple[tuple[int, ...], ...]:
        return _axes_subsets(self.dim, k)

    def channels(self, k: int) -> int:
        return comb(self.dim, k)

    def cell_count(self, k: int) -> int:
        if not 0 <= k <= self.dim:
            raise ValueError(f"cell dimension {k} out of range for D={self.dim}")
        return comb(self.dim, k) * self.sites

    def shape(self, k: int) -> tuple[int, ...]:
        """Tensor shape of a bit array over k-cells."""
        return self.site_shape + (self.channels(k),)

    @property
    def n_edges(self) -> int:
        return self.cell_count(1)

    @property
    def n_faces(self) -> int:
        return self.cell_count(2)

    @property
    def face_axes(self) -> tuple[tuple[int, int], ...]:
        return self.axes_subsets(2)

    def face_channel(self, i: int, j: int) -> int:
        return self.face_axes.index((min(i, j), max(i, j)))

    # -- index bijection -------------------------------------------------
    def to_index(self, cell: CellIndex) -> int:
        self.check(cell)
        channel = self.axes_subsets(cell.kind).index(cell.axes)
        flat = int(np.ravel_multi_index(cell.base, self.site_shape))
        return channel * self.sites + flat

    def from_index(self, kind: int, index: int) -> CellIndex:
        n = self.cell_count(kind)
        if not 0 <= index < n:
            raise IndexError(f"{KIND_NAMES[kind]} index {index} out of range [0, {n})")
        channel, flat = divmod(int(index), self.sites)
        base = tuple(int(c) for c in np.unravel_index(flat, self.site_shape))
        return CellIndex(kind, base, self.axes_subsets(kind)[channel])

    def cell(self, kind: int, base, axes=()) -> CellIndex:
        """Build a cell with coordinates reduced modulo L."""
        base = tuple(int(c) % self.size for c in base)
        return CellIndex(kind, base, tuple(sorted(axes)))

    def check(self, cell: CellIndex) -> None:
        if not 0 <= cell.kind <= self.dim or cell.kind >= len(KIND_NAMES):
            raise IndexError(f"invalid cell kind {cell.kind}")
        if len(cell.base) != self.dim or any(not 0 <= c < self.size for c in cell.base):
            raise IndexError(f"base {cell.base} out of range for L={self.size}, D={self.dim}")
        if cell.axes not in self.axes_subsets(cell.kind):
            raise IndexError(f"axes {cell.axes} invalid for a {KIND_NAMES[cell.kind]} in D={self.dim}")

    def shift(self, cell: CellIndex, t) -> CellIndex:
        return self.cell(cell.kind, np.add(cell.base, t), cell.axes)


@dataclass(frozen=True)
class CellIndex:
    kind: int
    base: tuple[int, ...]
    axes: tuple[int, ...] = ()


@dataclass(frozen=True)
class LogicalSheet:
    """Closed sheet of faces spanning the (i, j) plane at a fixed transverse offset."""

    plane: tuple[int, int]
    offset: tuple[int, ...]

    def faces(self, geom: LatticeGeometry) -> list[CellIndex]:
        i, j = self.plane
        rest = [a for a in range(geom.dim) if a not in self.plane]
        out = []
        for xi, xj in itertools.product(range(geom.size), repeat=2):
            base = [0] * geom.dim
            base[i], base[j] = xi, xj
            for a, o in zip(rest, self.offset):
                base[a] = o
            out.append(geom.cell(2, base, self.plane))
        return out

    def mask(self, geom: LatticeGeometry) -> np.ndarray:
        bits = np.zeros(geom.shape(2), dtype=np.uint8)
        for f in self.faces(geom):
            bits[f.base + (geom.face_channel(*f.axes),)] = 1
        return bits


@functools.lru_cache(maxsize=None)
def _axes_subsets(dim: int, k: int) -> tuple[tuple[int, ...], ...]:
    return tuple(itertools.combinations(range(dim), k))


def _unit(geom: LatticeGeometry, axis: int, sign: int = 1) -> np.ndarray:
    e = np.zeros(geom.dim, dtype=int)
    e[axis] = sign
    return e


def _require(geom: LatticeGeometry, cell: CellIndex, kind: int) -> None:
    geom.check(cell)
    if cell.kind != kind:
        raise IndexError(f"expected a {KIND_NAMES[kind]}, got a {KIND_NAMES[cell.kind]}")


def face_boundary_edges(face: CellIndex, geom: LatticeGeometry) -> list[CellIndex]:
    """The four edges bounding a face: (v,i), (v,j), (v+e_j,i), (v+e_i,j)."""
    _require(geom, face, 2)
    i, j = face.axes
    v = np.array(face.base)
    return [
        geom.cell(1, v, (i,)),
        geom.cell(1, v, (j,)),
        geom.cell(1, v + _unit(geom, j), (i,)),
        geom.cell(1, v + _unit(geom, i), (j,)),
    ]


def edge_incident_faces(edge: CellIndex, geom: LatticeGeometry) -> list[CellIndex]:
    """Support of the X-check on an edge: 2(D-1) faces."""
    _require(geom, edge, 1)
    (d,) = edge.axes
    v = np.array(edge.base)
    out = []
    for k in range(geom.dim):
        if k == d:
            continue
        out.append(geom.cell(2, v, (d, k)))
        out.append(geom.cell(2, v - _unit(geom, k), (d, k)))
    return out


def cube_incident_faces(cube: CellIndex, geom: LatticeGeometry) -> list[CellIndex]:
    """Support of the Z-check on a cube: its six boundary squares."""
    _require(geom, cube, 3)
    v = np.array(cube.base)
    out = []
    for pair in itertools.combinations(cube.axes, 2):
        (third,) = [a for a in cube.axes if a not in pair]
        out.append(geom.cell(2, v, pair))
        out.append(geom.cell(2, v + _unit(geom, third), pair))
    return out


def vertex_incident_edges(vertex: CellIndex, geom: LatticeGeometry) -> list[CellIndex]:
    _require(geom, vertex, 0)
    v = np.array(vertex.base)
    out = []
    for d in range(geom.dim):
        out.append(geom.cell(1, v, (d,)))
        out.append(geom.cell(1, v - _unit(geom, d), (d,)))
    return out


def logical_sheets(geom: LatticeGeometry) -> list[LogicalSheet]:
    """One representative sheet per axis pair, at transverse offset zero."""
    return [LogicalSheet(plane, (0,) * (geom.dim - 2)) for plane in geom.face_axes]


# -- vectorized helpers over the (L, ..., L, C) layout ------------------------

def to_canonical(bits: np.ndarray, geom: LatticeGeometry) -> np.ndarray:
    """(*batch, L, ..., L, C) tensor -> (*batch, C * L**D) in canonical order."""
    batch = bits.shape[: bits.ndim - geom.dim - 1]
    return np.moveaxis(bits, -1, len(batch)).reshape(batch + (-1,))


def from_canonical(flat: np.ndarray, geom: LatticeGeometry) -> np.ndarray:
    """Inverse of :func:`to_canonical`; the channel count is inferred."""
    batch = flat.shape[:-1]
    channels = flat.shape[-1] // geom.sites
    return np.moveaxis(flat.reshape(batch + (channels,) + geom.site_shape), len(batch), -1)


def site_axis(geom: LatticeGeometry, axis: int) -> int:
    """Negative numpy axis of lattice axis ``axis`` in a (..., L^D, C) tensor."""
    return axis - geom.dim - 1


@functools.lru_cache(maxsize=None)
def face_edge_table(dim: int, size: int) -> np.ndarray:
    """Canonical edge indices of each face's boundary, shape (n_faces, 4).

    Row order is the canonical face order; columns follow
    :func:`face_boundary_edges`.
    """
    geom = LatticeGeometry(dim, size)
    coords = np.indices(geom.site_shape).reshape(dim, -1)
    rows = []
    for i, j in geom.face_axes:
        def edge(axis, step_axis=None):
            c = coords.copy()
            if step_axis is not None:
                c[step_axis] += 1
            return axis * geom.sites + np.ravel_multi_index(c, geom.site_shape, mode="wrap")
        rows.append(np.stack([edge(i), edge(j), edge(i, j), edge(j, i)], axis=1))
    table = np.concatenate(rows, axis=0)
    table.setflags(write=False)
    return table
