"""Error sampling, syndromes and logical classes for one CSS sector.

Only Z errors on faces and X checks on edges are simulated. Errors and
syndromes are uint8 bit tensors of shape ``(L, ..., L, C)``; every array
routine also accepts leading batch axes.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass
from math import comb

import numpy as np

from .lattice import LatticeGeometry, cube_incident_faces, face_edge_table, site_axis, to_canonical


class PreconditionError(ValueError):
    """An operation was called on an input violating its precondition."""


@dataclass
class ErrorConfig:
    geom: LatticeGeometry
    bits: np.ndarray

    def __post_init__(self):
        self.bits = np.asarray(self.bits, dtype=np.uint8)
        if self.bits.shape != self.geom.shape(2):
            raise ValueError(f"error bits have shape {self.bits.shape}, expected {self.geom.shape(2)}")

    @classmethod
    def zeros(cls, geom: LatticeGeometry) -> ErrorConfig:
        return cls(geom, np.zeros(geom.shape(2), dtype=np.uint8))

    @property
    def weight(self) -> int:
        return int(self.bits.sum())

    def copy(self) -> ErrorConfig:
        return ErrorConfig(self.geom, self.bits.copy())


@dataclass
class Syndrome:
    geom: LatticeGeometry
    bits: np.ndarray

    def __post_init__(self):
        self.bits = np.asarray(self.bits, dtype=np.uint8)
        if self.bits.shape != self.geom.shape(1):
            raise ValueError(f"syndrome bits have shape {self.bits.shape}, expected {self.geom.shape(1)}")

    @property
    def weight(self) -> int:
        return int(self.bits.sum())

    def copy(self) -> Syndrome:
        return Syndrome(self.geom, self.bits.copy())


@dataclass(frozen=True)
class NoiseModel:
    p: float
    q: float = 0.0

    def __post_init__(self):
        _check_probability(self.p, "p")
        _check_probability(self.q, "q")


def _check_probability(x: float, name: str) -> None:
    if not 0.0 <= x <= 1.0:
        raise ValueError(f"{name}={x} is not a probability")


# -- array kernels -------------------------------------------------------------

def sample_error_bits(geom: LatticeGeometry, p: float, rng: np.random.Generator, batch=()) -> np.ndarray:
    _check_probability(p, "p")
    return (rng.random(tuple(batch) + geom.shape(2)) < p).astype(np.uint8)


def boundary(geom: LatticeGeometry, faces: np.ndarray) -> np.ndarray:
    """Edge parities of a face bit tensor (the X-check syndrome)."""
    out = np.zeros(faces.shape[:-1] + (geom.dim,), dtype=np.uint8)
    for c, (i, j) in enumerate(geom.face_axes):
        f = faces[..., c]
        # face (v,{i,j}) touches edges (v,i), (v+e_j,i), (v,j), (v+e_i,j)
        out[..., i] ^= f ^ np.roll(f, 1, axis=site_axis(geom, j) + 1)
        out[..., j] ^= f ^ np.roll(f, 1, axis=site_axis(geom, i) + 1)
    return out


def vertex_parity(geom: LatticeGeometry, edges: np.ndarray) -> np.ndarray:
    """Per-vertex parity of incident edge bits, shape (*batch, L, ..., L)."""
    out = np.zeros(edges.shape[:-1], dtype=np.uint8)
    for d in range(geom.dim):
        s = edges[..., d]
        out ^= s ^ np.roll(s, 1, axis=site_axis(geom, d) + 1)
    return out


def logical_class_bits(geom: LatticeGeometry, faces: np.ndarray, offset: tuple[int, int] = (0, 0)) -> np.ndarray:
    """Parity of overlap with the dual sheet crossing each (i, j) logical once.

    The dual set for plane (i, j) is every (i, j)-face with x_i, x_j fixed to
    ``offset``; it meets the primal (i, j) sheet in exactly one face and
    commutes with every cube check.
    """
    batch = faces.shape[: faces.ndim - geom.dim - 1]
    out = np.zeros(batch + (len(geom.face_axes),), dtype=np.uint8)
    for c, (i, j) in enumerate(geom.face_axes):
        f = faces[..., c]
        f = np.take(f, offset[1], axis=site_axis(geom, j) + 1)
        f = np.take(f, offset[0], axis=site_axis(geom, i) + 1 + 1)
        out[..., c] = f.reshape(batch + (-1,)).sum(axis=-1) & 1
    return out


# -- spec-level operations -----------------------------------------------------

def sample_error(geom: LatticeGeometry, p: float, rng: np.random.Generator) -> ErrorConfig:
    return ErrorConfig(geom, sample_error_bits(geom, p, rng))


def syndrome_of(error: ErrorConfig) -> Syndrome:
    return Syndrome(error.geom, boundary(error.geom, error.bits))


def syndrome_is_valid(s: Syndrome) -> bool:
    return not vertex_parity(s.geom, s.bits).any()


def apply_flips(error: ErrorConfig, flips) -> ErrorConfig:
    """Toggle the listed canonical face indices (repeats toggle repeatedly)."""
    geom = error.geom
    flips = np.asarray(flips, dtype=np.int64).reshape(-1)
    if flips.size and (flips.min() < 0 or flips.max() >= geom.n_faces):
        raise IndexError(f"face index out of range [0, {geom.n_faces})")
    toggles = (np.bincount(flips, minlength=geom.n_faces) & 1).astype(np.uint8)
    flat = to_canonical(error.bits, geom) ^ toggles
    bits = np.moveaxis(flat.reshape((len(geom.face_axes),) + geom.site_shape), 0, -1)
    return ErrorConfig(geom, bits)


def logical_failure(residual: ErrorConfig, offset: tuple[int, int] = (0, 0)) -> tuple[bool, np.ndarray]:
    geom = residual.geom
    if boundary(geom, residual.bits).any():
        raise PreconditionError("residual has a nonzero syndrome; classify only closed surfaces")
    classes = logical_class_bits(geom, residual.bits, offset)
    return bool(classes.any()), classes


def corrupt_syndrome(s: Syndrome, q: float, rng: np.random.Generator) -> Syndrome:
    _check_probability(q, "q")
    noise = (rng.random(s.bits.shape) < q).astype(np.uint8)
    return Syndrome(s.geom, s.bits ^ noise)


def cube_stabilizer(geom: LatticeGeometry, base, axes) -> ErrorConfig:
    cube = geom.cell(3, base, axes)
    bits = np.zeros(geom.shape(2), dtype=np.uint8)
    for f in cube_incident_faces(cube, geom):
        bits[f.base + (geom.face_channel(*f.axes),)] ^= 1
    return ErrorConfig(geom, bits)


# -- GF(2) linear algebra ------------------------------------------------------

def gf2_rank(matrix: np.ndarray) -> int:
    """Rank over GF(2) by row reduction on a uint8 copy."""
    a = (np.asarray(matrix) & 1).astype(np.uint8, copy=True)
    rows, cols = a.shape
    rank = 0
    for c in range(cols):
        if rank == rows:
            break
        pivots = np.nonzero(a[rank:, c])[0]
        if pivots.size == 0:
            continue
        p = rank + pivots[0]
        if p != rank:
            a[[rank, p]] = a[[p, rank]]
        others = np.nonzero(a[:, c])[0]
        others = others[others != rank]
        a[others] ^= a[rank]
        rank += 1
    return rank


def vertex_check_matrix(geom: LatticeGeometry) -> np.ndarray:
    """Rows: vertices; columns: canonical edges. Entry 1 if the edge meets the vertex."""
    coords = np.indices(geom.site_shape).reshape(geom.dim, -1)
    vertices = np.arange(geom.sites)
    h = np.zeros((geom.sites, geom.n_edges), dtype=np.uint8)
    for d in range(geom.dim):
        back = coords.copy()
        back[d] -= 1
        h[vertices, d * geom.sites + vertices] ^= 1
        h[vertices, d * geom.sites + np.ravel_multi_index(back, geom.site_shape, mode="wrap")] ^= 1
    return h


def syndrome_code_rank(geom: LatticeGeometry) -> int:
    """Number of independent vertex parity checks on the syndrome (L^4 - 1 in 4D)."""
    if geom.size > 4:
        raise MemoryError(f"GF(2) elimination at L={geom.size} exceeds the L<=4 resource guard")
    return gf2_rank(vertex_check_matrix(geom))


# -- bounded-weight exhaustive decoder (test oracle) ------------------------------

def exhaustive_oracle_decode(s: Syndrome, w_max: int, max_combinations: int = 5_000_000) -> ErrorConfig | None:
    """Minimum-weight error with syndrome ``s`` among weights <= w_max.

    Candidates are enumerated by weight, then lexicographically by canonical
    face index, so ties resolve to the canonically smallest set.
    """
    geom = s.geom
    if w_max > 3:
        raise ValueError("exhaustive oracle supports w_max <= 3")
    n = geom.n_faces
    total = sum(comb(n, w) for w in range(w_max + 1))
    if total > max_combinations:
        raise MemoryError(f"{total} candidate errors exceed the guard of {max_combinations}")

    table = face_edge_table(geom.dim, geom.size)
    masks = [sum(1 << int(e) for e in row) for row in table]
    target_flat = to_canonical(s.bits, geom)
    target = sum(1 << int(e) for e in np.nonzero(target_flat)[0])

    for w in range(w_max + 1):
        for combo in itertools.combinations(range(n), w):
            acc = 0
            for f in combo:
                acc ^= masks[f]
            if acc == target:
                return apply_flips(ErrorConfig.zeros(geom), combo)
    return None
