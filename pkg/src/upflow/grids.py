"""Uniform-grid field types and the sampling/advection primitives built on them.

Conventions used throughout the package:

- Scalar, vector, and penalty fields are sampled at cell centers:
  ``origin + (i + 0.5) * cell_size``.
- MAC velocity grids are face-staggered: the u component lives on x-faces
  (shape ``(nx+1, ny, nz)``), v on y-faces, w on z-faces.
- All interpolation is trilinear; sample positions outside the grid clamp
  to the boundary cell, which keeps narrow domains NaN-free.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import GridMismatch


@dataclass(frozen=True)
class GridDesc:
    """Geometry of a uniform grid: origin corner, cell size, cell counts."""

    origin: tuple[float, float, float]
    cell_size: float
    dims: tuple[int, int, int]

    def __post_init__(self):
        if self.cell_size <= 0.0:
            raise ValueError(f"cell_size must be positive, got {self.cell_size}")
        if any(int(d) < 2 for d in self.dims):
            raise ValueError(f"every grid dimension must be >= 2, got {self.dims}")
        object.__setattr__(self, "origin", tuple(float(c) for c in self.origin))
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))

    @property
    def num_cells(self) -> int:
        nx, ny, nz = self.dims
        return nx * ny * nz

    @property
    def extent(self) -> np.ndarray:
        """Physical size of the domain along each axis."""
        return np.asarray(self.dims, dtype=np.float64) * self.cell_size

    @property
    def upper(self) -> np.ndarray:
        return np.asarray(self.origin, dtype=np.float64) + self.extent

    def cell_centers(self) -> np.ndarray:
        """(nx, ny, nz, 3) array of cell-center positions."""
        nx, ny, nz = self.dims
        ax = [np.asarray(self.origin)[a] + (np.arange(n) + 0.5) * self.cell_size
              for a, n in enumerate((nx, ny, nz))]
        gx, gy, gz = np.meshgrid(*ax, indexing="ij")
        return np.stack([gx, gy, gz], axis=-1)

    def cell_index(self, x: np.ndarray) -> np.ndarray:
        """Integer cell containing each position (clamped to the grid)."""
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        idx = np.floor((x - np.asarray(self.origin)) / self.cell_size).astype(np.int64)
        return np.clip(idx, 0, np.asarray(self.dims) - 1)


def _require_same_desc(a: GridDesc, b: GridDesc):
    if a != b:
        raise GridMismatch(f"grid descriptors differ: {a} vs {b}")


@dataclass
class ScalarGrid:
    """Cell-centered scalar field (SDF values, weights, ...)."""

    desc: GridDesc
    values: np.ndarray

    def __post_init__(self):
        self.values = np.ascontiguousarray(self.values, dtype=np.float64)
        if self.values.shape != self.desc.dims:
            raise ValueError(f"values shape {self.values.shape} != dims {self.desc.dims}")

    @classmethod
    def full(cls, desc: GridDesc, fill: float = 0.0) -> "ScalarGrid":
        return cls(desc, np.full(desc.dims, fill, dtype=np.float64))

    def copy(self) -> "ScalarGrid":
        return ScalarGrid(self.desc, self.values.copy())


@dataclass
class DeformationField:
    """Cell-centered 3-vector field, optionally tagged with its frame index
    when it is one slab of a space-time stack."""

    desc: GridDesc
    vectors: np.ndarray
    time_index: int | None = None

    def __post_init__(self):
        self.vectors = np.ascontiguousarray(self.vectors, dtype=np.float64)
        if self.vectors.shape != self.desc.dims + (3,):
            raise ValueError(
                f"vectors shape {self.vectors.shape} != dims {self.desc.dims} + (3,)")

    @classmethod
    def zeros(cls, desc: GridDesc, time_index: int | None = None) -> "DeformationField":
        return cls(desc, np.zeros(desc.dims + (3,), dtype=np.float64), time_index)

    def copy(self) -> "DeformationField":
        return DeformationField(self.desc, self.vectors.copy(), self.time_index)


@dataclass
class MACGrid:
    """Face-staggered velocity field."""

    desc: GridDesc
    u: np.ndarray = field(default=None)
    v: np.ndarray = field(default=None)
    w: np.ndarray = field(default=None)

    def __post_init__(self):
        nx, ny, nz = self.desc.dims
        if self.u is None:
            self.u = np.zeros((nx + 1, ny, nz))
        if self.v is None:
            self.v = np.zeros((nx, ny + 1, nz))
        if self.w is None:
            self.w = np.zeros((nx, ny, nz + 1))
        self.u = np.ascontiguousarray(self.u, dtype=np.float64)
        self.v = np.ascontiguousarray(self.v, dtype=np.float64)
        self.w = np.ascontiguousarray(self.w, dtype=np.float64)
        expect = {"u": (nx + 1, ny, nz), "v": (nx, ny + 1, nz), "w": (nx, ny, nz + 1)}
        for name, arr in (("u", self.u), ("v", self.v), ("w", self.w)):
            if arr.shape != expect[name]:
                raise ValueError(f"{name} has shape {arr.shape}, expected {expect[name]}")

    @classmethod
    def zeros(cls, desc: GridDesc) -> "MACGrid":
        return cls(desc)

    @classmethod
    def constant(cls, desc: GridDesc, vel) -> "MACGrid":
        g = cls(desc)
        g.u[...], g.v[...], g.w[...] = vel[0], vel[1], vel[2]
        return g

    def copy(self) -> "MACGrid":
        return MACGrid(self.desc, self.u.copy(), self.v.copy(), self.w.copy())

    def components(self):
        return (self.u, self.v, self.w)

    def max_abs(self) -> float:
        return max(np.abs(self.u).max(), np.abs(self.v).max(), np.abs(self.w).max())


def _trilinear_gather(values: np.ndarray, t: np.ndarray):
    """Trilinear interpolation of `values` at fractional indices `t` (n, 3).

    Indices are clamped to the valid lattice, matching the boundary-clamp
    sampling rule.
    """
    shape = np.asarray(values.shape[:3])
    t = np.clip(t, 0.0, shape - 1.0)
    i0 = np.floor(t).astype(np.int64)
    i0 = np.minimum(i0, shape - 2)
    i0 = np.maximum(i0, 0)
    f = t - i0
    i1 = i0 + 1
    out = None
    for dx, wx in ((0, 1.0 - f[:, 0]), (1, f[:, 0])):
        ix = i0[:, 0] if dx == 0 else i1[:, 0]
        for dy, wy in ((0, 1.0 - f[:, 1]), (1, f[:, 1])):
            iy = i0[:, 1] if dy == 0 else i1[:, 1]
            for dz, wz in ((0, 1.0 - f[:, 2]), (1, f[:, 2])):
                iz = i0[:, 2] if dz == 0 else i1[:, 2]
                w = wx * wy * wz
                vals = values[ix, iy, iz]
                if vals.ndim > 1:
                    w = w[:, None]
                contrib = w * vals
                out = contrib if out is None else out + contrib
    return out


def sample_trilinear(grid, x: np.ndarray):
    """Trilinearly sample a ScalarGrid, DeformationField, or MACGrid at `x`.

    `x` may be a single position (3,) or a batch (n, 3). Returns scalars for
    ScalarGrid and 3-vectors for the vector-valued grids. Out-of-bounds
    positions clamp to the boundary.
    """
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    pts = np.atleast_2d(x)
    desc = grid.desc
    origin = np.asarray(desc.origin)
    h = desc.cell_size

    if isinstance(grid, ScalarGrid):
        t = (pts - origin) / h - 0.5
        out = _trilinear_gather(grid.values, t)
    elif isinstance(grid, DeformationField):
        t = (pts - origin) / h - 0.5
        out = _trilinear_gather(grid.vectors, t)
    elif isinstance(grid, MACGrid):
        base = (pts - origin) / h
        out = np.empty((len(pts), 3))
        offsets = ((0.0, 0.5, 0.5), (0.5, 0.0, 0.5), (0.5, 0.5, 0.0))
        for c, (comp, off) in enumerate(zip(grid.components(), offsets)):
            out[:, c] = _trilinear_gather(comp, base - np.asarray(off))
    else:
        raise TypeError(f"cannot sample object of type {type(grid)!r}")
    return out[0] if single else out


def _face_liquid_mask(phi: np.ndarray, axis: int) -> np.ndarray:
    """A face is 'known' when at least one adjacent cell is liquid (phi <= 0)."""
    liquid = phi <= 0.0
    pad = [(0, 0)] * 3
    pad[axis] = (1, 1)
    padded = np.pad(liquid, pad, constant_values=False)
    lo = padded[tuple(slice(0, -1) if a == axis else slice(None) for a in range(3))]
    hi = padded[tuple(slice(1, None) if a == axis else slice(None) for a in range(3))]
    return lo | hi


def _propagate_layer(vals: np.ndarray, known: np.ndarray):
    """One breadth-first layer: unknown faces adjacent to known ones take the
    mean of their known 6-neighbors. Returns the updated (vals, known)."""
    acc = np.zeros_like(vals)
    cnt = np.zeros(vals.shape, dtype=np.int64)
    for axis in range(3):
        for shift in (1, -1):
            sk = np.roll(known, shift, axis=axis)
            sv = np.roll(vals, shift, axis=axis)
            edge = [slice(None)] * 3
            edge[axis] = slice(0, 1) if shift == 1 else slice(-1, None)
            sk[tuple(edge)] = False
            acc += np.where(sk, sv, 0.0)
            cnt += sk
    frontier = (~known) & (cnt > 0)
    vals = np.where(frontier, acc / np.maximum(cnt, 1), vals)
    return vals, known | frontier


def extrapolate_mac(vel: MACGrid, phi: ScalarGrid, d_mac: int) -> MACGrid:
    """Extend face velocities `d_mac` cells beyond the liquid (phi <= 0).

    Faces adjacent to a liquid cell are treated as known and never modified;
    each breadth-first layer averages the already-known neighbors.
    """
    if d_mac < 1:
        raise ValueError(f"d_mac must be >= 1, got {d_mac}")
    _require_same_desc(vel.desc, phi.desc)
    out = vel.copy()
    comps = [out.u, out.v, out.w]
    for axis in range(3):
        vals = comps[axis]
        known = _face_liquid_mask(phi.values, axis)
        for _ in range(d_mac):
            vals, known = _propagate_layer(vals, known)
        comps[axis][...] = vals
    return out


def advect_positions(positions: np.ndarray, vel: MACGrid, dt: float) -> np.ndarray:
    """Midpoint (RK2) advection of positions through a MAC velocity field."""
    v1 = sample_trilinear(vel, positions)
    mid = positions + 0.5 * dt * v1
    vm = sample_trilinear(vel, mid)
    return positions + dt * vm
