"""Inter-resolution variational flow on signed distance fields.

Minimizing the quadratic energy

    E(u) = sum_c (g_c . u_c - delta_c)^2
         + beta_S * sum_axes |D_axis u|^2  +  beta_T |u|^2  +  u^T D u

over per-cell 3-vector displacements u yields the linear system A u = b with

    A = grad(phi_dst)^T grad(phi_dst) + beta_S * sum_j L_j + beta_T I + D
    b = grad(phi_dst)^T (phi_src - phi_dst)

assembled over the whole space-time stack (time is a fourth lattice axis of
the smoothness term). The solved field maps the source surface onto the
destination: displacing source geometry by +u reproduces the destination.
The diagonal penalty D concentrates the solve on topologically complex cells
near matched surface feature points.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from scipy.spatial import cKDTree

from .errors import CGNotConverged, GridMismatch, NoSurface
from .grids import DeformationField, ScalarGrid, sample_trilinear
from .particles import ParticleSet


@dataclass
class FlowParams:
    """Weights and solver controls for the flow energy."""

    beta_s: float = 0.5           # smoothness weight, >= 0
    beta_t: float = 1e-3          # Tikhonov weight, > 0 (keeps A positive definite)
    alpha_feat: float = 1.0       # feature-point threshold coefficient
    time_scale: float = 1.0       # metric weight of the time axis in 4D distances
    cg_tol: float = 1e-8          # relative residual target
    cg_max_iter: int = 5000

    def __post_init__(self):
        if self.beta_t <= 0.0:
            raise ValueError("beta_t must be strictly positive")
        if self.beta_s < 0.0:
            raise ValueError("beta_s must be non-negative")


@dataclass
class SpaceTimeSDF:
    """Ordered SDF frames on one shared grid."""

    frames: list[ScalarGrid]
    dt: float = 1.0

    def __post_init__(self):
        if not self.frames:
            raise ValueError("a space-time SDF needs at least one frame")
        desc = self.frames[0].desc
        for f in self.frames[1:]:
            if f.desc != desc:
                raise GridMismatch("space-time SDF frames must share one grid descriptor")

    @property
    def desc(self):
        return self.frames[0].desc

    @property
    def num_frames(self) -> int:
        return len(self.frames)

    def stacked(self) -> np.ndarray:
        return np.stack([f.values for f in self.frames])

    @classmethod
    def single(cls, grid: ScalarGrid, dt: float = 1.0) -> "SpaceTimeSDF":
        return cls([grid], dt)


@dataclass
class AlignmentPenalty:
    """Per space-time-cell diagonal penalty d >= 0; nonzero only on complex cells."""

    d: np.ndarray  # shape (T, nx, ny, nz)

    def __post_init__(self):
        self.d = np.ascontiguousarray(self.d, dtype=np.float64)
        if np.any(self.d < 0.0):
            raise ValueError("alignment penalties must be non-negative")


@dataclass
class FlowSolveInfo:
    converged: bool
    iterations: int
    residual: float


# -- complex-cell topology test -----------------------------------------------

def _corner_adjacency():
    pairs = []
    for a in range(8):
        for bit in (1, 2, 4):
            b = a ^ bit
            if a < b:
                pairs.append((a, b))
    return pairs

_CUBE_EDGES = _corner_adjacency()

# faces as corner index quadruples (u0v0, u0v1, u1v0, u1v1) per fixed axis side
_CUBE_FACES = []
for _axis, _bit in ((0, 4), (1, 2), (2, 1)):
    rest = [b for b in (4, 2, 1) if b != _bit]
    for side in (0, _bit):
        _CUBE_FACES.append((side, side | rest[1], side | rest[0], side | rest[0] | rest[1]))


def _components(case: int, want: bool) -> int:
    """Connected components of the corners whose inside-flag equals `want`."""
    corners = [c for c in range(8) if bool(case >> c & 1) == want]
    seen: set[int] = set()
    comps = 0
    for start in corners:
        if start in seen:
            continue
        comps += 1
        stack = [start]
        while stack:
            c = stack.pop()
            if c in seen:
                continue
            seen.add(c)
            for a, b in _CUBE_EDGES:
                if a == c and b in corners and b not in seen:
                    stack.append(b)
                elif b == c and a in corners and a not in seen:
                    stack.append(a)
    return comps


def _case_is_complex(case: int) -> bool:
    if _components(case, True) > 1 or _components(case, False) > 1:
        return True
    for f00, f01, f10, f11 in _CUBE_FACES:
        s = [bool(case >> c & 1) for c in (f00, f01, f10, f11)]
        if s[0] == s[3] and s[1] == s[2] and s[0] != s[1]:
            return True
    return False


_COMPLEX_TABLE = np.array([_case_is_complex(c) for c in range(256)], dtype=bool)


def complex_cells(phi: ScalarGrid) -> np.ndarray:
    """Flag cells whose 8-corner sign pattern is too tangled for a single
    piecewise-linear surface sheet (multiple corner components or an
    ambiguous face). Corners are the cell-center samples of the 2x2x2 block
    anchored at each cell; the trailing slab in each axis is never flagged.
    """
    inside = phi.values <= 0.0
    nx, ny, nz = phi.desc.dims
    case = np.zeros((nx - 1, ny - 1, nz - 1), dtype=np.int32)
    for dx in (0, 1):
        for dy in (0, 1):
            for dz in (0, 1):
                bit = dx * 4 + dy * 2 + dz
                case |= inside[dx:nx - 1 + dx, dy:ny - 1 + dy, dz:nz - 1 + dz] << bit
    out = np.zeros(phi.desc.dims, dtype=bool)
    out[:-1, :-1, :-1] = _COMPLEX_TABLE[case]
    return out


# -- feature points and alignment ---------------------------------------------

def _laplacian(values: np.ndarray, h: float) -> np.ndarray:
    """7-point Laplacian with replicated (Neumann) boundary values."""
    p = np.pad(values, 1, mode="edge")
    lap = -6.0 * values
    lap += p[2:, 1:-1, 1:-1] + p[:-2, 1:-1, 1:-1]
    lap += p[1:-1, 2:, 1:-1] + p[1:-1, :-2, 1:-1]
    lap += p[1:-1, 1:-1, 2:] + p[1:-1, 1:-1, :-2]
    return lap / (h * h)


def feature_points(st: SpaceTimeSDF, alpha_feat: float,
                   time_scale: float = 1.0) -> np.ndarray:
    """Surface-band cells whose |curvature| sticks out of the band distribution.

    Curvature is approximated by the SDF Laplacian on the |phi| <= 2h band;
    cells above mean + alpha_feat * stddev of the band's |curvature| are
    returned as 4D points (x, y, z, t * dt * time_scale). A constant
    distribution (stddev ~ 0) yields no feature points.

    Raises NoSurface when no frame has a zero crossing.
    """
    desc = st.desc
    h = desc.cell_size
    has_surface = any((f.values <= 0.0).any() and (f.values > 0.0).any()
                      for f in st.frames)
    if not has_surface:
        raise NoSurface("signed distance stack has no zero crossing")

    centers = desc.cell_centers()
    band_curvs = []
    per_frame = []
    for t, frame in enumerate(st.frames):
        band = np.abs(frame.values) <= 2.0 * h
        curv = np.abs(_laplacian(frame.values, h))
        band_curvs.append(curv[band])
        per_frame.append((band, curv))
    all_curv = np.concatenate(band_curvs) if band_curvs else np.zeros(0)
    if all_curv.size == 0:
        return np.zeros((0, 4))
    mu = float(all_curv.mean())
    rho = float(all_curv.std())
    if rho <= 1e-12 * max(1.0, abs(mu)):
        return np.zeros((0, 4))
    thresh = mu + alpha_feat * rho
    pts = []
    for t, (band, curv) in enumerate(per_frame):
        sel = band & (curv > thresh)
        if sel.any():
            xyz = centers[sel]
            tt = np.full((len(xyz), 1), t * st.dt * time_scale)
            pts.append(np.concatenate([xyz, tt], axis=1))
    return np.concatenate(pts) if pts else np.zeros((0, 4))


def alignment_penalty(lo: SpaceTimeSDF, hi: SpaceTimeSDF,
                      params: FlowParams) -> AlignmentPenalty:
    """Inverse-distance penalty on the source's complex cells.

    Each complex cell of `lo` gets d = 1 / max(dist, eps) where dist is the
    4D distance (time scaled by time_scale) to the nearest feature point of
    `hi`; eps is one cell size. Everything else is zero.
    """
    if lo.desc != hi.desc or lo.num_frames != hi.num_frames:
        raise GridMismatch("aligned stacks must share grid and frame count")
    desc = lo.desc
    d = np.zeros((lo.num_frames,) + desc.dims)
    feats = feature_points(hi, params.alpha_feat, params.time_scale)
    if len(feats) == 0:
        return AlignmentPenalty(d)
    tree = cKDTree(feats)
    centers = desc.cell_centers()
    eps = desc.cell_size
    for t, frame in enumerate(lo.frames):
        cc = complex_cells(frame)
        if not cc.any():
            continue
        xyz = centers[cc]
        q = np.concatenate(
            [xyz, np.full((len(xyz), 1), t * lo.dt * params.time_scale)], axis=1)
        dist, _ = tree.query(q)
        d[t][cc] = 1.0 / np.maximum(dist, eps)
    return AlignmentPenalty(d)


# -- system assembly and solve -------------------------------------------------

def _spatial_gradient(values: np.ndarray, h: float) -> np.ndarray:
    """Central differences (one-sided at borders), shape (nx, ny, nz, 3)."""
    g = np.stack(np.gradient(values, h), axis=-1)
    return g


def build_system(hi: SpaceTimeSDF, lo: SpaceTimeSDF,
                 penalty: AlignmentPenalty | None,
                 params: FlowParams):
    """Assemble (A, b) of the flow system over the space-time stack.

    A is symmetric positive definite for beta_t > 0. Unknowns are ordered
    cell-major (time, x, y, z) with the 3 vector components interleaved.
    Returns (A: csr_matrix, b: ndarray, delta_sq: float) where delta_sq is
    the residual energy of the zero field (used by energy diagnostics).
    """
    if hi.desc != lo.desc or hi.num_frames != lo.num_frames:
        raise GridMismatch("flow solve needs matching grids and frame counts")
    desc = hi.desc
    h = desc.cell_size
    t_frames = hi.num_frames
    m = t_frames * desc.num_cells
    n = 3 * m

    grad = np.concatenate([_spatial_gradient(f.values, h).reshape(-1, 3)
                           for f in hi.frames])
    delta = (lo.stacked() - hi.stacked()).reshape(-1)

    rows, cols, vals = [], [], []
    cell_idx = np.arange(m, dtype=np.int64)

    # data term: per-cell 3x3 outer product of the destination gradient
    for a in range(3):
        for b_ in range(3):
            rows.append(3 * cell_idx + a)
            cols.append(3 * cell_idx + b_)
            vals.append(grad[:, a] * grad[:, b_])

    # smoothness: graph Laplacian over the 4D lattice, one copy per component
    diag = np.full(m, params.beta_t)
    if penalty is not None:
        pen = penalty.d.reshape(-1)
        if len(pen) != m:
            raise GridMismatch("penalty shape does not match the space-time stack")
        diag = diag + pen
    if params.beta_s > 0.0:
        shape4 = (t_frames,) + desc.dims
        lattice = cell_idx.reshape(shape4)
        for axis in range(4):
            if shape4[axis] < 2:
                continue
            sl_lo = tuple(slice(0, -1) if a == axis else slice(None) for a in range(4))
            sl_hi = tuple(slice(1, None) if a == axis else slice(None) for a in range(4))
            ca = lattice[sl_lo].reshape(-1)
            cb = lattice[sl_hi].reshape(-1)
            w = params.beta_s
            np.add.at(diag, ca, w)
            np.add.at(diag, cb, w)
            for a in range(3):
                rows.append(3 * ca + a)
                cols.append(3 * cb + a)
                vals.append(np.full(len(ca), -w))
                rows.append(3 * cb + a)
                cols.append(3 * ca + a)
                vals.append(np.full(len(ca), -w))

    for a in range(3):
        rows.append(3 * cell_idx + a)
        cols.append(3 * cell_idx + a)
        vals.append(diag)

    a_mat = sp.csr_matrix((np.concatenate(vals),
                           (np.concatenate(rows), np.concatenate(cols))),
                          shape=(n, n))
    a_mat.sum_duplicates()
    b = (grad * delta[:, None]).reshape(-1)
    return a_mat, b, float(delta @ delta)


def solve_flow(a_mat: sp.csr_matrix, b: np.ndarray, params: FlowParams):
    """Jacobi-preconditioned CG solve of the assembled SPD system.

    Returns (u, FlowSolveInfo); u is the flat solution vector (3 components
    per cell). A zero right-hand side returns the zero field immediately.
    When the iteration cap is hit, the best iterate is returned with
    `converged=False` rather than raising.
    """
    b = np.asarray(b, dtype=np.float64)
    b_norm = float(np.linalg.norm(b))
    if b_norm == 0.0:
        return np.zeros_like(b), FlowSolveInfo(True, 0, 0.0)
    x = np.zeros_like(b)
    r = b.copy()
    inv_diag = 1.0 / a_mat.diagonal()
    z = inv_diag * r
    d = z.copy()
    rz = float(r @ z)
    best_x, best_res = x.copy(), float(np.linalg.norm(r)) / b_norm
    for it in range(1, params.cg_max_iter + 1):
        ad = a_mat @ d
        alpha = rz / float(d @ ad)
        x += alpha * d
        r -= alpha * ad
        res = float(np.linalg.norm(r)) / b_norm
        if res < best_res:
            best_res, best_x = res, x.copy()
        if res <= params.cg_tol:
            return x, FlowSolveInfo(True, it, res)
        z = inv_diag * r
        rz_new = float(r @ z)
        d = z + (rz_new / rz) * d
        rz = rz_new
    return best_x, FlowSolveInfo(False, params.cg_max_iter, best_res)


def solution_fields(u_flat: np.ndarray, st_like: SpaceTimeSDF) -> list[DeformationField]:
    """Reshape a flat flow solution into one DeformationField per frame."""
    desc = st_like.desc
    t_frames = st_like.num_frames
    u = u_flat.reshape((t_frames,) + desc.dims + (3,))
    return [DeformationField(desc, u[t], time_index=t) for t in range(t_frames)]


def quadratic_energy(a_mat: sp.csr_matrix, b: np.ndarray, u: np.ndarray,
                     zero_energy: float) -> float:
    """Discrete flow energy E(u); E(0) equals `zero_energy` (the squared
    surface difference)."""
    return float(u @ (a_mat @ u) - 2.0 * (b @ u) + zero_energy)


def apply_deformation(phi: ScalarGrid, u: DeformationField, alpha: float) -> ScalarGrid:
    """Warp an SDF through the deformation: phi'(x) = phi(x - alpha * u(x)).

    alpha = 0 returns an exact copy of the input.
    """
    if phi.desc != u.desc:
        raise GridMismatch("deformation and SDF grids differ")
    if alpha == 0.0:
        return phi.copy()
    centers = phi.desc.cell_centers().reshape(-1, 3)
    back = centers - alpha * u.vectors.reshape(-1, 3)
    vals = sample_trilinear(phi, back)
    return ScalarGrid(phi.desc, vals.reshape(phi.desc.dims))


def flow_interpolate(x_src: ParticleSet, x_dst: ParticleSet,
                     sdf_src: SpaceTimeSDF, sdf_dst: SpaceTimeSDF,
                     alpha: float, params: FlowParams,
                     frame_index: int = 0, align: bool = True):
    """Solve source->destination flow and displace source particles by alpha*u.

    `x_dst` participates only through the destination surface stack; it is
    accepted so call sites can hand over a full pair. Returns the displaced
    particles and the per-frame deformation field used.

    Raises CGNotConverged when the solve runs out of iterations.
    """
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    penalty = alignment_penalty(sdf_src, sdf_dst, params) if align else None
    a_mat, b, _ = build_system(sdf_dst, sdf_src, penalty, params)
    u_flat, info = solve_flow(a_mat, b, params)
    if not info.converged:
        raise CGNotConverged(
            f"flow CG stalled at relative residual {info.residual:.3e}")
    field = solution_fields(u_flat, sdf_src)[frame_index]
    if alpha == 0.0 or x_src.count == 0:
        return x_src.copy(), field
    disp = sample_trilinear(field, x_src.positions)
    return ParticleSet(x_src.positions + alpha * disp, x_src.velocities.copy()), field
