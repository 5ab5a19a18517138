"""Minimal FLIP/PIC liquid solver used to generate paired training scenes.

One deliberately small solver: trilinear particle/grid transfers, a
pressure projection solved with Jacobi-preconditioned CG, RK2 particle
advection, and narrow-band resampling. Scenes are described by an obstacle
shape, an emitter, a container, and optionally an initial liquid volume so
that parameter sweeps can enumerate simulation pairs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .errors import SolverDiverged
from .grids import GridDesc, MACGrid, ScalarGrid, extrapolate_mac, sample_trilinear
from .kernels import kernel_k
from .particles import HashGrid, ParticleSet, advect_particles, hash_uniform

SHAPES = ("sphere", "cube", "cylinder", "torus", "wedge", "frame")


@dataclass
class SimParams:
    """Resolution and integration parameters of one simulation track."""

    particle_separation: float          # ps, world units
    grid_scale: float                   # gs, dimensionless
    domain: GridDesc
    gravity: tuple[float, float, float] = (0.0, -9.81, 0.0)
    flip_ratio: float = 0.95
    dt: float = 1.0 / 30.0
    cfl: float = 2.0
    particles_per_cell: int = 8
    pressure_tol: float = 1e-6          # max residual divergence after projection
    pressure_max_iter: int = 4000
    max_particles: int = 200_000

    def __post_init__(self):
        if self.particle_separation <= 0.0:
            raise ValueError("particle_separation must be positive")
        if self.grid_scale < 1.0:
            raise ValueError("grid_scale must be >= 1")
        if self.dt <= 0.0:
            raise ValueError("dt must be positive")

    @classmethod
    def for_domain(cls, ps: float, gs: float, origin, extent, **kw) -> "SimParams":
        """Build params with the cell size tied to the particle spacing
        (cell = 2 * ps * gs), rounding dims to cover `extent`."""
        h = 2.0 * ps * gs
        dims = tuple(max(2, int(round(e / h))) for e in extent)
        return cls(ps, gs, GridDesc(tuple(origin), h, dims), **kw)


@dataclass
class SceneSpec:
    """Initial conditions of one scenario: obstacle, emitter, container, liquid."""

    obstacle_shape: str = "none"
    obstacle_position: tuple[float, float, float] = (0.5, 0.35, 0.5)
    emitter_position: tuple[float, float, float] = (0.5, 0.85, 0.5)
    container_dims: tuple[float, float, float] = (1.0, 1.0, 1.0)
    obstacle_size: float = 0.12
    emit_rate: int = 0                  # particles per frame, 0 disables the emitter
    emit_speed: float = 1.5
    emit_radius: float = 0.06
    pool_depth: float = 0.0             # initial pool height, fraction of container
    liquid_shape: str | None = None     # initial liquid volume (falls under gravity)
    liquid_position: tuple[float, float, float] = (0.5, 0.65, 0.5)
    liquid_size: float = 0.15

    def __post_init__(self):
        if self.obstacle_shape not in SHAPES + ("none",):
            raise ValueError(f"unknown obstacle shape {self.obstacle_shape!r}")
        if self.liquid_shape is not None and self.liquid_shape not in SHAPES:
            raise ValueError(f"unknown liquid shape {self.liquid_shape!r}")

    def emit_direction(self) -> np.ndarray:
        """Unit vector from the emitter toward the obstacle (or the container
        centroid when there is no obstacle)."""
        target = np.asarray(self.obstacle_position if self.obstacle_shape != "none"
                            else self.container_dims) * (1.0 if self.obstacle_shape != "none" else 0.5)
        d = target - np.asarray(self.emitter_position)
        n = np.linalg.norm(d)
        return d / n if n > 0 else np.array([0.0, -1.0, 0.0])


@dataclass
class SimFrame:
    """One output frame: the particle state and the projected MAC velocities."""

    particles: ParticleSet
    velocity: MACGrid


def shape_sdf(shape: str, pos, size: float, x: np.ndarray) -> np.ndarray:
    """Approximate signed distance of the named shape at points x (n, 3)."""
    p = np.atleast_2d(x) - np.asarray(pos, dtype=np.float64)
    if shape == "sphere":
        return np.linalg.norm(p, axis=1) - size
    if shape == "cube":
        q = np.abs(p) - size
        return (np.linalg.norm(np.maximum(q, 0.0), axis=1)
                + np.minimum(np.max(q, axis=1), 0.0))
    if shape == "cylinder":
        r = np.hypot(p[:, 0], p[:, 2]) - size
        hy = np.abs(p[:, 1]) - size
        q = np.stack([r, hy], axis=1)
        return (np.linalg.norm(np.maximum(q, 0.0), axis=1)
                + np.minimum(np.max(q, axis=1), 0.0))
    if shape == "torus":
        ring = np.hypot(np.hypot(p[:, 0], p[:, 2]) - size, p[:, 1])
        return ring - size / 3.0
    if shape == "wedge":
        cube = shape_sdf("cube", (0, 0, 0), size, p)
        slant = (p[:, 0] + p[:, 1]) / np.sqrt(2.0)
        return np.maximum(cube, slant)
    if shape == "frame":
        outer = shape_sdf("cube", (0, 0, 0), size, p)
        inner = shape_sdf("cube", (0, 0, 0), 0.7 * size, p)
        return np.maximum(outer, -inner)
    raise ValueError(f"unknown shape {shape!r}")


def _scatter_component(pos, val, origin, h, shape, offset):
    """Trilinear scatter of one velocity component onto its face lattice."""
    acc = np.zeros(shape)
    wsum = np.zeros(shape)
    t = (pos - origin) / h - np.asarray(offset)
    t = np.clip(t, 0.0, np.asarray(shape) - 1.0)
    i0 = np.minimum(np.floor(t).astype(np.int64), np.asarray(shape) - 2)
    i0 = np.maximum(i0, 0)
    f = t - i0
    flat_acc = acc.reshape(-1)
    flat_w = wsum.reshape(-1)
    s1, s2 = shape[1], shape[2]
    for dx in (0, 1):
        wx = f[:, 0] if dx else 1.0 - f[:, 0]
        for dy in (0, 1):
            wy = f[:, 1] if dy else 1.0 - f[:, 1]
            for dz in (0, 1):
                wz = f[:, 2] if dz else 1.0 - f[:, 2]
                w = wx * wy * wz
                flat = ((i0[:, 0] + dx) * s1 + (i0[:, 1] + dy)) * s2 + (i0[:, 2] + dz)
                np.add.at(flat_acc, flat, w * val)
                np.add.at(flat_w, flat, w)
    out = np.where(wsum > 0.0, acc / np.maximum(wsum, 1e-300), 0.0)
    return out, wsum > 0.0


_FACE_OFFSETS = ((0.0, 0.5, 0.5), (0.5, 0.0, 0.5), (0.5, 0.5, 0.0))


class FlipSolver:
    """Steppable FLIP solver for a single scene/resolution combination."""

    def __init__(self, scene: SceneSpec, params: SimParams, seed: int = 0):
        self.scene = scene
        self.params = params
        self.seed = int(seed)
        self.frame = 0
        self.desc = params.domain
        self._check_geometry()
        self.solid = self._solid_mask()
        self.particles = self._seed_initial()
        self.last_fluid = np.zeros(self.desc.dims, dtype=bool)

    # -- setup -----------------------------------------------------------

    def _check_geometry(self):
        lo = np.asarray(self.desc.origin)
        hi = self.desc.upper
        for name, pos in (("obstacle", self.scene.obstacle_position),
                          ("emitter", self.scene.emitter_position)):
            p = np.asarray(pos)
            if np.any(p < lo) or np.any(p > hi):
                raise ValueError(f"{name} position {pos} lies outside the domain")

    def _solid_mask(self) -> np.ndarray:
        centers = self.desc.cell_centers().reshape(-1, 3)
        solid = np.zeros(len(centers), dtype=bool)
        # container walls: everything outside the container box is solid
        lo = np.asarray(self.desc.origin)
        cd = np.asarray(self.scene.container_dims)
        solid |= np.any(centers < lo, axis=1) | np.any(centers > lo + cd, axis=1)
        if self.scene.obstacle_shape != "none":
            phi = shape_sdf(self.scene.obstacle_shape, self.scene.obstacle_position,
                            self.scene.obstacle_size, centers)
            solid |= phi < 0.0
        solid = solid.reshape(self.desc.dims)
        # one-cell wall at the domain boundary so liquid cannot leave the grid
        solid[0, :, :] = solid[-1, :, :] = True
        solid[:, 0, :] = solid[:, -1, :] = True
        solid[:, :, 0] = solid[:, :, -1] = True
        return solid

    def _stratified_fill(self, cells: np.ndarray, tag: int) -> np.ndarray:
        """Jittered per-cell seeding of `particles_per_cell` positions."""
        n_axis = max(1, int(round(self.params.particles_per_cell ** (1.0 / 3.0))))
        per_cell = n_axis ** 3
        h = self.desc.cell_size
        origin = np.asarray(self.desc.origin)
        cell_ids = (cells[:, 0] * self.desc.dims[1] + cells[:, 1]) * self.desc.dims[2] + cells[:, 2]
        slots = np.arange(per_cell)
        sid, cid = np.meshgrid(slots, cell_ids, indexing="ij")
        sub = np.stack([sid // (n_axis * n_axis), (sid // n_axis) % n_axis, sid % n_axis], axis=-1)
        jit = np.stack([hash_uniform(np.full(cid.shape, self.seed), cid, sid, np.full(cid.shape, tag + a))
                        for a in range(3)], axis=-1)
        base = origin + cells[None, :, :] * h
        pos = base + (sub + jit) * (h / n_axis)
        return pos.reshape(-1, 3)

    def _seed_initial(self) -> ParticleSet:
        nx, ny, nz = self.desc.dims
        centers = self.desc.cell_centers()
        fill = np.zeros(self.desc.dims, dtype=bool)
        if self.scene.pool_depth > 0.0:
            top = self.desc.origin[1] + self.scene.pool_depth * self.scene.container_dims[1]
            fill |= centers[..., 1] < top
        if self.scene.liquid_shape is not None:
            phi = shape_sdf(self.scene.liquid_shape, self.scene.liquid_position,
                            self.scene.liquid_size, centers.reshape(-1, 3))
            fill |= (phi < 0.0).reshape(self.desc.dims)
        fill &= ~self.solid
        cells = np.argwhere(fill)
        if len(cells) == 0:
            return ParticleSet.empty()
        pos = self._stratified_fill(cells, tag=101)
        keep = ~self._in_solid(pos)
        pos = pos[keep]
        return ParticleSet(pos, np.zeros_like(pos))

    # -- helpers ---------------------------------------------------------

    def _in_solid(self, pos: np.ndarray) -> np.ndarray:
        lo = np.asarray(self.desc.origin)
        cd = np.asarray(self.scene.container_dims)
        h = self.desc.cell_size
        inside = np.any(pos < lo + h, axis=1) | np.any(pos > np.minimum(lo + cd, self.desc.upper - h), axis=1)
        if self.scene.obstacle_shape != "none":
            phi = shape_sdf(self.scene.obstacle_shape, self.scene.obstacle_position,
                            self.scene.obstacle_size, pos)
            inside |= phi < 0.0
        return inside

    def _emit(self):
        n = self.scene.emit_rate
        if n <= 0 or self.particles.count + n > self.params.max_particles:
            return
        slots = np.arange(n)
        rnd = np.stack([hash_uniform(np.full(n, self.seed), np.full(n, self.frame),
                                     slots, np.full(n, 7 + a)) for a in range(3)], axis=-1)
        offs = (rnd - 0.5) * 2.0 * self.scene.emit_radius
        pos = np.asarray(self.scene.emitter_position) + offs
        vel = np.tile(self.scene.emit_direction() * self.scene.emit_speed, (n, 1))
        keep = ~self._in_solid(pos)
        self.particles = ParticleSet(
            np.concatenate([self.particles.positions, pos[keep]]),
            np.concatenate([self.particles.velocities, vel[keep]]))

    def _classify(self) -> np.ndarray:
        fluid = np.zeros(self.desc.dims, dtype=bool)
        if self.particles.count:
            idx = self.desc.cell_index(self.particles.positions)
            fluid[idx[:, 0], idx[:, 1], idx[:, 2]] = True
        return fluid & ~self.solid

    def _particles_to_grid(self) -> MACGrid:
        g = MACGrid.zeros(self.desc)
        origin = np.asarray(self.desc.origin)
        h = self.desc.cell_size
        for c, (comp, off) in enumerate(zip(g.components(), _FACE_OFFSETS)):
            vals, _ = _scatter_component(self.particles.positions,
                                         self.particles.velocities[:, c],
                                         origin, h, comp.shape, off)
            comp[...] = vals
        return g

    def _solid_faces(self):
        masks = []
        for axis in range(3):
            pad = [(0, 0)] * 3
            pad[axis] = (1, 1)
            padded = np.pad(self.solid, pad, constant_values=True)
            lo = padded[tuple(slice(0, -1) if a == axis else slice(None) for a in range(3))]
            hi = padded[tuple(slice(1, None) if a == axis else slice(None) for a in range(3))]
            masks.append(lo | hi)
        return masks

    def _apply_boundary(self, g: MACGrid):
        for comp, mask in zip(g.components(), self._solid_faces()):
            comp[mask] = 0.0

    def _divergence(self, g: MACGrid) -> np.ndarray:
        h = self.desc.cell_size
        return ((g.u[1:, :, :] - g.u[:-1, :, :])
                + (g.v[:, 1:, :] - g.v[:, :-1, :])
                + (g.w[:, :, 1:] - g.w[:, :, :-1])) / h

    def _project(self, g: MACGrid, dt: float):
        fluid = self._classify()
        self.last_fluid = fluid
        n_fluid = int(fluid.sum())
        if n_fluid == 0:
            return
        h = self.desc.cell_size
        idx = -np.ones(self.desc.dims, dtype=np.int64)
        idx[fluid] = np.arange(n_fluid)
        # the assembled stencil is the negative Laplacian (SPD), so the
        # pressure equation reads  (-Lap) p = -div/dt
        div = -self._divergence(g)[fluid] / dt

        rows, cols, vals = [], [], []
        diag = np.zeros(n_fluid)
        cells = np.argwhere(fluid)
        for axis in range(3):
            for step in (-1, 1):
                nb = cells.copy()
                nb[:, axis] += step
                inb = np.all((nb >= 0) & (nb < np.asarray(self.desc.dims)), axis=1)
                nbc = np.clip(nb, 0, np.asarray(self.desc.dims) - 1)
                is_solid = ~inb | self.solid[nbc[:, 0], nbc[:, 1], nbc[:, 2]]
                # solid neighbors drop out of the stencil entirely
                diag += np.where(is_solid, 0.0, 1.0)
                nb_fluid = inb & fluid[nbc[:, 0], nbc[:, 1], nbc[:, 2]] & ~is_solid
                r = idx[cells[nb_fluid, 0], cells[nb_fluid, 1], cells[nb_fluid, 2]]
                c = idx[nbc[nb_fluid, 0], nbc[nb_fluid, 1], nbc[nb_fluid, 2]]
                rows.append(r)
                cols.append(c)
                vals.append(np.full(len(r), -1.0))
        rows.append(np.arange(n_fluid))
        cols.append(np.arange(n_fluid))
        vals.append(np.maximum(diag, 1e-12))
        a_mat = sp.csr_matrix((np.concatenate(vals),
                               (np.concatenate(rows), np.concatenate(cols))),
                              shape=(n_fluid, n_fluid)) / (h * h)

        # post-projection divergence equals dt * residual, so target tol/dt
        p, ok = _pcg(a_mat, div, tol_inf=self.params.pressure_tol / dt,
                     max_iter=self.params.pressure_max_iter)
        if not ok:
            raise SolverDiverged(
                f"pressure CG exceeded {self.params.pressure_max_iter} iterations")

        pr = np.zeros(self.desc.dims)
        pr[fluid] = p
        solid_u, solid_v, solid_w = self._solid_faces()
        active = fluid
        gu = np.zeros_like(g.u)
        gu[1:-1, :, :] = (pr[1:, :, :] - pr[:-1, :, :]) / h
        touch_u = np.zeros(g.u.shape, dtype=bool)
        touch_u[1:, :, :] |= active
        touch_u[:-1, :, :] |= active
        g.u -= np.where(touch_u & ~solid_u, gu, 0.0) * dt
        gv = np.zeros_like(g.v)
        gv[:, 1:-1, :] = (pr[:, 1:, :] - pr[:, :-1, :]) / h
        touch_v = np.zeros(g.v.shape, dtype=bool)
        touch_v[:, 1:, :] |= active
        touch_v[:, :-1, :] |= active
        g.v -= np.where(touch_v & ~solid_v, gv, 0.0) * dt
        gw = np.zeros_like(g.w)
        gw[:, :, 1:-1] = (pr[:, :, 1:] - pr[:, :, :-1]) / h
        touch_w = np.zeros(g.w.shape, dtype=bool)
        touch_w[:, :, 1:] |= active
        touch_w[:, :, :-1] |= active
        g.w -= np.where(touch_w & ~solid_w, gw, 0.0) * dt

    def _grid_to_particles(self, new: MACGrid, old: MACGrid):
        if not self.particles.count:
            return
        pos = self.particles.positions
        v_new = sample_trilinear(new, pos)
        v_old = sample_trilinear(old, pos)
        r = self.params.flip_ratio
        self.particles.velocities[...] = (
            r * (self.particles.velocities + v_new - v_old) + (1.0 - r) * v_new)

    def _push_out_of_solids(self, pos: np.ndarray) -> np.ndarray:
        lo = np.asarray(self.desc.origin)
        h = self.desc.cell_size
        cd = np.asarray(self.scene.container_dims)
        hi = np.minimum(lo + cd, self.desc.upper)
        eps = 1e-4 * h
        pos = np.clip(pos, lo + h + eps, hi - h - eps)
        if self.scene.obstacle_shape != "none":
            phi = shape_sdf(self.scene.obstacle_shape, self.scene.obstacle_position,
                            self.scene.obstacle_size, pos)
            inside = phi < 0.0
            if inside.any():
                step = 0.5 * h
                grad = np.zeros((inside.sum(), 3))
                for a in range(3):
                    d = np.zeros(3)
                    d[a] = step
                    grad[:, a] = (shape_sdf(self.scene.obstacle_shape, self.scene.obstacle_position,
                                            self.scene.obstacle_size, pos[inside] + d)
                                  - shape_sdf(self.scene.obstacle_shape, self.scene.obstacle_position,
                                              self.scene.obstacle_size, pos[inside] - d)) / (2 * step)
                norm = np.linalg.norm(grad, axis=1, keepdims=True)
                grad = np.where(norm > 0, grad / np.maximum(norm, 1e-12), 0.0)
                pos[inside] -= grad * (phi[inside][:, None] - 0.25 * h)
        return pos

    # -- stepping --------------------------------------------------------

    def step(self) -> SimFrame:
        """Advance one frame (internally substepped by the CFL condition)."""
        self._emit()
        dt = self.params.dt
        h = self.desc.cell_size
        vmax = float(np.abs(self.particles.velocities).max()) if self.particles.count else 0.0
        vmax = max(vmax, np.linalg.norm(self.params.gravity) * dt)
        n_sub = int(np.clip(np.ceil(vmax * dt / (self.params.cfl * h)), 1, 8))
        grid = MACGrid.zeros(self.desc)
        for _ in range(n_sub):
            grid = self._substep(dt / n_sub)
        self.frame += 1
        return SimFrame(self.particles.copy(), grid)

    def _substep(self, dt: float) -> MACGrid:
        grid = self._particles_to_grid()
        self._apply_boundary(grid)
        old = grid.copy()
        g = np.asarray(self.params.gravity)
        if np.any(g != 0.0):
            grid.u += g[0] * dt
            grid.v += g[1] * dt
            grid.w += g[2] * dt
            self._apply_boundary(grid)
        self._project(grid, dt)
        self._apply_boundary(grid)
        # positions integrate through the time-centered field (average of the
        # pre-force transfer and the projected result): exact for free fall,
        # driftless for a balanced hydrostatic column
        mid = MACGrid(self.desc, 0.5 * (grid.u + old.u), 0.5 * (grid.v + old.v),
                      0.5 * (grid.w + old.w))
        fluid_phi = ScalarGrid(self.desc, np.where(self.last_fluid, -1.0, 1.0))
        advect_grid = extrapolate_mac(mid, fluid_phi, 2)
        self._grid_to_particles(grid, old)
        if self.particles.count:
            moved = advect_particles(self.particles, advect_grid, dt)
            pos = self._push_out_of_solids(moved.positions)
            self.particles = ParticleSet(pos, self.particles.velocities)
        return grid

    def divergence(self, g: MACGrid) -> np.ndarray:
        """Divergence restricted to the fluid cells of the latest projection."""
        return np.where(self.last_fluid, self._divergence(g), 0.0)


def _pcg(a_mat: sp.csr_matrix, b: np.ndarray, tol_inf: float, max_iter: int):
    """Jacobi-preconditioned CG; converges on the residual max-norm."""
    x = np.zeros_like(b)
    r = b.copy()
    if np.max(np.abs(r)) <= tol_inf:
        return x, True
    inv_diag = 1.0 / a_mat.diagonal()
    z = inv_diag * r
    d = z.copy()
    rz = float(r @ z)
    for _ in range(max_iter):
        ad = a_mat @ d
        alpha = rz / float(d @ ad)
        x += alpha * d
        r -= alpha * ad
        if np.max(np.abs(r)) <= tol_inf:
            return x, True
        z = inv_diag * r
        rz_new = float(r @ z)
        d = z + (rz_new / rz) * d
        rz = rz_new
    return x, False


def simulate(scene: SceneSpec, params: SimParams, frames: int, seed: int = 0) -> list[SimFrame]:
    """Run `frames` steps of the scene; deterministic for a fixed seed."""
    if frames < 1:
        raise ValueError(f"frames must be >= 1, got {frames}")
    solver = FlipSolver(scene, params, seed=seed)
    return [solver.step() for _ in range(frames)]


def resample_narrow_band(p: ParticleSet, phi: ScalarGrid, d_b: int,
                         target_per_cell: int = 8, seed: int = 0,
                         frame: int = 0) -> ParticleSet:
    """Rebuild the particle set so it populates only the liquid-side surface band.

    Particles outside the liquid or deeper than ``d_b`` cells are dropped;
    underfull band cells are refilled with jittered seeds (deterministic in
    (seed, frame, cell, slot)); overfull cells are thinned to the target.
    New particles take the kernel-weighted velocity of nearby survivors.
    """
    if d_b < 1:
        raise ValueError(f"d_b must be >= 1, got {d_b}")
    desc = phi.desc
    h = desc.cell_size
    depth = d_b * h

    phi_p = sample_trilinear(phi, p.positions) if p.count else np.zeros(0)
    keep = (phi_p <= 0.0) & (phi_p >= -depth)
    pos = p.positions[keep]
    vel = p.velocities[keep]

    counts = np.zeros(desc.dims, dtype=np.int64)
    if len(pos):
        ci = desc.cell_index(pos)
        np.add.at(counts, (ci[:, 0], ci[:, 1], ci[:, 2]), 1)

    band = (phi.values <= 0.0) & (phi.values >= -depth)
    need_cells = np.argwhere(band & (counts < target_per_cell))

    new_pos = []
    if len(need_cells):
        have = counts[need_cells[:, 0], need_cells[:, 1], need_cells[:, 2]]
        cell_ids = ((need_cells[:, 0] * desc.dims[1] + need_cells[:, 1]) * desc.dims[2]
                    + need_cells[:, 2])
        n_try = 4 * target_per_cell
        for cell, cid, cnt in zip(need_cells, cell_ids, have):
            slots = np.arange(n_try)
            jit = np.stack([hash_uniform(np.full(n_try, seed), np.full(n_try, frame),
                                         np.full(n_try, cid), slots * 3 + a)
                            for a in range(3)], axis=-1)
            cand = np.asarray(desc.origin) + (cell + jit) * h
            phi_c = sample_trilinear(phi, cand)
            ok = (phi_c <= 0.0) & (phi_c >= -depth)
            # skip the first `cnt` valid candidates: re-running the resample on
            # its own output must not duplicate earlier seeds
            new_pos.append(cand[ok][cnt:target_per_cell])

    # thin overfull cells, keeping the lexicographically smallest positions
    if len(pos):
        ci = desc.cell_index(pos)
        flat = (ci[:, 0] * desc.dims[1] + ci[:, 1]) * desc.dims[2] + ci[:, 2]
        order = np.lexsort((pos[:, 2], pos[:, 1], pos[:, 0], flat))
        flat_sorted = flat[order]
        starts = np.flatnonzero(np.concatenate(([True], flat_sorted[1:] != flat_sorted[:-1])))
        sizes = np.diff(np.concatenate((starts, [len(flat_sorted)])))
        rank_sorted = np.arange(len(flat_sorted)) - np.repeat(starts, sizes)
        rank = np.empty(len(pos), dtype=np.int64)
        rank[order] = rank_sorted
        keep2 = rank < target_per_cell
        pos, vel = pos[keep2], vel[keep2]

    if new_pos:
        added = np.concatenate([a for a in new_pos if len(a)]) if any(len(a) for a in new_pos) else np.zeros((0, 3))
    else:
        added = np.zeros((0, 3))
    if len(added):
        if len(pos):
            hg = HashGrid(pos, 2.0 * h)
            avel = np.zeros_like(added)
            for i, x in enumerate(added):
                idx = hg.query_radius(x, 2.0 * h)
                if len(idx):
                    d = np.linalg.norm(pos[idx] - x, axis=1)
                    w = kernel_k(d / (2.0 * h))
                    tot = w.sum()
                    if tot > 0:
                        avel[i] = (w[:, None] * vel[idx]).sum(axis=0) / tot
        else:
            avel = np.zeros_like(added)
        pos = np.concatenate([pos, added])
        vel = np.concatenate([vel, avel])
    return ParticleSet(pos, vel)
