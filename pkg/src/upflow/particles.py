"""Particle state, spatial hashing for neighbor queries, and particle advection."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .grids import MACGrid, advect_positions, sample_trilinear


@dataclass
class ParticleSet:
    """Unordered particle liquid: positions and velocities in world units."""

    positions: np.ndarray
    velocities: np.ndarray

    def __post_init__(self):
        self.positions = np.ascontiguousarray(self.positions, dtype=np.float64).reshape(-1, 3)
        self.velocities = np.ascontiguousarray(self.velocities, dtype=np.float64).reshape(-1, 3)
        if len(self.positions) != len(self.velocities):
            raise ValueError(
                f"positions ({len(self.positions)}) and velocities "
                f"({len(self.velocities)}) differ in length")
        if not (np.isfinite(self.positions).all() and np.isfinite(self.velocities).all()):
            raise ValueError("particle state contains non-finite components")

    @property
    def count(self) -> int:
        return len(self.positions)

    @classmethod
    def empty(cls) -> "ParticleSet":
        return cls(np.zeros((0, 3)), np.zeros((0, 3)))

    def copy(self) -> "ParticleSet":
        return ParticleSet(self.positions.copy(), self.velocities.copy())


class HashGrid:
    """Uniform spatial hash over points for fixed-radius neighbor queries."""

    def __init__(self, points: np.ndarray, cell: float):
        self.points = np.ascontiguousarray(points, dtype=np.float64).reshape(-1, 3)
        self.cell = float(cell)
        keys = np.floor(self.points / self.cell).astype(np.int64)
        self._buckets: dict[tuple[int, int, int], np.ndarray] = {}
        if len(keys):
            self._kmin = keys.min(axis=0)
            self._kmax = keys.max(axis=0)
            order = np.lexsort((keys[:, 2], keys[:, 1], keys[:, 0]))
            sk = keys[order]
            starts = np.flatnonzero(np.any(np.diff(sk, axis=0) != 0, axis=1)) + 1
            bounds = np.concatenate(([0], starts, [len(sk)]))
            for a, b in zip(bounds[:-1], bounds[1:]):
                self._buckets[tuple(sk[a])] = order[a:b]
        else:
            self._kmin = np.zeros(3, dtype=np.int64)
            self._kmax = -np.ones(3, dtype=np.int64)

    def query_radius(self, x: np.ndarray, radius: float) -> np.ndarray:
        """Indices of stored points within `radius` of `x` (unsorted)."""
        x = np.asarray(x, dtype=np.float64)
        reach = int(np.ceil(radius / self.cell))
        base = np.floor(x / self.cell).astype(np.int64)
        lo = np.maximum(base - reach, self._kmin)
        hi = np.minimum(base + reach, self._kmax)
        if np.any(lo > hi):
            return np.empty(0, dtype=np.int64)
        found = []
        for kx in range(lo[0], hi[0] + 1):
            for ky in range(lo[1], hi[1] + 1):
                for kz in range(lo[2], hi[2] + 1):
                    b = self._buckets.get((kx, ky, kz))
                    if b is not None:
                        found.append(b)
        if not found:
            return np.empty(0, dtype=np.int64)
        cand = np.concatenate(found)
        d2 = np.sum((self.points[cand] - x) ** 2, axis=1)
        return cand[d2 <= radius * radius]

    def query_nearest(self, x: np.ndarray) -> int:
        """Index of the nearest stored point to `x` (grows the search radius
        until the ball query is non-empty; a non-empty ball of radius r
        contains every point closer than r, so its minimum is global)."""
        if not len(self.points):
            raise ValueError("hash grid is empty")
        radius = self.cell
        while True:
            idx = self.query_radius(x, radius)
            if len(idx):
                d2 = np.sum((self.points[idx] - x) ** 2, axis=1)
                return int(idx[np.argmin(d2)])
            radius *= 2.0


def advect_particles(p: ParticleSet, vel: MACGrid, dt: float) -> ParticleSet:
    """Advance particles by RK2 through the grid; velocities re-sampled at the
    new positions. Count is preserved."""
    if dt <= 0.0:
        raise ValueError(f"dt must be positive, got {dt}")
    new_pos = advect_positions(p.positions, vel, dt)
    new_vel = sample_trilinear(vel, new_pos) if p.count else p.velocities.copy()
    return ParticleSet(new_pos, np.atleast_2d(new_vel))


def hash_uniform(*streams: np.ndarray) -> np.ndarray:
    """Deterministic pseudo-uniforms in [0, 1) from integer id streams.

    SplitMix64-style mixing of the combined ids; used for reproducible
    jittered seeding keyed by (seed, frame, cell, slot) independent of how
    many other cells are being seeded.
    """
    acc = np.zeros_like(np.broadcast_arrays(*streams)[0], dtype=np.uint64)
    with np.errstate(over="ignore"):
        for s in streams:
            acc = acc * np.uint64(0x9E3779B97F4A7C15) + np.asarray(s, dtype=np.uint64)
        z = acc + np.uint64(0x9E3779B97F4A7C15)
        z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
        z = z ^ (z >> np.uint64(31))
    return (z >> np.uint64(11)).astype(np.float64) / float(1 << 53)
