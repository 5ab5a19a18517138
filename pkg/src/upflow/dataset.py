"""Dataset generation, interpolation-based augmentation, and sample assembly.

A dataset is a list of simulation pairs: the same scene simulated at two
resolutions with the same seed. Augmentation morphs each pair toward a
randomly chosen partner pair (low track and high track separately) with the
inter-resolution flow solver at the requested blend weights; training
samples are built by solving the low-to-high flow of each pair once over its
whole frame stack and sampling the resulting field at the low particles.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import SolverDiverged
from .flip import SceneSpec, SimFrame, SimParams, simulate
from .grids import GridDesc, sample_trilinear
from .net import TrainingSample
from .optflow import (FlowParams, SpaceTimeSDF, alignment_penalty, build_system,
                      solution_fields, solve_flow)
from .particles import ParticleSet
from .sdf import sdf_from_particles


@dataclass
class ParamMatrix:
    """Cross-product enumeration of initial-condition values."""

    shapes: list[str]
    obstacle_positions: list[tuple[float, float, float]]
    emitter_positions: list[tuple[float, float, float]]
    container_dims: list[tuple[float, float, float]]

    def __post_init__(self):
        if not (self.shapes and self.obstacle_positions
                and self.emitter_positions and self.container_dims):
            raise ValueError("every parameter axis needs at least one value")

    def __len__(self) -> int:
        return (len(self.shapes) * len(self.obstacle_positions)
                * len(self.emitter_positions) * len(self.container_dims))

    def scenes(self, defaults: SceneSpec | None = None) -> list[SceneSpec]:
        base = defaults if defaults is not None else SceneSpec()
        out = []
        for shape, xo, xem, cd in itertools.product(
                self.shapes, self.obstacle_positions,
                self.emitter_positions, self.container_dims):
            out.append(replace(base, obstacle_shape=shape, obstacle_position=tuple(xo),
                               emitter_position=tuple(xem), container_dims=tuple(cd)))
        return out


@dataclass
class PairRecord:
    """One low/high simulation pair plus its provenance."""

    scene: SceneSpec
    low_frames: list[SimFrame]
    high_frames: list[SimFrame]
    seed: int
    augmented: bool = False
    source_pair_ids: tuple[int, ...] = ()


@dataclass
class DatasetManifest:
    name: str
    sim_low: SimParams
    sim_high: SimParams
    pairs: list[PairRecord] = field(default_factory=list)

    @property
    def num_frames(self) -> int:
        return len(self.pairs[0].low_frames) if self.pairs else 0


def gen_dataset(theta: ParamMatrix, sim_low: SimParams, sim_high: SimParams,
                frames: int, name: str = "Colliding", seed: int = 0,
                scene_defaults: SceneSpec | None = None) -> DatasetManifest:
    """Simulate one low/high pair per parameter combination.

    Both tracks of a pair run with the same scene and the same seed; a
    diverging pressure solve is re-raised with the offending combination.
    """
    manifest = DatasetManifest(name=name, sim_low=sim_low, sim_high=sim_high)
    for i, scene in enumerate(theta.scenes(scene_defaults)):
        pair_seed = seed + i
        try:
            low = simulate(scene, sim_low, frames, seed=pair_seed)
            high = simulate(scene, sim_high, frames, seed=pair_seed)
        except SolverDiverged as exc:
            raise SolverDiverged(f"parameter set {i} ({scene}) diverged: {exc}") from exc
        manifest.pairs.append(PairRecord(scene, low, high, pair_seed))
    return manifest


def _track_stack(frames: list[SimFrame], desc: GridDesc, radius: float,
                 dt: float) -> SpaceTimeSDF:
    grids = [sdf_from_particles(f.particles, desc, radius) for f in frames]
    return SpaceTimeSDF(grids, dt=dt)


def _solve_stack(src: SpaceTimeSDF, dst: SpaceTimeSDF, params: FlowParams,
                 align: bool = True):
    penalty = alignment_penalty(src, dst, params) if align else None
    a_mat, b, _ = build_system(dst, src, penalty, params)
    u, info = solve_flow(a_mat, b, params)
    return solution_fields(u, src), info


def _sdf_radius(params: SimParams) -> float:
    return 0.75 * params.domain.cell_size


def augment(manifest: DatasetManifest, alphas: list[float], seed: int = 0,
            flow_params: FlowParams | None = None) -> DatasetManifest:
    """Grow the dataset by |alphas| morphed pairs per original pair.

    Every original pair is matched with one random partner (seeded); the
    low and high tracks are morphed separately toward the partner's tracks
    at each blend weight. Output size = input * (1 + len(alphas)).
    """
    if len(manifest.pairs) < 2:
        raise ValueError("augmentation needs at least two pairs")
    if flow_params is None:
        flow_params = FlowParams()
    rng = np.random.default_rng(seed)
    out = DatasetManifest(name=manifest.name, sim_low=manifest.sim_low,
                          sim_high=manifest.sim_high, pairs=list(manifest.pairs))
    originals = list(manifest.pairs)
    n = len(originals)
    if not alphas:
        return out
    for i, pair in enumerate(originals):
        j = int(rng.integers(0, n - 1))
        if j >= i:
            j += 1
        partner = originals[j]
        morphed_tracks = {}
        for track, params in (("low", manifest.sim_low), ("high", manifest.sim_high)):
            src_frames = getattr(pair, f"{track}_frames")
            dst_frames = getattr(partner, f"{track}_frames")
            desc = params.domain
            radius = _sdf_radius(params)
            src_st = _track_stack(src_frames, desc, radius, params.dt)
            dst_st = _track_stack(dst_frames, desc, radius, params.dt)
            fields, _ = _solve_stack(src_st, dst_st, flow_params)
            morphed_tracks[track] = (src_frames, fields)
        for alpha in alphas:
            new_tracks = {}
            for track in ("low", "high"):
                src_frames, fields = morphed_tracks[track]
                frames = []
                for f, fld in zip(src_frames, fields):
                    disp = sample_trilinear(fld, f.particles.positions) if f.particles.count \
                        else np.zeros((0, 3))
                    moved = ParticleSet(f.particles.positions + alpha * disp,
                                        f.particles.velocities.copy())
                    frames.append(SimFrame(moved, f.velocity.copy()))
                new_tracks[track] = frames
            out.pairs.append(PairRecord(pair.scene, new_tracks["low"],
                                        new_tracks["high"], pair.seed,
                                        augmented=True, source_pair_ids=(i, j)))
    return out


def make_training_samples(manifest: DatasetManifest,
                          flow_params: FlowParams | None = None,
                          flow_desc: GridDesc | None = None,
                          align: bool = True) -> list[TrainingSample]:
    """Low-to-high flow targets for every frame of every pair.

    Both SDF stacks are built on one shared grid (`flow_desc`, defaulting to
    the low track's grid); the flow field is solved once per pair over the
    whole stack, sampled at the low particles as the ground-truth
    displacement, and its per-particle normalized magnitude becomes the
    adaptive loss weight (zero field -> all-zero weights).
    """
    if flow_params is None:
        flow_params = FlowParams()
    desc = flow_desc if flow_desc is not None else manifest.sim_low.domain
    radius = 0.75 * desc.cell_size
    samples = []
    for pair in manifest.pairs:
        low_st = _track_stack(pair.low_frames, desc, radius, manifest.sim_low.dt)
        high_st = _track_stack(pair.high_frames, desc, radius, manifest.sim_low.dt)
        fields, _ = _solve_stack(low_st, high_st, flow_params, align=align)
        for fi, (f, fld) in enumerate(zip(pair.low_frames, fields)):
            if f.particles.count == 0:
                continue
            gt = sample_trilinear(fld, f.particles.positions)
            mag = np.linalg.norm(gt, axis=1)
            peak = mag.max()
            lam = mag / peak if peak > 0 else np.zeros_like(mag)
            samples.append(TrainingSample(f.particles.copy(),
                                          pair.high_frames[fi].particles.copy(),
                                          gt, lam))
    return samples
