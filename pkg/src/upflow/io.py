"""On-disk formats: particle frames, grids, dataset manifests, and configs.

Binary layouts (all little-endian):

``UPF1`` particle frame
    magic ``UPF1`` | u32 version | u64 count | f32 positions (count*3)
    | f32 velocities (count*3)

``UGR1`` grid
    magic ``UGR1`` | u32 version | u8 kind (0 scalar, 1 vector3, 2 MAC)
    | f64 origin*3 | f64 cell_size | u32 dims*3 | f32 payload
    (scalar: nx*ny*nz; vector: *3; MAC: the three face arrays u, v, w)

Manifests and configs are plain key=value section files (configparser
syntax); floats are written with repr so a write/read/write cycle is
byte-identical.
"""

from __future__ import annotations

import configparser
import os
import struct
from dataclasses import asdict

import numpy as np

from .dataset import DatasetManifest, PairRecord, ParamMatrix
from .flip import SceneSpec, SimFrame, SimParams
from .grids import DeformationField, GridDesc, MACGrid, ScalarGrid
from .net import LevelConfig, NetworkConfig
from .particles import ParticleSet

UPF_MAGIC = b"UPF1"
UGR_MAGIC = b"UGR1"


# -- particles ------------------------------------------------------------------

def save_particles(path: str, p: ParticleSet):
    with open(path, "wb") as f:
        f.write(UPF_MAGIC)
        f.write(struct.pack("<I", 1))
        f.write(struct.pack("<Q", p.count))
        f.write(np.ascontiguousarray(p.positions, dtype="<f4").tobytes())
        f.write(np.ascontiguousarray(p.velocities, dtype="<f4").tobytes())


def load_particles(path: str) -> ParticleSet:
    with open(path, "rb") as f:
        if f.read(4) != UPF_MAGIC:
            raise ValueError(f"{path} is not a particle frame")
        (version,) = struct.unpack("<I", f.read(4))
        if version != 1:
            raise ValueError(f"unsupported particle frame version {version}")
        (count,) = struct.unpack("<Q", f.read(8))
        pos = np.frombuffer(f.read(12 * count), dtype="<f4").reshape(count, 3)
        vel = np.frombuffer(f.read(12 * count), dtype="<f4").reshape(count, 3)
    return ParticleSet(pos.astype(np.float64), vel.astype(np.float64))


# -- grids ----------------------------------------------------------------------

_GRID_KINDS = {"scalar": 0, "vector": 1, "mac": 2}


def _write_grid_header(f, kind: int, desc: GridDesc):
    f.write(UGR_MAGIC)
    f.write(struct.pack("<I", 1))
    f.write(struct.pack("<B", kind))
    f.write(struct.pack("<3d", *desc.origin))
    f.write(struct.pack("<d", desc.cell_size))
    f.write(struct.pack("<3I", *desc.dims))


def save_grid(path: str, grid):
    with open(path, "wb") as f:
        if isinstance(grid, ScalarGrid):
            _write_grid_header(f, _GRID_KINDS["scalar"], grid.desc)
            f.write(np.ascontiguousarray(grid.values, dtype="<f4").tobytes())
        elif isinstance(grid, DeformationField):
            _write_grid_header(f, _GRID_KINDS["vector"], grid.desc)
            f.write(np.ascontiguousarray(grid.vectors, dtype="<f4").tobytes())
        elif isinstance(grid, MACGrid):
            _write_grid_header(f, _GRID_KINDS["mac"], grid.desc)
            for comp in grid.components():
                f.write(np.ascontiguousarray(comp, dtype="<f4").tobytes())
        else:
            raise TypeError(f"cannot save grid of type {type(grid)!r}")


def load_grid(path: str):
    with open(path, "rb") as f:
        if f.read(4) != UGR_MAGIC:
            raise ValueError(f"{path} is not a grid file")
        (version,) = struct.unpack("<I", f.read(4))
        if version != 1:
            raise ValueError(f"unsupported grid version {version}")
        (kind,) = struct.unpack("<B", f.read(1))
        origin = struct.unpack("<3d", f.read(24))
        (cell,) = struct.unpack("<d", f.read(8))
        dims = struct.unpack("<3I", f.read(12))
        desc = GridDesc(origin, cell, dims)
        nx, ny, nz = dims
        if kind == _GRID_KINDS["scalar"]:
            vals = np.frombuffer(f.read(4 * nx * ny * nz), dtype="<f4")
            return ScalarGrid(desc, vals.astype(np.float64).reshape(dims))
        if kind == _GRID_KINDS["vector"]:
            vals = np.frombuffer(f.read(4 * nx * ny * nz * 3), dtype="<f4")
            return DeformationField(desc, vals.astype(np.float64).reshape(dims + (3,)))
        if kind == _GRID_KINDS["mac"]:
            shapes = [(nx + 1, ny, nz), (nx, ny + 1, nz), (nx, ny, nz + 1)]
            comps = []
            for s in shapes:
                n = s[0] * s[1] * s[2]
                comps.append(np.frombuffer(f.read(4 * n), dtype="<f4")
                             .astype(np.float64).reshape(s))
            return MACGrid(desc, *comps)
        raise ValueError(f"unknown grid kind {kind}")


# -- small value formatting -----------------------------------------------------

def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, (tuple, list, np.ndarray)):
        return ",".join(_fmt(float(x)) if isinstance(x, (float, np.floating)) else _fmt(x)
                        for x in v)
    return str(v)


def _floats(s: str) -> tuple[float, ...]:
    return tuple(float(x) for x in s.split(",") if x.strip() != "")


def _ints(s: str) -> tuple[int, ...]:
    return tuple(int(x) for x in s.split(",") if x.strip() != "")


def _float_lists(s: str) -> list[tuple[float, ...]]:
    return [_floats(part) for part in s.split(";") if part.strip() != ""]


# -- SimParams / SceneSpec sections ----------------------------------------------

def _sim_to_section(cfg, section: str, params: SimParams):
    cfg[section] = {
        "ps": _fmt(params.particle_separation),
        "gs": _fmt(params.grid_scale),
        "origin": _fmt(params.domain.origin),
        "cell_size": _fmt(params.domain.cell_size),
        "dims": _fmt(params.domain.dims),
        "gravity": _fmt(params.gravity),
        "flip_ratio": _fmt(params.flip_ratio),
        "dt": _fmt(params.dt),
        "cfl": _fmt(params.cfl),
        "particles_per_cell": str(params.particles_per_cell),
        "pressure_tol": _fmt(params.pressure_tol),
        "pressure_max_iter": str(params.pressure_max_iter),
        "max_particles": str(params.max_particles),
    }


def _sim_from_section(sec) -> SimParams:
    desc = GridDesc(_floats(sec["origin"]), float(sec["cell_size"]), _ints(sec["dims"]))
    return SimParams(
        particle_separation=float(sec["ps"]),
        grid_scale=float(sec["gs"]),
        domain=desc,
        gravity=_floats(sec["gravity"]),
        flip_ratio=float(sec["flip_ratio"]),
        dt=float(sec["dt"]),
        cfl=float(sec["cfl"]),
        particles_per_cell=int(sec["particles_per_cell"]),
        pressure_tol=float(sec["pressure_tol"]),
        pressure_max_iter=int(sec["pressure_max_iter"]),
        max_particles=int(sec["max_particles"]),
    )


def _scene_to_dict(scene: SceneSpec) -> dict[str, str]:
    d = asdict(scene)
    out = {}
    for k, v in d.items():
        out[k] = "" if v is None else _fmt(v)
    return out


def _scene_from_section(sec) -> SceneSpec:
    return SceneSpec(
        obstacle_shape=sec["obstacle_shape"],
        obstacle_position=_floats(sec["obstacle_position"]),
        emitter_position=_floats(sec["emitter_position"]),
        container_dims=_floats(sec["container_dims"]),
        obstacle_size=float(sec["obstacle_size"]),
        emit_rate=int(sec["emit_rate"]),
        emit_speed=float(sec["emit_speed"]),
        emit_radius=float(sec["emit_radius"]),
        pool_depth=float(sec["pool_depth"]),
        liquid_shape=sec["liquid_shape"] or None,
        liquid_position=_floats(sec["liquid_position"]),
        liquid_size=float(sec["liquid_size"]),
    )


# -- manifest -------------------------------------------------------------------

def write_manifest(manifest: DatasetManifest, out_dir: str) -> str:
    """Write the manifest text plus every frame file under `out_dir`.

    Returns the manifest.cfg path.
    """
    os.makedirs(out_dir, exist_ok=True)
    cfg = configparser.ConfigParser()
    cfg["manifest"] = {
        "name": manifest.name,
        "num_pairs": str(len(manifest.pairs)),
    }
    _sim_to_section(cfg, "sim.low", manifest.sim_low)
    _sim_to_section(cfg, "sim.high", manifest.sim_high)
    for i, pair in enumerate(manifest.pairs):
        pdir = f"pair_{i:03d}"
        os.makedirs(os.path.join(out_dir, pdir), exist_ok=True)
        entries = _scene_to_dict(pair.scene)
        entries["seed"] = str(pair.seed)
        entries["augmented"] = str(pair.augmented).lower()
        entries["source_pair_ids"] = ",".join(str(s) for s in pair.source_pair_ids)
        names: dict[str, list[str]] = {"low_frames": [], "high_frames": [],
                                       "low_velocity": [], "high_velocity": []}
        for t, frame in enumerate(pair.low_frames):
            rel = f"{pdir}/low_{t:03d}.upf"
            save_particles(os.path.join(out_dir, rel), frame.particles)
            names["low_frames"].append(rel)
            rel = f"{pdir}/vel_low_{t:03d}.ugr"
            save_grid(os.path.join(out_dir, rel), frame.velocity)
            names["low_velocity"].append(rel)
        for t, frame in enumerate(pair.high_frames):
            rel = f"{pdir}/high_{t:03d}.upf"
            save_particles(os.path.join(out_dir, rel), frame.particles)
            names["high_frames"].append(rel)
            rel = f"{pdir}/vel_high_{t:03d}.ugr"
            save_grid(os.path.join(out_dir, rel), frame.velocity)
            names["high_velocity"].append(rel)
        for k, v in names.items():
            entries[k] = ",".join(v)
        cfg[f"pair.{i}"] = entries
    path = os.path.join(out_dir, "manifest.cfg")
    with open(path, "w") as f:
        cfg.write(f)
    return path


def read_manifest(path: str) -> DatasetManifest:
    """Load a manifest directory (or its manifest.cfg path) back into memory."""
    if os.path.isdir(path):
        base = path
        path = os.path.join(path, "manifest.cfg")
    else:
        base = os.path.dirname(path)
    cfg = configparser.ConfigParser()
    with open(path) as f:
        cfg.read_file(f)
    manifest = DatasetManifest(
        name=cfg["manifest"]["name"],
        sim_low=_sim_from_section(cfg["sim.low"]),
        sim_high=_sim_from_section(cfg["sim.high"]),
    )
    n = int(cfg["manifest"]["num_pairs"])
    for i in range(n):
        sec = cfg[f"pair.{i}"]
        scene = _scene_from_section(sec)
        low, high = [], []
        lows = sec["low_frames"].split(",") if sec["low_frames"] else []
        lvels = sec["low_velocity"].split(",") if sec["low_velocity"] else []
        for rel, vrel in zip(lows, lvels):
            low.append(SimFrame(load_particles(os.path.join(base, rel)),
                                load_grid(os.path.join(base, vrel))))
        highs = sec["high_frames"].split(",") if sec["high_frames"] else []
        hvels = sec["high_velocity"].split(",") if sec["high_velocity"] else []
        for rel, vrel in zip(highs, hvels):
            high.append(SimFrame(load_particles(os.path.join(base, rel)),
                                 load_grid(os.path.join(base, vrel))))
        src = tuple(int(x) for x in sec["source_pair_ids"].split(",") if x.strip())
        manifest.pairs.append(PairRecord(scene, low, high, seed=int(sec["seed"]),
                                         augmented=sec["augmented"] == "true",
                                         source_pair_ids=src))
    return manifest


# -- dataset generation config ----------------------------------------------------

def parse_dataset_config(path: str):
    """Parse a generation config; returns
    (name, frames, seed, ParamMatrix, scene defaults, sim_low, sim_high)."""
    cfg = configparser.ConfigParser()
    with open(path) as f:
        cfg.read_file(f)
    ds = cfg["dataset"]
    sc = cfg["scenes"]
    theta = ParamMatrix(
        shapes=[s.strip() for s in sc["shapes"].split(",")],
        obstacle_positions=_float_lists(sc["obstacle_positions"]),
        emitter_positions=_float_lists(sc["emitter_positions"]),
        container_dims=_float_lists(sc["container_dims"]),
    )
    defaults = SceneSpec(
        obstacle_size=float(sc.get("obstacle_size", "0.12")),
        emit_rate=int(sc.get("emit_rate", "0")),
        emit_speed=float(sc.get("emit_speed", "1.5")),
        emit_radius=float(sc.get("emit_radius", "0.06")),
        pool_depth=float(sc.get("pool_depth", "0.0")),
        liquid_shape=sc.get("liquid_shape", "") or None,
        liquid_position=_floats(sc.get("liquid_position", "0.5,0.65,0.5")),
        liquid_size=float(sc.get("liquid_size", "0.15")),
    )

    def sim_from(name: str) -> SimParams:
        sec = cfg[name]
        ps, gs = float(sec["ps"]), float(sec["gs"])
        kw = {}
        if "gravity" in sec:
            kw["gravity"] = _floats(sec["gravity"])
        if "flip_ratio" in sec:
            kw["flip_ratio"] = float(sec["flip_ratio"])
        if "dt" in sec:
            kw["dt"] = float(sec["dt"])
        if "particles_per_cell" in sec:
            kw["particles_per_cell"] = int(sec["particles_per_cell"])
        return SimParams.for_domain(ps, gs, _floats(sec.get("origin", "0,0,0")),
                                    _floats(sec.get("extent", "1,1,1")), **kw)

    return (ds.get("name", "Colliding"), int(ds.get("frames", "4")),
            int(ds.get("seed", "0")), theta, defaults,
            sim_from("sim.low"), sim_from("sim.high"))


# -- network/training config -------------------------------------------------------

def parse_net_config(path: str):
    """Parse a training config; returns (NetworkConfig | None, train options).

    When the [net] section is omitted the caller should derive a default
    configuration from the data.
    """
    cfg = configparser.ConfigParser()
    with open(path) as f:
        cfg.read_file(f)
    net_cfg = None
    if cfg.has_section("net"):
        sec = cfg["net"]
        counts = _ints(sec["counts"])
        radii = _floats(sec["radii"])
        widths = [_ints(w) for w in sec["widths"].split(";")]
        max_nb = int(sec.get("max_neighbors", "32"))
        levels = tuple(LevelConfig(c, r, tuple(w), max_nb)
                       for c, r, w in zip(counts, radii, widths))
        up = tuple(tuple(_ints(w)) for w in sec["upconv_widths"].split(";"))
        net_cfg = NetworkConfig(
            levels=levels,
            embedding_widths=tuple(_ints(sec.get("embedding_widths", "128"))),
            embedding_radius=float(sec["embedding_radius"]),
            smoothing_convs=int(sec.get("smoothing_convs", "2")),
            upconv_widths=up,
            seed=int(sec.get("seed", "0")),
        )
    train_opts = {"lr": 1e-3, "val_fraction": 0.0}
    if cfg.has_section("train"):
        sec = cfg["train"]
        train_opts["lr"] = float(sec.get("lr", "1e-3"))
        train_opts["val_fraction"] = float(sec.get("val_fraction", "0.0"))
    return net_cfg, train_opts


# -- obj export -------------------------------------------------------------------

def export_obj(frames_dir: str, out_dir: str) -> list[str]:
    """Convert every particle frame in a directory to a point-cloud OBJ."""
    os.makedirs(out_dir, exist_ok=True)
    written = []
    for name in sorted(os.listdir(frames_dir)):
        if not name.endswith(".upf"):
            continue
        p = load_particles(os.path.join(frames_dir, name))
        out_path = os.path.join(out_dir, name[:-4] + ".obj")
        with open(out_path, "w") as f:
            for x, y, z in p.positions:
                f.write(f"v {float(x)!r} {float(y)!r} {float(z)!r}\n")
        written.append(out_path)
    return written
