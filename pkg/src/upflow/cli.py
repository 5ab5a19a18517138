"""Command-line interface.

Subcommands:
  gen-dataset --config <file> --out <dir>
  augment     --manifest <file> --alphas 0.25,0.5,0.75 --seed N
  solve-flow  --low <frames> --high <frames> --out <field> [--no-align]
  train       --manifest <file> --config <file> --epochs N --ckpt <file>
  infer       --input <frames> --ckpt <file> --passes N --out <frames>
  eval        --pred <frames> --ref <frames> [--threshold 0.1]
  export-obj  --frames <dir> --out <dir>

Frame arguments name directories of UPF1 files (plus UGR1 velocity grids for
inference inputs). The `eval` command compares the stored per-particle
velocity vectors as displacements.
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from . import io as uio
from .dataset import augment as augment_pairs
from .dataset import gen_dataset, make_training_samples
from .grids import GridDesc
from .inference import InferenceConfig, infer_frame
from .metrics import epe, flow_accuracy
from .net import DisplacementNet, NetworkConfig, train as train_net
from .optflow import FlowParams, SpaceTimeSDF, build_system, alignment_penalty, \
    solution_fields, solve_flow
from .sdf import sdf_from_particles


def _load_frame_dir(path: str):
    names = sorted(n for n in os.listdir(path) if n.endswith(".upf"))
    if not names:
        raise SystemExit(f"no .upf frames found in {path}")
    return [uio.load_particles(os.path.join(path, n)) for n in names], names


def _cmd_gen_dataset(args):
    name, frames, seed, theta, defaults, sim_low, sim_high = \
        uio.parse_dataset_config(args.config)
    manifest = gen_dataset(theta, sim_low, sim_high, frames, name=name, seed=seed,
                           scene_defaults=defaults)
    path = uio.write_manifest(manifest, args.out)
    print(f"wrote {len(manifest.pairs)} pairs x {frames} frames to {path}")


def _cmd_augment(args):
    manifest = uio.read_manifest(args.manifest)
    alphas = [float(a) for a in args.alphas.split(",") if a.strip()]
    grown = augment_pairs(manifest, alphas, seed=args.seed)
    base = args.manifest if os.path.isdir(args.manifest) \
        else os.path.dirname(args.manifest)
    path = uio.write_manifest(grown, base)
    print(f"augmented {len(manifest.pairs)} -> {len(grown.pairs)} pairs ({path})")


def _frames_bounds(frames):
    lo = np.min([f.positions.min(axis=0) for f in frames if f.count], axis=0)
    hi = np.max([f.positions.max(axis=0) for f in frames if f.count], axis=0)
    return lo, hi


def _cmd_solve_flow(args):
    low, _ = _load_frame_dir(args.low)
    high, _ = _load_frame_dir(args.high)
    t = min(len(low), len(high))
    low, high = low[:t], high[:t]
    if args.dims:
        dims = tuple(int(x) for x in args.dims.split(","))
    else:
        dims = (32, 32, 32)
    lo1, hi1 = _frames_bounds(low)
    lo2, hi2 = _frames_bounds(high)
    lo = np.minimum(lo1, lo2)
    hi = np.maximum(hi1, hi2)
    cell = float(np.max(hi - lo) / (max(dims) - 4))
    origin = lo - 2 * cell
    desc = GridDesc(tuple(origin), cell, dims)
    radius = 0.75 * cell
    params = FlowParams()
    src = SpaceTimeSDF([sdf_from_particles(p, desc, radius) for p in low], dt=1.0)
    dst = SpaceTimeSDF([sdf_from_particles(p, desc, radius) for p in high], dt=1.0)
    penalty = None if args.no_align else alignment_penalty(src, dst, params)
    a_mat, b, _ = build_system(dst, src, penalty, params)
    u, info = solve_flow(a_mat, b, params)
    fields = solution_fields(u, src)
    if len(fields) == 1:
        uio.save_grid(args.out, fields[0])
        written = [args.out]
    else:
        stem, ext = os.path.splitext(args.out)
        written = []
        for i, f in enumerate(fields):
            p = f"{stem}_{i:03d}{ext or '.ugr'}"
            uio.save_grid(p, f)
            written.append(p)
    status = "converged" if info.converged else "NOT converged"
    print(f"flow solve {status} after {info.iterations} iterations "
          f"(residual {info.residual:.2e}); wrote {', '.join(written)}")


def _cmd_train(args):
    manifest = uio.read_manifest(args.manifest)
    samples = make_training_samples(manifest)
    if not samples:
        raise SystemExit("manifest produced no training samples")
    net_cfg, opts = uio.parse_net_config(args.config)
    if net_cfg is None:
        n = max(s.x_l.count for s in samples)
        net_cfg = NetworkConfig.default(n, manifest.sim_low.particle_separation)
    n_val = int(len(samples) * opts.get("val_fraction", 0.0))
    val = samples[:n_val]
    tr = samples[n_val:]
    model, history = train_net(tr, net_cfg, args.epochs, val=val or None,
                               lr=opts["lr"])
    model.save(args.ckpt)
    last_val = f", val {history['val'][-1]:.5f}" if history["val"] else ""
    print(f"trained {args.epochs} epochs on {len(tr)} samples: "
          f"loss {history['train'][0]:.5f} -> {history['train'][-1]:.5f}{last_val}; "
          f"checkpoint {args.ckpt}")


def _cmd_infer(args):
    model = DisplacementNet.load(args.ckpt)
    names = sorted(n for n in os.listdir(args.input) if n.endswith(".upf"))
    vels = sorted(n for n in os.listdir(args.input) if n.endswith(".ugr"))
    if not names:
        raise SystemExit(f"no .upf frames found in {args.input}")
    if len(vels) < len(names):
        raise SystemExit("each frame needs a matching velocity grid (.ugr)")
    os.makedirs(args.out, exist_ok=True)
    cfg = InferenceConfig(passes=args.passes)
    for i, (fn, vn) in enumerate(zip(names, vels)):
        x = uio.load_particles(os.path.join(args.input, fn))
        u = uio.load_grid(os.path.join(args.input, vn))
        out = infer_frame(x, u, model, cfg, dt=args.dt)
        dst = os.path.join(args.out, f"frame_{i:03d}.upf")
        uio.save_particles(dst, out)
        print(f"{fn}: {x.count} -> {out.count} particles ({dst})")


def _cmd_eval(args):
    pred, _ = _load_frame_dir(args.pred)
    ref, _ = _load_frame_dir(args.ref)
    t = min(len(pred), len(ref))
    errs, accs = [], []
    for p, r in zip(pred[:t], ref[:t]):
        errs.append(epe(p.positions, p.velocities, r.positions, r.velocities))
        accs.append(flow_accuracy(p.positions, p.velocities, r.positions,
                                  r.velocities, threshold=args.threshold))
    for i, (e, a) in enumerate(zip(errs, accs)):
        print(f"frame {i:03d}: epe {e:.6f}  flow-accuracy {a:.4f}")
    print(f"mean: epe {np.mean(errs):.6f}  flow-accuracy {np.mean(accs):.4f}")


def _cmd_export_obj(args):
    written = uio.export_obj(args.frames, args.out)
    print(f"wrote {len(written)} obj files to {args.out}")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="upflow",
                                 description="particle-liquid up-resing toolkit")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-dataset", help="simulate a paired dataset")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=_cmd_gen_dataset)

    p = sub.add_parser("augment", help="grow a dataset by flow interpolation")
    p.add_argument("--manifest", required=True)
    p.add_argument("--alphas", default="0.5")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=_cmd_augment)

    p = sub.add_parser("solve-flow", help="solve the inter-resolution flow field")
    p.add_argument("--low", required=True)
    p.add_argument("--high", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--no-align", action="store_true")
    p.add_argument("--dims", default="")
    p.set_defaults(fn=_cmd_solve_flow)

    p = sub.add_parser("train", help="train the displacement network")
    p.add_argument("--manifest", required=True)
    p.add_argument("--config", required=True)
    p.add_argument("--epochs", type=int, required=True)
    p.add_argument("--ckpt", required=True)
    p.set_defaults(fn=_cmd_train)

    p = sub.add_parser("infer", help="up-res frames with a trained checkpoint")
    p.add_argument("--input", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--passes", type=int, default=3)
    p.add_argument("--out", required=True)
    p.add_argument("--dt", type=float, default=1.0 / 30.0)
    p.set_defaults(fn=_cmd_infer)

    p = sub.add_parser("eval", help="end-point error and flow accuracy")
    p.add_argument("--pred", required=True)
    p.add_argument("--ref", required=True)
    p.add_argument("--threshold", type=float, default=0.1)
    p.set_defaults(fn=_cmd_eval)

    p = sub.add_parser("export-obj", help="dump particle frames as OBJ points")
    p.add_argument("--frames", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=_cmd_export_obj)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    args.fn(args)
    return 0


if __name__ == "__main__":
    sys.exit(main())
