"""Command-line interface.

Subcommands: render, reference-render, backproject, reconstruct, degrade,
preprocess, metrics. Every command writes its outputs atomically plus a
JSON run manifest recording inputs, outputs, configuration and digests.
"""

from __future__ import annotations

import argparse
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__, io
from .backproject import backproject, baseline_reconstruct, sharpen
from .blobfield import ISO_DEFAULT, extract_mesh
from .datasets import DegradationSpec, degrade, fit_gain, metrics, preprocess_measured
from .optimize import Objective, OptimizerConfig, reconstruct
from .render import RenderOptions, reference_render, render


def _add_threads(p):
    p.add_argument("--threads", type=int,
                   default=int(os.environ.get("ECHOTRACE_THREADS", 0)),
                   help="worker threads for the kernels (0: all cores; "
                        "env ECHOTRACE_THREADS)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="echotrace",
        description="Transient three-bounce rendering and around-the-corner "
                    "reconstruction")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("render", help="render a transient cube from a mesh "
                                      "or blob file")
    p.add_argument("--scene", required=True, help="scene config file")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--mesh", help="OBJ mesh to render")
    src.add_argument("--blobs", help="blob text file; meshed before rendering")
    p.add_argument("--out", required=True, help="output transient cube")
    p.add_argument("--no-filter", action="store_true",
                   help="deposit each triangle at its centroid bin only")
    p.add_argument("--no-shadows", action="store_true",
                   help="skip occlusion tests (visibility = 1)")
    p.add_argument("--reference-level", type=int, default=None, metavar="N",
                   help="use the reference renderer with N subdivision levels")
    p.add_argument("--iso", type=float, default=ISO_DEFAULT,
                   help="isosurface threshold for --blobs (default %(default)s)")
    p.add_argument("--grid-res", type=int, default=None,
                   help="meshing grid resolution override for --blobs")
    p.add_argument("--slices", metavar="DIR",
                   help="also dump per-time-slice graymaps into DIR")
    _add_threads(p)

    p = sub.add_parser("reference-render",
                       help="dense-subdivision reference rendering")
    p.add_argument("--scene", required=True)
    p.add_argument("--mesh", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--level", type=int, required=True,
                   help="subdivision level (4**level subtriangles each)")
    _add_threads(p)

    p = sub.add_parser("backproject", help="ellipsoidal backprojection of a "
                                           "transient cube")
    p.add_argument("--image", required=True, help="input transient cube")
    p.add_argument("--scene", required=True)
    p.add_argument("--volume-out", help="density volume output path")
    p.add_argument("--mesh-out", help="baseline isosurface OBJ output path")
    p.add_argument("--resolution", type=int, default=None,
                   help="voxels per axis (default: scene volume resolution)")
    p.add_argument("--iso-fraction", type=float, default=0.5,
                   help="mesh threshold as fraction of the filtered maximum")
    p.add_argument("--no-sharpen", action="store_true",
                   help="skip the Laplacian-of-Gaussian sharpening filter")
    _add_threads(p)

    p = sub.add_parser("reconstruct", help="blob-based reconstruction of a "
                                           "reference transient cube")
    p.add_argument("--ref", required=True, help="reference transient cube")
    p.add_argument("--scene", required=True)
    p.add_argument("--out-dir", required=True,
                   help="checkpoint/output directory")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--sigma0", type=float, default=1.5,
                   help="width of newly added blobs (default %(default)s)")
    p.add_argument("--sigma-max", type=float, default=10.0)
    p.add_argument("--eta", type=float, default=1.005,
                   help="deletion tolerance factor (default %(default)s)")
    p.add_argument("--k-neighbors", type=int, default=10)
    p.add_argument("--c-thresh", type=float, default=0.005,
                   help="stop when cost falls below this fraction of the "
                        "empty-hypothesis cost (default %(default)s)")
    p.add_argument("--max-iterations", type=int, default=100)
    p.add_argument("--grid-res", type=int, default=None,
                   help="meshing grid resolution (default: scene volume)")
    p.add_argument("--pdf-resolution", type=int, default=None,
                   help="sampling-PDF voxels per axis")
    p.add_argument("--fit-gain", action="store_true",
                   help="rescale the reference by a least-squares gain "
                        "against a first rendering (for measured data)")
    p.add_argument("--resume", action="store_true",
                   help="warm-start from the newest checkpoint in --out-dir "
                        "(the random stream restarts)")
    _add_threads(p)

    p = sub.add_parser("degrade", help="decimate / blur / add photon noise")
    p.add_argument("--input", required=True, dest="inp")
    p.add_argument("--out", required=True)
    p.add_argument("--spatial", type=int, default=1)
    p.add_argument("--temporal", type=int, default=1)
    p.add_argument("--poisson-scale", type=float, default=None,
                   help="expected photon count at the image maximum")
    p.add_argument("--blur", type=int, default=1, help="box width in bins")
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("preprocess", help="background removal for measured "
                                          "photon-count data")
    p.add_argument("--input", required=True, dest="inp")
    p.add_argument("--out", required=True)
    p.add_argument("--mode", choices=["spad-background", "none"],
                   default="spad-background")
    p.add_argument("--lowpass-sigma", type=float, default=1000.0,
                   help="temporal Gaussian sigma in bins (default %(default)s)")
    p.add_argument("--downsample", type=int, default=25,
                   help="temporal sum-downsampling factor (default %(default)s)")

    p = sub.add_parser("metrics", help="PSNR / relative L2 / depth errors")
    p.add_argument("candidate", help="candidate transient cube")
    p.add_argument("reference", help="reference transient cube")
    p.add_argument("--candidate-mesh", help="OBJ for depth-error evaluation")
    p.add_argument("--gt-mesh", help="ground-truth OBJ")
    p.add_argument("--scene", help="scene config (needed for depth errors)")
    p.add_argument("--report", help="write a TSV report here")
    p.add_argument("--depth-map", help="write the depth-error graymap here")
    return parser


def _require(path) -> Path:
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"input file not found: {p}")
    return p


def _cmd_render(args) -> int:
    scene = io.read_scene(_require(args.scene))
    inputs = [args.scene]
    if args.mesh:
        mesh = io.read_obj(_require(args.mesh))
        inputs.append(args.mesh)
    else:
        blobs = io.read_blobs(_require(args.blobs))
        inputs.append(args.blobs)
        grid = scene.volume
        if args.grid_res:
            grid = grid.with_resolution(args.grid_res)
        mesh = extract_mesh(blobs, grid, args.iso)
    t = time.perf_counter()
    level = getattr(args, "reference_level", None)
    if getattr(args, "level", None) is not None:
        level = args.level
    if level is not None:
        image = reference_render(scene, mesh, level)
    else:
        opts = RenderOptions(use_filter=not getattr(args, "no_filter", False),
                             use_shadows=not getattr(args, "no_shadows", False),
                             n_threads=args.threads)
        image = render(scene, mesh, opts)
    elapsed = time.perf_counter() - t
    io.write_cube(args.out, image, scene.lasers, scene.detectors)
    outputs = [args.out]
    if getattr(args, "slices", None):
        outdir = Path(args.slices)
        outdir.mkdir(parents=True, exist_ok=True)
        shape = scene.detector_shape or (scene.n_detectors, 1)
        for l in range(scene.n_lasers):
            for k in range(scene.axis.n_bins):
                sl = image.values[l, :, k].reshape(shape)
                io.write_pgm(outdir / f"slice_l{l}_b{k:04d}.pgm", sl,
                             lo=0.0, hi=float(image.values.max() or 1.0))
    io.write_manifest(str(args.out) + ".manifest.json", args.command,
                      _config_dict(args), inputs, outputs,
                      wall_clock=elapsed)
    return 0


def _cmd_backproject(args) -> int:
    image = io.read_cube(_require(args.image))
    scene = io.read_scene(_require(args.scene))
    if not (args.volume_out or args.mesh_out):
        raise ValueError("nothing to do: pass --volume-out and/or --mesh-out")
    t = time.perf_counter()
    density = backproject(image, scene, resolution=args.resolution,
                          n_threads=args.threads)
    outputs = []
    if args.volume_out:
        io.write_volume(args.volume_out, density)
        outputs.append(args.volume_out)
    if args.mesh_out:
        filtered = density if args.no_sharpen else sharpen(density)
        peak = filtered.values.max(initial=0.0)
        if peak > 0:
            from .blobfield import mesh_from_samples
            origin = filtered.lo + 0.5 * filtered.voxel
            mesh = mesh_from_samples(filtered.values, origin, filtered.voxel,
                                     args.iso_fraction * peak)
        else:
            from .scene import TriangleMesh
            mesh = TriangleMesh.empty()
        io.write_obj(args.mesh_out, mesh)
        outputs.append(args.mesh_out)
    elapsed = time.perf_counter() - t
    io.write_manifest(str(outputs[0]) + ".manifest.json", args.command,
                      _config_dict(args), [args.image, args.scene], outputs,
                      wall_clock=elapsed)
    return 0


def _cmd_reconstruct(args) -> int:
    reference = io.read_cube(_require(args.ref))
    scene = io.read_scene(_require(args.scene))
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    grid = scene.volume
    if args.grid_res:
        grid = grid.with_resolution(args.grid_res)
    if args.fit_gain:
        # probe hypothesis: one blob at the backprojection peak
        from .blobfield import BlobSet
        density = backproject(reference, scene,
                              resolution=args.pdf_resolution or 32,
                              n_threads=args.threads)
        peak = np.unravel_index(int(np.argmax(density.values)),
                                density.resolution)
        center = density.lo + density.voxel * (np.asarray(peak) + 0.5)
        probe = extract_mesh(BlobSet.from_blobs([(center, 2 * args.sigma0)]),
                             grid)
        rendered = render(scene, probe, RenderOptions(n_threads=args.threads))
        gain = fit_gain(reference, rendered)
        if gain > 0:
            reference = type(reference)(reference.values / gain,
                                        reference.axis,
                                        reference.detector_shape)
    obj = Objective(reference=reference, scene=scene, grid=grid,
                    options=RenderOptions(n_threads=args.threads))
    cfg = OptimizerConfig(
        sigma0=args.sigma0, sigma_max=args.sigma_max, eta=args.eta,
        k_neighbors=args.k_neighbors, c_thresh=args.c_thresh,
        seed=args.seed, max_outer_iterations=args.max_iterations,
        pdf_resolution=args.pdf_resolution)

    initial = None
    start_iter = 0
    if args.resume:
        ckpts = sorted(out_dir.glob("blobs_*.txt"))
        if ckpts:
            initial = io.read_blobs(ckpts[-1])
            start_iter = int(ckpts[-1].stem.split("_")[1])

    def checkpoint(iteration, blobs, cost):
        io.write_blobs(out_dir / f"blobs_{iteration:04d}.txt", blobs)

    t = time.perf_counter()
    record = reconstruct(obj, cfg, on_iteration=checkpoint,
                         initial=initial, initial_iteration=start_iter)
    elapsed = time.perf_counter() - t
    io.write_blobs(out_dir / "final_blobs.txt", record.final)
    io.write_obj(out_dir / "final_mesh.obj",
                 extract_mesh(record.final, grid))
    io.write_run_log(out_dir / "run_log.tsv", record)
    outputs = [out_dir / "final_blobs.txt", out_dir / "final_mesh.obj",
               out_dir / "run_log.tsv"]
    io.write_manifest(out_dir / "manifest.json", args.command,
                      _config_dict(args), [args.ref, args.scene], outputs,
                      seed=args.seed, wall_clock=elapsed)
    ratio = record.final_cost / record.initial_cost if record.initial_cost else 0.0
    print(f"final cost {record.final_cost:.6g} "
          f"({100 * ratio:.3g}% of initial), {len(record.final)} blobs, "
          f"{len(record.rows)} log rows, {elapsed:.1f}s")
    return 0


def _cmd_degrade(args) -> int:
    image = io.read_cube(_require(args.inp))
    spec = DegradationSpec(spatial=args.spatial, temporal=args.temporal,
                           poisson_scale=args.poisson_scale,
                           blur_bins=args.blur, seed=args.seed)
    out = degrade(image, spec)
    io.write_cube(args.out, out)
    io.write_manifest(str(args.out) + ".manifest.json", args.command,
                      _config_dict(args), [args.inp], [args.out],
                      seed=args.seed)
    return 0


def _cmd_preprocess(args) -> int:
    image = io.read_cube(_require(args.inp))
    out = preprocess_measured(image, args.mode,
                              lowpass_sigma=args.lowpass_sigma,
                              downsample=args.downsample)
    io.write_cube(args.out, out)
    io.write_manifest(str(args.out) + ".manifest.json", args.command,
                      _config_dict(args), [args.inp], [args.out])
    return 0


def _cmd_metrics(args) -> int:
    candidate = io.read_cube(_require(args.candidate))
    reference = io.read_cube(_require(args.reference))
    inputs = [args.candidate, args.reference]
    cmesh = gmesh = scene = None
    if args.candidate_mesh and args.gt_mesh and args.scene:
        cmesh = io.read_obj(_require(args.candidate_mesh))
        gmesh = io.read_obj(_require(args.gt_mesh))
        scene = io.read_scene(_require(args.scene))
        inputs += [args.candidate_mesh, args.gt_mesh, args.scene]
    report = metrics(candidate, reference, cmesh, gmesh, scene)
    print(f"psnr_db\t{report.psnr!r}")
    print(f"rel_l2_percent\t{report.rel_l2!r}")
    for key, val in sorted(report.notes.items()):
        print(f"{key}\t{val!r}")
    outputs = []
    if args.report:
        lines = [f"psnr_db\t{report.psnr!r}",
                 f"rel_l2_percent\t{report.rel_l2!r}"]
        lines += [f"{k}\t{v!r}" for k, v in sorted(report.notes.items())]
        io.atomic_write_text(args.report, "\n".join(lines) + "\n")
        outputs.append(args.report)
    if args.depth_map and report.depth_error is not None:
        io.write_pgm(args.depth_map, report.depth_error)
        outputs.append(args.depth_map)
    if outputs:
        io.write_manifest(str(outputs[0]) + ".manifest.json", args.command,
                          _config_dict(args), inputs, outputs)
    return 0


def _config_dict(args) -> dict:
    return {k: v for k, v in vars(args).items() if k != "command"}


_HANDLERS = {
    "render": _cmd_render,
    "reference-render": _cmd_render,
    "backproject": _cmd_backproject,
    "reconstruct": _cmd_reconstruct,
    "degrade": _cmd_degrade,
    "preprocess": _cmd_preprocess,
    "metrics": _cmd_metrics,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return _HANDLERS[args.command](args)
    except FileNotFoundError as exc:
        print(f"error: i/o: {exc}", file=sys.stderr)
        return 1
    except ValueError as exc:
        print(f"error: config: {exc}", file=sys.stderr)
        return 1
    except np.linalg.LinAlgError as exc:
        print(f"error: numerical: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
