import json

import numpy as np
import pytest

from echotrace import io
from echotrace.blobfield import BlobSet
from echotrace.cli import main
from echotrace.datasets import make_standard_scene
from echotrace.render import render
from echotrace.scene import VolumeSpec

from conftest import simple_scene


@pytest.fixture()
def workdir(tmp_path):
    scene = simple_scene(nx=4, ny=4, n_bins=96)
    scene = scene.replace(volume=VolumeSpec((-16.0, -16.0, 33.0),
                                            (16.0, 16.0, 57.0), 32))
    io.write_scene(tmp_path / "scene.cfg", scene)
    blobs = BlobSet.from_blobs([((0.0, 0.0, 45.0), 3.0)])
    io.write_blobs(tmp_path / "blobs.txt", blobs)
    return tmp_path


def run(*argv):
    return main([str(a) for a in argv])


class TestRenderCommand:
    def test_render_blobs_and_self_metrics(self, workdir, capsys):
        out = workdir / "img.cube"
        assert run("render", "--scene", workdir / "scene.cfg",
                   "--blobs", workdir / "blobs.txt", "--out", out) == 0
        assert out.exists()
        assert (workdir / "img.cube.manifest.json").exists()
        assert run("metrics", out, out) == 0
        lines = capsys.readouterr().out.strip().splitlines()
        table = dict(ln.split("\t") for ln in lines)
        assert table["rel_l2_percent"] == "0.0"
        assert table["psnr_db"] == "inf"

    def test_render_mesh_flags(self, workdir):
        mesh_path = workdir / "m.obj"
        _, mesh = make_standard_scene("unit-square-4x4x96-quads2")
        io.write_obj(mesh_path, mesh)
        out = workdir / "img2.cube"
        assert run("render", "--scene", workdir / "scene.cfg",
                   "--mesh", mesh_path, "--out", out, "--no-filter",
                   "--no-shadows") == 0
        img = io.read_cube(out)
        assert img.values.sum() > 0

    def test_reference_render(self, workdir):
        mesh_path = workdir / "m.obj"
        _, mesh = make_standard_scene("unit-square-4x4x96-quads2")
        io.write_obj(mesh_path, mesh)
        out_fast = workdir / "f.cube"
        out_ref = workdir / "r.cube"
        run("render", "--scene", workdir / "scene.cfg", "--mesh", mesh_path,
            "--out", out_fast, "--no-filter")
        assert run("reference-render", "--scene", workdir / "scene.cfg",
                   "--mesh", mesh_path, "--out", out_ref, "--level", "0") == 0
        a, b = io.read_cube(out_fast), io.read_cube(out_ref)
        assert np.array_equal(a.values, b.values)

    def test_missing_input_no_partial_output(self, workdir, capsys):
        out = workdir / "never.cube"
        code = run("render", "--scene", workdir / "nope.cfg",
                   "--blobs", workdir / "blobs.txt", "--out", out)
        assert code == 1
        assert "i/o" in capsys.readouterr().err
        assert not out.exists()

    def test_unknown_flag_exits_2(self, workdir):
        with pytest.raises(SystemExit) as exc:
            run("render", "--scene", workdir / "scene.cfg", "--frobnicate")
        assert exc.value.code == 2

    def test_slice_dumps(self, workdir):
        out = workdir / "img3.cube"
        slices = workdir / "slices"
        assert run("render", "--scene", workdir / "scene.cfg",
                   "--blobs", workdir / "blobs.txt", "--out", out,
                   "--slices", slices) == 0
        dumps = list(slices.glob("slice_l0_b*.pgm"))
        assert len(dumps) == 96


class TestBackprojectCommand:
    def test_volume_and_mesh_outputs(self, workdir):
        cube = workdir / "img.cube"
        run("render", "--scene", workdir / "scene.cfg",
            "--blobs", workdir / "blobs.txt", "--out", cube)
        vol = workdir / "d.vol"
        mesh = workdir / "b.obj"
        assert run("backproject", "--image", cube, "--scene",
                   workdir / "scene.cfg", "--volume-out", vol,
                   "--mesh-out", mesh, "--resolution", "24") == 0
        density = io.read_volume(vol)
        assert density.values.max() > 0
        assert not io.read_obj(mesh).is_empty()


class TestReconstructCommand:
    def test_determinism_and_checkpoints(self, workdir):
        cube = workdir / "ref.cube"
        run("render", "--scene", workdir / "scene.cfg",
            "--blobs", workdir / "blobs.txt", "--out", cube)
        outs = []
        for name in ("runA", "runB"):
            out_dir = workdir / name
            assert run("reconstruct", "--ref", cube, "--scene",
                       workdir / "scene.cfg", "--out-dir", out_dir,
                       "--seed", "7", "--max-iterations", "2",
                       "--pdf-resolution", "8", "--c-thresh", "0.001") == 0
            outs.append((out_dir / "final_blobs.txt").read_bytes())
            assert (out_dir / "run_log.tsv").exists()
            assert (out_dir / "manifest.json").exists()
            assert list(out_dir.glob("blobs_*.txt"))
        assert outs[0] == outs[1]

    def test_resume_from_checkpoint(self, workdir):
        cube = workdir / "ref.cube"
        run("render", "--scene", workdir / "scene.cfg",
            "--blobs", workdir / "blobs.txt", "--out", cube)
        out_dir = workdir / "runR"
        run("reconstruct", "--ref", cube, "--scene", workdir / "scene.cfg",
            "--out-dir", out_dir, "--seed", "7", "--max-iterations", "1",
            "--pdf-resolution", "8")
        assert run("reconstruct", "--ref", cube, "--scene",
                   workdir / "scene.cfg", "--out-dir", out_dir, "--seed",
                   "7", "--max-iterations", "2", "--pdf-resolution", "8",
                   "--resume") == 0
        log = (out_dir / "run_log.tsv").read_text()
        assert "resume" in log


class TestDegradePreprocess:
    def test_degrade_identity(self, workdir):
        cube = workdir / "img.cube"
        run("render", "--scene", workdir / "scene.cfg",
            "--blobs", workdir / "blobs.txt", "--out", cube)
        out = workdir / "same.cube"
        assert run("degrade", "--input", cube, "--out", out) == 0
        assert np.array_equal(io.read_cube(out).values,
                              io.read_cube(cube).values)

    def test_degrade_factors(self, workdir):
        cube = workdir / "img.cube"
        run("render", "--scene", workdir / "scene.cfg",
            "--blobs", workdir / "blobs.txt", "--out", cube)
        out = workdir / "low.cube"
        assert run("degrade", "--input", cube, "--out", out, "--spatial",
                   "2", "--temporal", "4", "--poisson-scale", "10",
                   "--seed", "3") == 0
        img = io.read_cube(out)
        assert img.shape == (1, 4, 24)

    def test_preprocess(self, workdir):
        cube = workdir / "img.cube"
        run("render", "--scene", workdir / "scene.cfg",
            "--blobs", workdir / "blobs.txt", "--out", cube)
        out = workdir / "pp.cube"
        assert run("preprocess", "--input", cube, "--out", out, "--mode",
                   "spad-background", "--lowpass-sigma", "20",
                   "--downsample", "4") == 0
        assert io.read_cube(out).shape[2] == 24

    def test_metrics_report_and_depth_map(self, workdir):
        cube = workdir / "img.cube"
        run("render", "--scene", workdir / "scene.cfg",
            "--blobs", workdir / "blobs.txt", "--out", cube)
        _, mesh = make_standard_scene("plane-4x4x96-quads2")
        io.write_obj(workdir / "gt.obj", mesh)
        io.write_obj(workdir / "cand.obj",
                     mesh.translated([0.0, 0.0, -1.0]))
        report = workdir / "report.tsv"
        dmap = workdir / "depth.pgm"
        assert run("metrics", cube, cube, "--candidate-mesh",
                   workdir / "cand.obj", "--gt-mesh", workdir / "gt.obj",
                   "--scene", workdir / "scene.cfg", "--report", report,
                   "--depth-map", dmap) == 0
        assert report.exists() and dmap.exists()

    def test_help_lists_defaults(self, capsys):
        with pytest.raises(SystemExit) as exc:
            main(["reconstruct", "--help"])
        assert exc.value.code == 0
        text = capsys.readouterr().out
        assert "--eta" in text and "1.005" in text
        assert "--sigma0" in text and "1.5" in text
