import numpy as np
import pytest

from echotrace import io
from echotrace.backproject import DensityVolume
from echotrace.blobfield import BlobSet
from echotrace.scene import TemporalAxis, TransientImage, TriangleMesh

from conftest import simple_scene


class TestCubeFormat:
    def test_round_trip_bitexact(self, tmp_path):
        rng = np.random.default_rng(0)
        img = TransientImage(rng.uniform(-1, 2, (2, 12, 40)),
                             TemporalAxis(80.0, 0.4, 40), (3, 4))
        path = tmp_path / "a.cube"
        io.write_cube(path, img, lasers=[[45.0, 0, 0]],
                      detectors=np.zeros((12, 3)))
        back = io.read_cube(path)
        assert np.array_equal(back.values, img.values)
        assert back.axis == img.axis
        assert back.detector_shape == (3, 4)

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "junk.cube"
        path.write_bytes(b"not a cube\nend_header\n")
        with pytest.raises(ValueError, match="magic"):
            io.read_cube(path)

    def test_truncated_payload_rejected(self, tmp_path):
        img = TransientImage(np.ones((1, 2, 4)), TemporalAxis(0.0, 1.0, 4))
        path = tmp_path / "t.cube"
        io.write_cube(path, img)
        data = path.read_bytes()
        path.write_bytes(data[:-16])
        with pytest.raises(ValueError, match="payload"):
            io.read_cube(path)


class TestVolumeFormat:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(1)
        vol = DensityVolume(np.array([-1.0, -2, 0]), np.array([3.0, 2, 4]),
                            rng.normal(size=(6, 5, 4)))
        path = tmp_path / "d.vol"
        io.write_volume(path, vol)
        back = io.read_volume(path)
        assert np.array_equal(back.values, vol.values)
        assert np.array_equal(back.lo, vol.lo)
        assert np.array_equal(back.hi, vol.hi)


class TestObj:
    def test_round_trip(self, tmp_path):
        mesh = TriangleMesh([[0, 0, 0], [1, 0, 0], [0, 1, 0], [1, 1, 0.5]],
                            [[0, 1, 2], [1, 3, 2]])
        path = tmp_path / "m.obj"
        io.write_obj(path, mesh)
        back = io.read_obj(path)
        assert np.array_equal(back.vertices, mesh.vertices)
        assert np.array_equal(back.triangles, mesh.triangles)

    def test_slash_indices_and_quads(self, tmp_path):
        path = tmp_path / "q.obj"
        path.write_text("v 0 0 0\nv 1 0 0\nv 1 1 0\nv 0 1 0\n"
                        "f 1/1 2/2 3/3 4/4\n")
        mesh = io.read_obj(path)
        assert mesh.n_triangles == 2  # quad fanned into two triangles

    def test_empty_file(self, tmp_path):
        path = tmp_path / "e.obj"
        path.write_text("")
        assert io.read_obj(path).is_empty()


class TestBlobs:
    def test_round_trip_bitexact(self, tmp_path):
        blobs = BlobSet(np.array([[0.1, -2.5, 45.0, 1.5],
                                  [1 / 3, 2 / 7, 44.44, 0.123456789012345]]))
        path = tmp_path / "b.txt"
        io.write_blobs(path, blobs)
        assert io.read_blobs(path) == blobs

    def test_comments_and_blank_lines(self, tmp_path):
        path = tmp_path / "b.txt"
        path.write_text("# header\n\n1 2 3 0.5  # trailing\n")
        blobs = io.read_blobs(path)
        assert len(blobs) == 1

    def test_empty_set(self, tmp_path):
        path = tmp_path / "b.txt"
        io.write_blobs(path, BlobSet())
        assert len(io.read_blobs(path)) == 0


class TestSceneConfig:
    def test_round_trip(self, tmp_path):
        scene = simple_scene(n_lasers=4, nx=4, ny=4, n_bins=64)
        path = tmp_path / "s.cfg"
        io.write_scene(path, scene)
        back = io.read_scene(path)
        assert np.array_equal(back.lasers, scene.lasers)
        assert np.array_equal(back.detectors, scene.detectors)
        assert back.axis == scene.axis
        assert back.brdf == scene.brdf
        assert back.detector_shape == scene.detector_shape
        assert np.array_equal(back.volume.lo, scene.volume.lo)

    def test_detector_grid_shorthand(self, tmp_path):
        path = tmp_path / "s.cfg"
        path.write_text(
            "wall_point 0 0 0\nwall_normal 0 0 1\n"
            "t0 80\ndt 0.4\nn_bins 64\nbrdf lambertian\nalbedo 0.3\n"
            "detector_grid 4 4 80\nlasers 1\n45 0 0\n")
        scene = io.read_scene(path)
        assert scene.n_detectors == 16
        assert scene.detector_shape == (4, 4)

    def test_missing_keys_reported(self, tmp_path):
        path = tmp_path / "s.cfg"
        path.write_text("wall_point 0 0 0\n")
        with pytest.raises(ValueError, match="missing keys"):
            io.read_scene(path)


class TestPgmAndManifest:
    def test_pgm_header(self, tmp_path):
        path = tmp_path / "img.pgm"
        io.write_pgm(path, np.array([[0.0, 1.0], [2.0, np.nan]]))
        data = path.read_bytes()
        assert data.startswith(b"P5\n")
        assert data.endswith(bytes([0, 127, 255, 0]))

    def test_manifest_digests(self, tmp_path):
        src = tmp_path / "in.txt"
        src.write_text("x")
        dst = tmp_path / "out.txt"
        dst.write_text("y")
        io.write_manifest(tmp_path / "m.json", "render", {"k": 1},
                          [src], [dst], seed=7)
        import json
        m = json.loads((tmp_path / "m.json").read_text())
        assert m["command"] == "render"
        assert m["seed"] == 7
        assert len(m["inputs"][str(src)]) == 64

    def test_atomic_write_no_partial_on_error(self, tmp_path):
        target = tmp_path / "missing-dir" / "f.bin"
        with pytest.raises(FileNotFoundError):
            io.atomic_write_bytes(target, b"data")
        assert not target.exists()
        assert list(tmp_path.iterdir()) == []
