"""File formats: transient cubes, density volumes, OBJ meshes, scene and
blob text files, graymap dumps, run manifests.

Binary containers carry a self-describing ASCII header terminated by an
``end_header`` line, followed by raw little-endian float64 data. All writers
go through an atomic temp-file + rename step.
"""

from __future__ import annotations

import hashlib
import json
import os
import tempfile
import time
from pathlib import Path

import numpy as np

from .backproject import DensityVolume
from .blobfield import BlobSet
from .optimize import RunRecord
from .scene import (BRDF, SceneConfig, TemporalAxis, TransientImage,
                    TriangleMesh, VolumeSpec)

CUBE_MAGIC = "echotrace-cube 1"
VOLUME_MAGIC = "echotrace-volume 1"


def atomic_write_bytes(path, data: bytes) -> None:
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent or Path("."),
                               prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode())


def sha256_of(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


# ---------------------------------------------------------------------------
# transient cube


def write_cube(path, image: TransientImage, lasers=None, detectors=None) -> None:
    """Write a transient cube; laser/detector coordinates are optional
    provenance carried in the header."""
    n_l, n_d, n_b = image.shape
    lines = [CUBE_MAGIC,
             f"n_lasers {n_l}",
             f"n_detectors {n_d}",
             f"n_bins {n_b}",
             f"t0 {float(image.axis.t0)!r}",
             f"dt {float(image.axis.dt)!r}",
             "byte_order little",
             "dtype float64",
             "order laser detector bin"]
    if image.detector_shape is not None:
        lines.append("detector_shape %d %d" % image.detector_shape)
    for label, pts in (("lasers", lasers), ("detectors", detectors)):
        if pts is not None:
            pts = np.asarray(pts, dtype=np.float64)
            lines.append(f"{label} {len(pts)}")
            lines.extend(" ".join(repr(float(c)) for c in p) for p in pts)
    lines.append("end_header")
    header = "\n".join(lines) + "\n"
    payload = np.ascontiguousarray(image.values, dtype="<f8").tobytes()
    atomic_write_bytes(path, header.encode() + payload)


def read_cube(path) -> TransientImage:
    raw = Path(path).read_bytes()
    marker = b"end_header\n"
    split = raw.find(marker)
    if split < 0:
        raise ValueError(f"{path}: not a transient cube (missing end_header)")
    head = raw[:split].decode().splitlines()
    if not head or head[0].strip() != CUBE_MAGIC:
        raise ValueError(f"{path}: bad magic, expected '{CUBE_MAGIC}'")
    fields: dict[str, str] = {}
    i = 1
    while i < len(head):
        key, _, rest = head[i].partition(" ")
        if key in ("lasers", "detectors"):
            i += int(rest) + 1  # coordinate block is provenance only
            continue
        fields[key] = rest.strip()
        i += 1
    n_l = int(fields["n_lasers"])
    n_d = int(fields["n_detectors"])
    n_b = int(fields["n_bins"])
    axis = TemporalAxis(float(fields["t0"]), float(fields["dt"]), n_b)
    if fields.get("byte_order", "little") != "little":
        raise ValueError(f"{path}: unsupported byte order")
    shape = None
    if "detector_shape" in fields:
        shape = tuple(int(v) for v in fields["detector_shape"].split())
    data = np.frombuffer(raw[split + len(marker):], dtype="<f8")
    if data.size != n_l * n_d * n_b:
        raise ValueError(f"{path}: payload has {data.size} values, "
                         f"expected {n_l * n_d * n_b}")
    values = data.reshape(n_l, n_d, n_b).astype(np.float64)
    return TransientImage(values, axis, shape)


# ---------------------------------------------------------------------------
# density volume


def write_volume(path, volume: DensityVolume) -> None:
    lines = [VOLUME_MAGIC,
             "lo " + " ".join(repr(float(v)) for v in volume.lo),
             "hi " + " ".join(repr(float(v)) for v in volume.hi),
             "resolution %d %d %d" % volume.resolution,
             "byte_order little",
             "dtype float64",
             "order x y z",
             "end_header"]
    header = "\n".join(lines) + "\n"
    payload = np.ascontiguousarray(volume.values, dtype="<f8").tobytes()
    atomic_write_bytes(path, header.encode() + payload)


def read_volume(path) -> DensityVolume:
    raw = Path(path).read_bytes()
    marker = b"end_header\n"
    split = raw.find(marker)
    if split < 0:
        raise ValueError(f"{path}: not a density volume")
    head = raw[:split].decode().splitlines()
    if not head or head[0].strip() != VOLUME_MAGIC:
        raise ValueError(f"{path}: bad magic, expected '{VOLUME_MAGIC}'")
    fields = dict(line.split(" ", 1) for line in head[1:] if " " in line)
    lo = np.array([float(v) for v in fields["lo"].split()])
    hi = np.array([float(v) for v in fields["hi"].split()])
    res = tuple(int(v) for v in fields["resolution"].split())
    data = np.frombuffer(raw[split + len(marker):], dtype="<f8")
    if data.size != np.prod(res):
        raise ValueError(f"{path}: payload size mismatch")
    return DensityVolume(lo, hi, data.reshape(res).astype(np.float64))


# ---------------------------------------------------------------------------
# meshes (ASCII OBJ)


def write_obj(path, mesh: TriangleMesh) -> None:
    lines = [f"v {float(v[0])!r} {float(v[1])!r} {float(v[2])!r}"
             for v in mesh.vertices]
    lines += [f"f {t[0] + 1} {t[1] + 1} {t[2] + 1}" for t in mesh.triangles]
    atomic_write_text(path, "\n".join(lines) + "\n")


def read_obj(path) -> TriangleMesh:
    verts = []
    faces = []
    with open(path) as f:
        for line in f:
            parts = line.split()
            if not parts:
                continue
            if parts[0] == "v":
                verts.append([float(x) for x in parts[1:4]])
            elif parts[0] == "f":
                idx = [int(tok.split("/")[0]) - 1 for tok in parts[1:]]
                for k in range(1, len(idx) - 1):  # fan for polygons
                    faces.append([idx[0], idx[k], idx[k + 1]])
    if not verts:
        return TriangleMesh.empty()
    return TriangleMesh(np.asarray(verts), np.asarray(faces, dtype=np.int32))


# ---------------------------------------------------------------------------
# blob checkpoints


def write_blobs(path, blobs: BlobSet) -> None:
    lines = [f"{float(r[0])!r} {float(r[1])!r} {float(r[2])!r} "
             f"{float(r[3])!r}" for r in blobs.data]
    atomic_write_text(path, "\n".join(lines) + ("\n" if lines else ""))


def read_blobs(path) -> BlobSet:
    rows = []
    with open(path) as f:
        for line in f:
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            vals = [float(x) for x in line.split()]
            if len(vals) != 4:
                raise ValueError(f"{path}: expected 'x y z sigma' per line")
            rows.append(vals)
    return BlobSet(np.asarray(rows) if rows else None)


# ---------------------------------------------------------------------------
# scene config


def write_scene(path, scene: SceneConfig) -> None:
    lines = ["# echotrace scene",
             "wall_point " + " ".join(repr(float(v)) for v in scene.wall_point),
             "wall_normal " + " ".join(repr(float(v)) for v in scene.wall_normal),
             f"t0 {float(scene.axis.t0)!r}",
             f"dt {float(scene.axis.dt)!r}",
             f"n_bins {scene.axis.n_bins}",
             f"brdf {scene.brdf.kind}"]
    if scene.brdf.kind == "lambertian":
        lines.append(f"albedo {float(scene.brdf.albedo)!r}")
    else:
        lines.append(f"roughness {float(scene.brdf.roughness)!r}")
        lines.append(f"reflectance {float(scene.brdf.reflectance)!r}")
    lines += ["volume_lo " + " ".join(repr(float(v)) for v in scene.volume.lo),
              "volume_hi " + " ".join(repr(float(v)) for v in scene.volume.hi),
              "volume_resolution %d %d %d" % tuple(scene.volume.resolution)]
    if scene.detector_shape is not None:
        lines.append("detector_shape %d %d" % scene.detector_shape)
    lines.append(f"lasers {scene.n_lasers}")
    lines += [" ".join(repr(float(c)) for c in p) for p in scene.lasers]
    lines.append(f"detectors {scene.n_detectors}")
    lines += [" ".join(repr(float(c)) for c in p) for p in scene.detectors]
    atomic_write_text(path, "\n".join(lines) + "\n")


def read_scene(path) -> SceneConfig:
    fields: dict[str, str] = {}
    lasers: list[list[float]] = []
    detectors: list[list[float]] = []
    with open(path) as f:
        lines = [ln.split("#", 1)[0].strip() for ln in f]
    lines = [ln for ln in lines if ln]
    i = 0
    while i < len(lines):
        key, _, rest = lines[i].partition(" ")
        if key in ("lasers", "detectors"):
            count = int(rest)
            block = [[float(x) for x in lines[i + 1 + j].split()]
                     for j in range(count)]
            (lasers if key == "lasers" else detectors).extend(block)
            i += count + 1
            continue
        fields[key] = rest.strip()
        i += 1
    required = ("wall_point", "wall_normal", "t0", "dt", "n_bins", "brdf")
    missing = [k for k in required if k not in fields]
    if missing:
        raise ValueError(f"{path}: missing keys {missing}")
    if "detector_grid" in fields and not detectors:
        from .datasets import detector_grid
        nx, ny, span = fields["detector_grid"].split()
        detectors = detector_grid(int(nx), int(ny), float(span))
        fields.setdefault("detector_shape", f"{nx} {ny}")
    if fields["brdf"] == "lambertian":
        brdf = BRDF.make_lambertian(float(fields.get("albedo", 1.0)))
    elif fields["brdf"] == "blinn-metal":
        brdf = BRDF.make_blinn_metal(float(fields["roughness"]),
                                     float(fields.get("reflectance", 1.0)))
    else:
        raise ValueError(f"{path}: unknown brdf {fields['brdf']!r}")
    res = fields.get("volume_resolution", "128 128 128")
    volume = VolumeSpec(
        lo=[float(v) for v in fields.get("volume_lo", "-40 -40 5").split()],
        hi=[float(v) for v in fields.get("volume_hi", "40 40 85").split()],
        resolution=tuple(int(v) for v in res.split()))
    shape = None
    if "detector_shape" in fields:
        shape = tuple(int(v) for v in fields["detector_shape"].split())
    return SceneConfig(
        wall_point=[float(v) for v in fields["wall_point"].split()],
        wall_normal=[float(v) for v in fields["wall_normal"].split()],
        lasers=np.asarray(lasers), detectors=np.asarray(detectors),
        axis=TemporalAxis(float(fields["t0"]), float(fields["dt"]),
                          int(fields["n_bins"])),
        brdf=brdf, volume=volume, detector_shape=shape)


# ---------------------------------------------------------------------------
# graymaps, run logs, manifests


def write_pgm(path, values: np.ndarray, lo: float | None = None,
              hi: float | None = None) -> None:
    """8-bit binary PGM with min-max normalization (NaN renders black)."""
    v = np.asarray(values, dtype=np.float64)
    finite = np.isfinite(v)
    lo = float(np.min(v[finite])) if lo is None and finite.any() else (lo or 0.0)
    hi = float(np.max(v[finite])) if hi is None and finite.any() else (hi or 1.0)
    span = hi - lo if hi > lo else 1.0
    img = np.zeros(v.shape, dtype=np.uint8)
    img[finite] = np.clip((v[finite] - lo) / span * 255.0, 0, 255).astype(np.uint8)
    header = (f"P5\n# range {float(lo)!r} {float(hi)!r}\n"
              f"{v.shape[1]} {v.shape[0]}\n255\n")
    atomic_write_bytes(path, header.encode() + img.tobytes())


def write_run_log(path, record: RunRecord) -> None:
    lines = ["iteration\tphase\tdetail\tcost_before\tcost_after\tn_blobs\telapsed_s"]
    for r in record.rows:
        lines.append(f"{r.iteration}\t{r.phase}\t{r.detail}"
                     f"\t{float(r.cost_before)!r}\t{float(r.cost_after)!r}"
                     f"\t{r.n_blobs}\t{r.elapsed:.3f}")
    lines.append(f"# initial_cost {float(record.initial_cost)!r}")
    lines.append(f"# final_cost {float(record.final_cost)!r}")
    lines.append(f"# seed {record.seed}")
    atomic_write_text(path, "\n".join(lines) + "\n")


def write_manifest(path, command: str, config: dict, inputs, outputs,
                   seed=None, wall_clock: float | None = None) -> None:
    """Provenance record for a CLI run; inputs/outputs map path -> sha256."""
    from . import __version__
    from .kernels import active_backend_name
    manifest = {
        "command": command,
        "config": config,
        "inputs": {str(p): sha256_of(p) for p in inputs},
        "outputs": {str(p): sha256_of(p) for p in outputs},
        "seed": seed,
        "version": __version__,
        "backend": active_backend_name(),
        "timestamp": time.strftime("%Y-%m-%dT%H:%M:%S"),
        "wall_clock_s": wall_clock,
    }
    atomic_write_text(path, json.dumps(manifest, indent=2, sort_keys=True) + "\n")
