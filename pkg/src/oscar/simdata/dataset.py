"""On-disk dataset: manifest, 8-bit PGM frames, pose text files, occupancy grids.

<root>/manifest.txt                       key=value
<root>/<subject>/frames/<k>.pgm           binary P5, 8-bit
<root>/<subject>/poses/<k>.txt            4 rows x 4 floats, row-major
<root>/<subject>/occupancy.grid           b"OSCARGRD", u32 n, n^3 little-endian f64
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..geometry import OccupancyGrid, grid_points
from ..render import ProbeSpec
from .phantoms import PhantomSpec, make_phantom
from .simulate import default_sweeps, simulate_sweep

GRID_MAGIC = b"OSCARGRD"


class DatasetError(ValueError):
    pass


# -- primitive file formats -------------------------------------------------------
def write_pgm(path, image: np.ndarray) -> None:
    img = np.asarray(image)
    if img.dtype != np.uint8:
        img = np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
    h, w = img.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + img.tobytes())


def read_pgm(path) -> np.ndarray:
    """uint8 array of shape (H, W)."""
    data = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while data[pos:pos + 1] not in (b"\n", b""):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        tokens.append(data[start:pos])
    if tokens[0] != b"P5":
        raise DatasetError(f"{path}: not a binary PGM (P5)")
    w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    if maxval != 255:
        raise DatasetError(f"{path}: only 8-bit PGM supported")
    pixels = data[pos + 1:]
    if len(pixels) != w * h:
        raise DatasetError(f"{path}: expected {w * h} pixel bytes, found {len(pixels)}")
    return np.frombuffer(pixels, dtype=np.uint8).reshape(h, w).copy()


def write_pose(path, pose: np.ndarray) -> None:
    rows = [" ".join(repr(float(v)) for v in row) for row in np.asarray(pose, dtype=np.float64)]
    Path(path).write_text("\n".join(rows) + "\n")


def read_pose(path) -> np.ndarray:
    try:
        rows = [ln.split() for ln in Path(path).read_text().splitlines() if ln.strip()]
        pose = np.array([[float(v) for v in row] for row in rows])
    except ValueError as exc:
        raise DatasetError(f"{path}: malformed pose ({exc})") from None
    if pose.shape != (4, 4):
        raise DatasetError(f"{path}: malformed pose, expected 4x4 got {pose.shape}")
    return pose


def write_grid(path, grid: OccupancyGrid) -> None:
    Path(path).write_bytes(GRID_MAGIC + struct.pack("<I", grid.n)
                           + np.ascontiguousarray(grid.values, dtype="<f8").tobytes())


def read_grid(path) -> OccupancyGrid:
    data = Path(path).read_bytes()
    if data[:8] != GRID_MAGIC:
        raise DatasetError(f"{path}: bad occupancy grid magic")
    (n,) = struct.unpack("<I", data[8:12])
    body = data[12:]
    if len(body) != 8 * n ** 3:
        raise DatasetError(f"{path}: expected {n}^3 values, file holds {len(body) // 8}")
    return OccupancyGrid(n, np.frombuffer(body, dtype="<f8").astype(np.float64))


# -- dataset ------------------------------------------------------------------------
@dataclass
class Subject:
    sid: str
    split: str
    frames: np.ndarray          # (K, H, W) uint8
    poses: np.ndarray           # (K, 4, 4)
    occupancy: OccupancyGrid
    sweeps: int = 1

    @property
    def images(self) -> np.ndarray:
        """Frames as float intensities in [0, 1]."""
        return self.frames.astype(np.float64) / 255.0

    def sweep_of(self, k: int) -> int:
        return k * self.sweeps // len(self.frames)


@dataclass
class Dataset:
    subjects: list[Subject]
    probe: ProbeSpec
    mm_per_unit: float = 50.0
    seed: int = 0
    extra: dict = field(default_factory=dict)

    def split(self, name: str) -> list[Subject]:
        return [s for s in self.subjects if s.split == name]

    def get(self, sid: str) -> Subject:
        for s in self.subjects:
            if s.sid == sid:
                return s
        raise KeyError(sid)


@dataclass
class SimConfig:
    train: int = 8
    val: int = 2
    test: int = 2
    sweeps: int = 5
    frames_per_sweep: int = 20
    samples: int = 128
    scanlines: int = 128
    depth: float = 1.9
    width: float = 1.8
    mm_per_unit: float = 50.0
    seed: int = 0
    grid: int = 64
    family: str = "vertebra"
    speckle: float = 0.1
    fine_factor: int = 4
    sweep_extent: float = 0.35
    tilt: float = 15.0

    @property
    def probe(self) -> ProbeSpec:
        return ProbeSpec(self.scanlines, self.samples, self.depth, self.width)


def simulate_dataset(cfg: SimConfig, threads: int = 1) -> Dataset:
    splits = ["train"] * cfg.train + ["val"] * cfg.val + ["test"] * cfg.test
    spec = cfg.probe
    sweeps = default_sweeps(cfg.frames_per_sweep, cfg.tilt)
    if not 1 <= cfg.sweeps <= len(sweeps):
        raise ValueError(f"sweeps must be between 1 and {len(sweeps)}")
    sweeps = sweeps[:cfg.sweeps]
    for s in sweeps:
        s.start, s.stop = -cfg.sweep_extent, cfg.sweep_extent
    pts = grid_points(cfg.grid)
    subjects = []
    for i, split in enumerate(splits):
        phantom = make_phantom(PhantomSpec.random(cfg.seed * 1000 + i, cfg.family))
        frames, poses = [], []
        for k, sweep in enumerate(sweeps):
            f, p = simulate_sweep(phantom, sweep.poses(), spec, noise_seed=cfg.seed * 1000 + 100 * i + k,
                                  speckle_std=cfg.speckle, fine_factor=cfg.fine_factor, threads=threads)
            frames += f
            poses += p
        frames8 = np.stack([np.round(np.clip(f, 0, 1) * 255).astype(np.uint8) for f in frames])
        grid = OccupancyGrid(cfg.grid, phantom.occupancy(pts))
        subjects.append(Subject(f"s{i:03d}", split, frames8, np.stack(poses), grid, len(sweeps)))
    return Dataset(subjects, spec, cfg.mm_per_unit, cfg.seed, {"family": cfg.family})


def _fmt(v) -> str:
    return repr(v) if isinstance(v, float) else str(v)


def write_dataset(ds: Dataset, root) -> None:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    frames = {len(s.frames) for s in ds.subjects}
    if len(frames) != 1:
        raise DatasetError("all subjects must have the same number of frames")
    manifest = {
        "subjects": ",".join(s.sid for s in ds.subjects),
        "train": ",".join(s.sid for s in ds.split("train")),
        "val": ",".join(s.sid for s in ds.split("val")),
        "test": ",".join(s.sid for s in ds.split("test")),
        "frames": frames.pop(),
        "sweeps": ds.subjects[0].sweeps,
        "H": ds.probe.samples,
        "W": ds.probe.scanlines,
        "depth": ds.probe.depth,
        "width": ds.probe.width,
        "mm_per_unit": ds.mm_per_unit,
        "seed": ds.seed,
        **ds.extra,
    }
    (root / "manifest.txt").write_text("".join(f"{k}={_fmt(v)}\n" for k, v in manifest.items()))
    for s in ds.subjects:
        (root / s.sid / "frames").mkdir(parents=True, exist_ok=True)
        (root / s.sid / "poses").mkdir(parents=True, exist_ok=True)
        for k, (img, pose) in enumerate(zip(s.frames, s.poses)):
            write_pgm(root / s.sid / "frames" / f"{k}.pgm", img)
            write_pose(root / s.sid / "poses" / f"{k}.txt", pose)
        write_grid(root / s.sid / "occupancy.grid", s.occupancy)


def read_manifest(path) -> dict:
    out = {}
    for ln in Path(path).read_text().splitlines():
        if not ln.strip() or ln.lstrip().startswith("#"):
            continue
        if "=" not in ln:
            raise DatasetError(f"{path}: malformed manifest line {ln!r}")
        k, v = ln.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def read_dataset(root) -> Dataset:
    root = Path(root)
    if not (root / "manifest.txt").exists():
        raise DatasetError(f"{root}: missing manifest.txt")
    m = read_manifest(root / "manifest.txt")
    try:
        probe = ProbeSpec(int(m["W"]), int(m["H"]), float(m["depth"]), float(m["width"]))
        n_frames, sweeps = int(m["frames"]), int(m.get("sweeps", 1))
    except KeyError as exc:
        raise DatasetError(f"manifest missing key {exc}") from None
    split_of = {}
    for split in ("train", "val", "test"):
        for sid in filter(None, m.get(split, "").split(",")):
            split_of[sid] = split
    subjects = []
    for sid in filter(None, m["subjects"].split(",")):
        sdir = root / sid
        frame_files = sorted((sdir / "frames").glob("*.pgm"), key=lambda p: int(p.stem))
        if len(frame_files) != n_frames:
            raise DatasetError(f"{sid}: manifest declares {n_frames} frames, found {len(frame_files)}")
        frames, poses = [], []
        for k in range(n_frames):
            fpath = sdir / "frames" / f"{k}.pgm"
            if not fpath.exists():
                raise DatasetError(f"{sid}: missing frame {fpath.name}")
            img = read_pgm(fpath)
            if img.shape != (probe.samples, probe.scanlines):
                raise DatasetError(f"{sid}/frames/{k}.pgm: shape {img.shape} does not match manifest "
                                   f"{(probe.samples, probe.scanlines)}")
            ppath = sdir / "poses" / f"{k}.txt"
            if not ppath.exists():
                raise DatasetError(f"{sid}: missing pose file for frame {k}")
            frames.append(img)
            poses.append(read_pose(ppath))
        gpath = sdir / "occupancy.grid"
        if not gpath.exists():
            raise DatasetError(f"{sid}: missing occupancy.grid")
        subjects.append(Subject(sid, split_of.get(sid, "train"), np.stack(frames), np.stack(poses),
                                read_grid(gpath), sweeps))
    known = {"subjects", "train", "val", "test", "frames", "sweeps", "H", "W", "depth", "width",
             "mm_per_unit", "seed"}
    extra = {k: v for k, v in m.items() if k not in known}
    return Dataset(subjects, probe, float(m.get("mm_per_unit", 50.0)), int(m.get("seed", 0)), extra)
