"""Occupancy grids, iso-surfaces, mesh IO and surface-distance metrics."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components
from scipy.spatial import cKDTree
from skimage import measure

from .field import FieldParams, eval_occupancy

DEFAULT_TAU = 0.01
DEFAULT_SAMPLES = 10_000


def grid_coords(n: int, lo: float = -1.0, hi: float = 1.0) -> np.ndarray:
    """Cell-centre coordinates along one axis."""
    h = (hi - lo) / n
    return lo + (np.arange(n) + 0.5) * h


def grid_points(n: int, lo: float = -1.0, hi: float = 1.0) -> np.ndarray:
    """(n^3, 3) lattice centres, row-major with x fastest."""
    c = grid_coords(n, lo, hi)
    zz, yy, xx = np.meshgrid(c, c, c, indexing="ij")
    return np.stack([xx.ravel(), yy.ravel(), zz.ravel()], axis=1)


@dataclass
class OccupancyGrid:
    n: int
    values: np.ndarray          # (n^3,), x fastest
    lo: float = -1.0
    hi: float = 1.0

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64).reshape(-1)
        if self.n < 2:
            raise ValueError("grid resolution must be >= 2")
        if self.values.size != self.n ** 3:
            raise ValueError(f"grid has {self.values.size} values, expected {self.n ** 3}")
        if np.any(self.values < 0) or np.any(self.values > 1):
            raise ValueError("occupancy values must lie in [0, 1]")

    @property
    def spacing(self) -> float:
        return (self.hi - self.lo) / self.n

    def volume_xyz(self) -> np.ndarray:
        """Array indexed [ix, iy, iz]."""
        return self.values.reshape(self.n, self.n, self.n).transpose(2, 1, 0)

    def points(self) -> np.ndarray:
        return grid_points(self.n, self.lo, self.hi)

    def lookup(self, pts: np.ndarray) -> np.ndarray:
        """Nearest-cell values at arbitrary points (clamped to the grid)."""
        pts = np.asarray(pts, dtype=np.float64).reshape(-1, 3)
        idx = np.clip(np.floor((pts - self.lo) / self.spacing).astype(int), 0, self.n - 1)
        return self.values[idx[:, 0] + self.n * (idx[:, 1] + self.n * idx[:, 2])]

    def resample(self, n: int) -> "OccupancyGrid":
        return OccupancyGrid(n, self.lookup(grid_points(n, self.lo, self.hi)), self.lo, self.hi)


def query_occupancy_grid(params: FieldParams, z: np.ndarray, n: int) -> OccupancyGrid:
    if n < 2:
        raise ValueError("grid resolution must be >= 2")
    return OccupancyGrid(n, eval_occupancy(params, grid_points(n), z))


@dataclass
class TriangleMesh:
    vertices: np.ndarray        # (V, 3)
    triangles: np.ndarray       # (F, 3) int

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.triangles = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        if self.triangles.size and (self.triangles.min() < 0 or self.triangles.max() >= len(self.vertices)):
            raise ValueError("triangle index out of range")

    @property
    def is_empty(self) -> bool:
        return len(self.triangles) == 0

    def areas(self) -> np.ndarray:
        v = self.vertices[self.triangles]
        return 0.5 * np.linalg.norm(np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0]), axis=1)

    def euler_characteristic(self) -> int:
        t = self.triangles
        edges = np.sort(np.concatenate([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]]), axis=1)
        n_edges = len(np.unique(edges, axis=0))
        n_verts = len(np.unique(t))
        return n_verts - n_edges + len(t)

    def component_face_counts(self) -> np.ndarray:
        """Faces per connected component (sharing a vertex connects), descending."""
        if self.is_empty:
            return np.zeros(0, dtype=int)
        t = self.triangles
        v = len(self.vertices)
        rows = np.concatenate([t[:, 0], t[:, 1]])
        cols = np.concatenate([t[:, 1], t[:, 2]])
        adj = coo_matrix((np.ones(len(rows)), (rows, cols)), shape=(v, v))
        _, labels = connected_components(adj, directed=False)
        return np.sort(np.bincount(labels[t[:, 0]]))[::-1]

    def largest_component_fraction(self) -> float:
        counts = self.component_face_counts()
        return float(counts[0] / counts.sum()) if counts.size else 0.0


def marching_cubes(grid: OccupancyGrid, iso: float = 0.5) -> TriangleMesh:
    """Iso-surface of the occupancy grid, vertices in world coordinates.

    Tie rule: a cell value equal to ``iso`` counts as inside, so a grid with
    every value >= iso (e.g. uniform 0.5) or every value < iso gives an empty
    mesh. Triangles with area <= 1e-12 are dropped.
    """
    vol = grid.volume_xyz()
    if vol.min() >= iso or vol.max() < iso:
        return TriangleMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=int))
    verts, faces, _, _ = measure.marching_cubes(vol, level=iso, method="lewiner")
    verts = grid.lo + (verts + 0.5) * grid.spacing
    mesh = TriangleMesh(verts, faces)
    keep = mesh.areas() > 1e-12
    return TriangleMesh(verts, faces[keep])


def sample_mesh_surface(mesh: TriangleMesh, count: int = DEFAULT_SAMPLES, seed: int = 0) -> np.ndarray:
    """Area-weighted uniform samples on the surface."""
    if mesh.is_empty:
        raise ValueError("cannot sample an empty mesh")
    rng = np.random.default_rng(seed)
    areas = mesh.areas()
    tri = rng.choice(len(areas), size=count, p=areas / areas.sum())
    r1 = np.sqrt(rng.random(count))
    r2 = rng.random(count)
    v = mesh.vertices[mesh.triangles[tri]]
    return ((1 - r1)[:, None] * v[:, 0] + (r1 * (1 - r2))[:, None] * v[:, 1]
            + (r1 * r2)[:, None] * v[:, 2])


def _check_sets(a, b):
    a = np.asarray(a, dtype=np.float64).reshape(-1, 3)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 3)
    if len(a) == 0 or len(b) == 0:
        raise ValueError("point sets must be nonempty")
    return a, b


def nearest_distances(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """Exact Euclidean distance from each src point to its nearest dst point."""
    _, idx = cKDTree(dst).query(src, k=1)
    diff = src - dst[idx]
    return np.sqrt(np.sum(diff * diff, axis=1))


def hd95(a, b) -> float:
    """Max of the two directed 95th-percentile nearest-neighbour distances."""
    a, b = _check_sets(a, b)
    return float(max(np.percentile(nearest_distances(a, b), 95),
                     np.percentile(nearest_distances(b, a), 95)))


def chamfer(a, b) -> float:
    """mean_a min_b |a-b|^2 + mean_b min_a |a-b|^2."""
    a, b = _check_sets(a, b)
    return float(np.mean(nearest_distances(a, b) ** 2) + np.mean(nearest_distances(b, a) ** 2))


def f1_score(pred, gt, tau: float = DEFAULT_TAU) -> float:
    if tau <= 0:
        raise ValueError("tau must be positive")
    pred, gt = _check_sets(pred, gt)
    precision = float(np.mean(nearest_distances(pred, gt) <= tau))
    recall = float(np.mean(nearest_distances(gt, pred) <= tau))
    if precision + recall == 0:
        return 0.0
    return 2 * precision * recall / (precision + recall)


def mesh_metrics(pred: TriangleMesh, gt: TriangleMesh, samples: int = DEFAULT_SAMPLES,
                 seed: int = 0, tau: float = DEFAULT_TAU) -> dict:
    """HD95 / Chamfer / F1 on fixed-seed surface samples.

    An empty predicted mesh scores inf distances and F1 = 0.
    """
    row = {"tau": tau, "samples": samples, "seed": seed}
    if pred.is_empty:
        return {"hd95": float("inf"), "chamfer": float("inf"), "f1": 0.0, **row}
    pa = sample_mesh_surface(pred, samples, seed)
    pb = sample_mesh_surface(gt, samples, seed + 1)
    return {"hd95": hd95(pa, pb), "chamfer": chamfer(pa, pb), "f1": f1_score(pa, pb, tau), **row}


# -- mesh IO -----------------------------------------------------------------------
def write_ply(mesh: TriangleMesh, path) -> None:
    lines = ["ply", "format ascii 1.0", f"element vertex {len(mesh.vertices)}",
             "property double x", "property double y", "property double z",
             f"element face {len(mesh.triangles)}", "property list uchar int vertex_indices",
             "end_header"]
    lines += [f"{x:.9g} {y:.9g} {z:.9g}" for x, y, z in mesh.vertices]
    lines += [f"3 {a} {b} {c}" for a, b, c in mesh.triangles]
    Path(path).write_text("\n".join(lines) + "\n")


def read_ply(path) -> TriangleMesh:
    text = Path(path).read_text().splitlines()
    if not text or text[0].strip() != "ply":
        raise ValueError(f"{path}: not a PLY file")
    n_v = n_f = 0
    i = 1
    while text[i].strip() != "end_header":
        parts = text[i].split()
        if parts[:2] == ["element", "vertex"]:
            n_v = int(parts[2])
        elif parts[:2] == ["element", "face"]:
            n_f = int(parts[2])
        elif parts[:2] == ["format", "binary_little_endian"]:
            raise ValueError(f"{path}: only ASCII PLY is supported")
        i += 1
    body = text[i + 1:]
    verts = np.array([[float(v) for v in ln.split()[:3]] for ln in body[:n_v]]).reshape(-1, 3)
    faces = []
    for ln in body[n_v:n_v + n_f]:
        parts = [int(v) for v in ln.split()]
        if parts[0] != 3:
            raise ValueError(f"{path}: only triangle faces are supported")
        faces.append(parts[1:4])
    return TriangleMesh(verts, np.array(faces, dtype=int).reshape(-1, 3))


def write_obj(mesh: TriangleMesh, path) -> None:
    lines = [f"v {x:.9g} {y:.9g} {z:.9g}" for x, y, z in mesh.vertices]
    lines += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in mesh.triangles]
    Path(path).write_text("\n".join(lines) + "\n")
