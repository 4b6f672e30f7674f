"""Procedural phantoms with analytic occupancy and acoustic property fields.

Tissue classes:
  bone        solid interior; strong attenuation mu, faint scattering
  bone shell  thin layer (0.02) just inside the surface whose outward normal
              points toward the probe side (+z); carries the reflection beta
  soft tissue everything else inside the tissue box; moderate textured sigma
  background  outside the tissue box; near zero
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..geometry import grid_points

FAMILIES = ("sphere", "capsule", "vertebra", "plate", "empty")
SHELL = 0.02
TEXTURE_CELLS = 40
PROBE_SIDE = np.array([0.0, 0.0, 1.0])


@dataclass
class AcousticSpec:
    bone_beta: float = 0.75
    bone_mu: float = 20.0
    bone_sigma: float = 0.03
    tissue_sigma: float = 0.22
    tissue_mu: float = 0.2
    background_sigma: float = 0.0
    texture_std: float = 0.2
    tissue_extent: float = 0.95

    @classmethod
    def randomized(cls, rng: np.random.Generator) -> "AcousticSpec":
        return cls(bone_beta=rng.uniform(0.6, 0.9), bone_mu=rng.uniform(15.0, 25.0),
                   bone_sigma=rng.uniform(0.02, 0.05), tissue_sigma=rng.uniform(0.15, 0.3),
                   tissue_mu=rng.uniform(0.1, 0.3))


@dataclass
class PhantomSpec:
    seed: int = 0
    family: str = "vertebra"
    size: dict = field(default_factory=dict)
    acoustic: AcousticSpec = field(default_factory=AcousticSpec)

    @classmethod
    def random(cls, seed: int, family: str = "vertebra") -> "PhantomSpec":
        """Shape and acoustic parameters drawn from ``seed``."""
        rng = np.random.default_rng([seed, 7])
        size = random_size(family, rng)
        acoustic = AcousticSpec.randomized(rng) if family != "empty" else AcousticSpec()
        return cls(seed=seed, family=family, size=size, acoustic=acoustic)


DEFAULT_SIZES = {
    "sphere": {"radius": 0.5, "center": [0.0, 0.0, 0.0]},
    "capsule": {"a": [-0.3, 0.0, -0.1], "b": [0.3, 0.0, -0.1], "radius": 0.2},
    "vertebra": {"lobe_offset": 0.22, "lobe_z": -0.18, "lobe_radii": [0.29, 0.23, 0.15],
                 "process_height": 0.42, "process_radius": 0.085, "process_lean": 0.0},
    "plate": {"top": 0.0, "thickness": 0.2, "half_extent": 0.8},
    "empty": {},
}


def random_size(family: str, rng: np.random.Generator) -> dict:
    if family == "sphere":
        return {"radius": rng.uniform(0.35, 0.55), "center": [0.0, 0.0, rng.uniform(-0.2, 0.0)]}
    if family == "capsule":
        h = rng.uniform(0.2, 0.4)
        return {"a": [-h, 0.0, -0.1], "b": [h, 0.0, -0.1], "radius": rng.uniform(0.15, 0.25)}
    if family == "vertebra":
        zc = rng.uniform(-0.25, -0.1)
        return {
            "lobe_offset": rng.uniform(0.18, 0.26),
            "lobe_z": zc,
            "lobe_radii": [rng.uniform(0.26, 0.32), rng.uniform(0.2, 0.26), rng.uniform(0.13, 0.18)],
            "process_height": rng.uniform(0.35, 0.5),
            "process_radius": rng.uniform(0.07, 0.1),
            "process_lean": rng.uniform(-0.1, 0.1),
        }
    if family == "plate":
        return {"top": 0.0, "thickness": 0.2, "half_extent": 0.8}
    if family == "empty":
        return {}
    raise ValueError(f"invalid phantom family {family!r}; expected one of {FAMILIES}")


def _ellipsoid_sdf(p, center, radii):
    q = (p - center) / radii
    k0 = np.linalg.norm(q, axis=-1)
    k1 = np.linalg.norm(q / radii, axis=-1)
    return k0 * (k0 - 1.0) / np.maximum(k1, 1e-12)


def _capsule_sdf(p, a, b, radius):
    ab = b - a
    t = np.clip(((p - a) @ ab) / (ab @ ab), 0.0, 1.0)
    return np.linalg.norm(p - (a + t[:, None] * ab), axis=-1) - radius


def _box_sdf(p, center, half):
    q = np.abs(p - center) - half
    outside = np.linalg.norm(np.maximum(q, 0.0), axis=-1)
    return outside + np.minimum(q.max(axis=-1), 0.0)


class Phantom:
    """Analytic fields for one subject. All methods take (N, 3) world points."""

    def __init__(self, spec: PhantomSpec):
        if spec.family not in FAMILIES:
            raise ValueError(f"invalid phantom family {spec.family!r}; expected one of {FAMILIES}")
        self.spec = spec
        self.family = spec.family
        self.size = {**DEFAULT_SIZES[spec.family], **spec.size}
        self.ac = spec.acoustic
        rng = np.random.default_rng([spec.seed, 11])
        std = self.ac.texture_std
        self._texture = np.exp(std * rng.standard_normal((TEXTURE_CELLS,) * 3) - 0.5 * std * std)

    # -- geometry ----------------------------------------------------------------
    def sdf(self, p: np.ndarray) -> np.ndarray:
        p = np.asarray(p, dtype=np.float64).reshape(-1, 3)
        s = self.size
        if self.family == "sphere":
            return np.linalg.norm(p - np.asarray(s["center"]), axis=-1) - s["radius"]
        if self.family == "capsule":
            return _capsule_sdf(p, np.asarray(s["a"], float), np.asarray(s["b"], float), s["radius"])
        if self.family == "plate":
            half = np.array([s["half_extent"], s["half_extent"], s["thickness"] / 2])
            return _box_sdf(p, np.array([0.0, 0.0, s["top"] - s["thickness"] / 2]), half)
        if self.family == "vertebra":
            radii = np.asarray(s["lobe_radii"], float)
            off, zc = s["lobe_offset"], s["lobe_z"]
            left = _ellipsoid_sdf(p, np.array([-off, 0.0, zc]), radii)
            right = _ellipsoid_sdf(p, np.array([off, 0.0, zc]), radii)
            base = np.array([0.0, 0.0, zc])
            tip = base + np.array([0.0, s["process_lean"], s["process_height"]])
            proc = _capsule_sdf(p, base, tip, s["process_radius"])
            return np.minimum(np.minimum(left, right), proc)
        return np.full(len(p), np.inf)

    def occupancy(self, p: np.ndarray) -> np.ndarray:
        return (self.sdf(p) <= 0.0).astype(np.float64)

    def lobe_centers(self) -> list[np.ndarray]:
        s = self.size
        return [np.array([-s["lobe_offset"], 0.0, s["lobe_z"]]), np.array([s["lobe_offset"], 0.0, s["lobe_z"]])]

    def _normal(self, p: np.ndarray, h: float = 1e-4) -> np.ndarray:
        g = np.zeros_like(p)
        for k in range(3):
            e = np.zeros(3)
            e[k] = h
            g[:, k] = (self.sdf(p + e) - self.sdf(p - e)) / (2 * h)
        return g / np.maximum(np.linalg.norm(g, axis=-1, keepdims=True), 1e-12)

    def texture(self, p: np.ndarray) -> np.ndarray:
        idx = np.clip(((p + 1.0) * 0.5 * TEXTURE_CELLS).astype(int), 0, TEXTURE_CELLS - 1)
        return self._texture[idx[:, 0], idx[:, 1], idx[:, 2]]

    # -- acoustics ---------------------------------------------------------------
    def acoustic(self, p: np.ndarray) -> np.ndarray:
        """(N, 3) columns [beta, sigma, mu]."""
        p = np.asarray(p, dtype=np.float64).reshape(-1, 3)
        out = np.zeros((len(p), 3))
        if self.family == "empty":
            return out
        ac = self.ac
        d = self.sdf(p)
        bone = d <= 0.0
        tissue = ~bone & np.all(np.abs(p) <= ac.tissue_extent, axis=-1)
        background = ~bone & ~tissue
        out[tissue, 1] = ac.tissue_sigma * self.texture(p[tissue])
        out[tissue, 2] = ac.tissue_mu
        out[background, 1] = ac.background_sigma
        out[bone, 1] = ac.bone_sigma
        out[bone, 2] = ac.bone_mu
        near = np.flatnonzero(bone & (d >= -SHELL))
        if len(near):
            facing = self._normal(p[near]) @ PROBE_SIDE > 0.0
            out[near[facing], 0] = ac.bone_beta
        return out


def make_phantom(spec: PhantomSpec) -> Phantom:
    return Phantom(spec)


def occupancy_grid_values(phantom: Phantom, n: int) -> np.ndarray:
    """n^3 indicator values at [-1, 1]^3 cell centres, x fastest."""
    return phantom.occupancy(grid_points(n))
