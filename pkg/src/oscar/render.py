"""Differentiable linear-probe B-mode renderer.

Each scanline is the ray r(t) = o + t d sampled at midpoint depths
t_i = (i + 0.5) * dt. Transmission uses an exclusive left-Riemann sum,

    T_i = exp(-sum_{j<i} (mu_j + beta_j) * dt),

so T_0 = 1 and a reflector's own echo is not attenuated by itself. The
intensity is I_i = T_i * (beta_i + sigma_i).
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor
from .field import FieldModel

AcousticFn = Callable[[np.ndarray], Tensor]

TRANSMISSION = "transmission"
DIRECT = "direct"


class PoseError(ValueError):
    pass


@dataclass(frozen=True)
class ProbeSpec:
    scanlines: int = 128      # W
    samples: int = 128        # H
    depth: float = 1.9
    width: float = 1.8

    def __post_init__(self):
        if self.scanlines < 2 or self.samples < 2:
            raise ValueError("ProbeSpec needs at least 2 scanlines and 2 samples")
        if not (self.depth > 0 and self.width > 0):
            raise ValueError("ProbeSpec depth and width must be positive")

    @property
    def dt(self) -> float:
        return self.depth / self.samples

    def sample_depths(self) -> np.ndarray:
        return (np.arange(self.samples) + 0.5) * self.dt


def validate_pose(pose: np.ndarray, tol: float = 1e-6) -> np.ndarray:
    pose = np.asarray(pose, dtype=np.float64)
    if pose.shape != (4, 4):
        raise PoseError(f"pose must be 4x4, got {pose.shape}")
    rot = pose[:3, :3]
    if not np.allclose(rot.T @ rot, np.eye(3), atol=tol) or abs(np.linalg.det(rot) - 1.0) > tol:
        raise PoseError("pose rotation block is not a proper rotation")
    if not np.allclose(pose[3], [0, 0, 0, 1], atol=tol):
        raise PoseError("pose last row must be [0, 0, 0, 1]")
    return pose


def generate_rays(pose: np.ndarray, spec: ProbeSpec) -> tuple[np.ndarray, np.ndarray]:
    """Origins (W, 3) and unit directions (W, 3) in world coordinates.

    In the probe frame the array lies along +x and fires along +z.
    """
    pose = validate_pose(pose)
    lateral = (np.arange(spec.scanlines) / (spec.scanlines - 1) - 0.5) * spec.width
    local = np.zeros((spec.scanlines, 3))
    local[:, 0] = lateral
    origins = local @ pose[:3, :3].T + pose[:3, 3]
    axis = pose[:3, :3] @ np.array([0.0, 0.0, 1.0])
    directions = np.tile(axis / np.linalg.norm(axis), (spec.scanlines, 1))
    return origins, directions


def transmission(losses, dt: float) -> Tensor:
    """Transmission along the last axis from per-sample mu + beta."""
    losses = dc.as_tensor(losses)
    if np.any(losses.data < 0):
        raise ValueError("transmission: attenuation/reflection losses must be nonnegative")
    return dc.exp(dc.neg(dc.cumsum(losses, axis=-1, exclusive=True)) * dt)


def render_rays(field: AcousticFn, origins: np.ndarray, directions: np.ndarray,
                depths: np.ndarray, dt: float, mode: str = TRANSMISSION) -> tuple[Tensor, Tensor]:
    """Render R rays at the given sample depths.

    Returns the image (n_depths, R), rows ordered by depth, and the acoustic
    samples (R, n_depths, 3) that produced it.
    """
    origins = np.asarray(origins, dtype=np.float64).reshape(-1, 3)
    directions = np.asarray(directions, dtype=np.float64).reshape(-1, 3)
    depths = np.asarray(depths, dtype=np.float64)
    rays, n = len(origins), len(depths)
    pts = origins[:, None, :] + depths[None, :, None] * directions[:, None, :]
    acoustic = dc.reshape(field(pts.reshape(-1, 3)), (rays, n, 3))
    beta, sigma, mu = acoustic[:, :, 0], acoustic[:, :, 1], acoustic[:, :, 2]
    echo = beta + sigma
    if mode == TRANSMISSION:
        intensity = transmission(mu + beta, dt) * echo
    elif mode == DIRECT:
        intensity = echo
    else:
        raise ValueError(f"unknown render mode {mode!r}")
    return dc.transpose(intensity), acoustic


def render_scanline(field: AcousticFn, origin, direction, spec: ProbeSpec,
                    mode: str = TRANSMISSION) -> Tensor:
    direction = np.asarray(direction, dtype=np.float64)
    if abs(np.linalg.norm(direction) - 1.0) > 1e-9:
        raise ValueError("ray direction must be a unit vector")
    image, _ = render_rays(field, np.reshape(origin, (1, 3)), direction.reshape(1, 3),
                           spec.sample_depths(), spec.dt, mode)
    return dc.reshape(image, (spec.samples,))


def render_frame(field: AcousticFn, pose: np.ndarray, spec: ProbeSpec,
                 mode: str = TRANSMISSION) -> Tensor:
    """H x W image; column j is scanline j, row i is depth t_i."""
    origins, directions = generate_rays(pose, spec)
    image, _ = render_rays(field, origins, directions, spec.sample_depths(), spec.dt, mode)
    return image


def render_patch(field: AcousticFn, pose: np.ndarray, spec: ProbeSpec, row: int, col: int,
                 size: int, mode: str = TRANSMISSION) -> tuple[Tensor, Tensor]:
    """Rows [row, row+size) of scanlines [col, col+size).

    Every ray is marched from the transducer down to the patch's last row
    because transmission depends on everything above.
    """
    if row < 0 or col < 0 or row + size > spec.samples or col + size > spec.scanlines:
        raise ValueError(f"patch ({row}, {col}, {size}) outside the {spec.samples}x{spec.scanlines} frame")
    origins, directions = generate_rays(pose, spec)
    depths = spec.sample_depths()[: row + size]
    image, acoustic = render_rays(field, origins[col:col + size], directions[col:col + size],
                                  depths, spec.dt, mode)
    return image[row:row + size], acoustic


def render_frame_numpy(params, z: np.ndarray, pose: np.ndarray, spec: ProbeSpec,
                       mode: str = TRANSMISSION) -> np.ndarray:
    """Frame render straight from a FieldParams, no gradients recorded."""
    model = FieldModel(params, trainable=False)
    return render_frame(model.acoustic_field(np.asarray(z)), pose, spec, mode).data
