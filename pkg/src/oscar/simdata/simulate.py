"""Brute-force B-mode simulator used as the reference for the neural renderer.

It evaluates the analytic phantom fields on a fine grid (``fine_factor``
times the renderer's samples per ray, plus the pixel depths themselves) and
integrates attenuation with the trapezoidal rule. Nothing here touches the
neural field or the autodiff tape.
"""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from scipy.integrate import cumulative_trapezoid

from ..render import ProbeSpec, generate_rays
from .phantoms import Phantom


def rotation(axis: str, degrees: float) -> np.ndarray:
    a = np.deg2rad(degrees)
    c, s = np.cos(a), np.sin(a)
    if axis == "x":
        return np.array([[1, 0, 0], [0, c, -s], [0, s, c]])
    if axis == "y":
        return np.array([[c, 0, s], [0, 1, 0], [-s, 0, c]])
    if axis == "z":
        return np.array([[c, -s, 0], [s, c, 0], [0, 0, 1]])
    raise ValueError(f"unknown axis {axis!r}")


# probe +z (axial) -> world -z, probe +x (lateral) -> world +x
LOOK_DOWN = rotation("x", 180.0)


def make_pose(rot: np.ndarray, translation) -> np.ndarray:
    pose = np.eye(4)
    pose[:3, :3] = rot
    pose[:3, 3] = translation
    return pose


@dataclass
class SweepTrajectory:
    """K poses on a straight line along world y, fixed orientation."""
    frames: int = 20
    start: float = -0.6
    stop: float = 0.6
    height: float = 0.95
    lateral: float = 0.0
    tilt_axis: str = "y"
    tilt_deg: float = 0.0

    def poses(self) -> list[np.ndarray]:
        rot = rotation(self.tilt_axis, self.tilt_deg) @ LOOK_DOWN
        ys = np.linspace(self.start, self.stop, self.frames)
        return [make_pose(rot, [self.lateral, y, self.height]) for y in ys]


def default_sweeps(frames: int = 20, tilt: float = 15.0) -> list[SweepTrajectory]:
    """One perpendicular sweep plus four ~15 degree tilted ones."""
    return [
        SweepTrajectory(frames=frames),
        SweepTrajectory(frames=frames, tilt_axis="y", tilt_deg=tilt),
        SweepTrajectory(frames=frames, tilt_axis="y", tilt_deg=-tilt),
        SweepTrajectory(frames=frames, tilt_axis="x", tilt_deg=tilt),
        SweepTrajectory(frames=frames, tilt_axis="x", tilt_deg=-tilt),
    ]


def oracle_scanlines(acoustic_fn, origins: np.ndarray, directions: np.ndarray, spec: ProbeSpec,
                     fine_factor: int = 4) -> np.ndarray:
    """(H, R) intensities from trapezoidal transmission on a fine grid.

    ``acoustic_fn`` maps (N, 3) points to (N, 3) numpy [beta, sigma, mu].
    """
    if fine_factor < 1:
        raise ValueError("fine_factor must be >= 1")
    pixel_t = spec.sample_depths()
    fine_t = np.linspace(0.0, spec.depth, fine_factor * spec.samples + 1)
    t, inverse = np.unique(np.concatenate([fine_t, pixel_t]), return_inverse=True)
    pixel_idx = inverse[len(fine_t):]
    pts = origins[:, None, :] + t[None, :, None] * directions[:, None, :]
    ac = acoustic_fn(pts.reshape(-1, 3)).reshape(len(origins), len(t), 3)
    loss = ac[..., 2] + ac[..., 0]
    integral = cumulative_trapezoid(loss, t, axis=1, initial=0.0)
    trans = np.exp(-integral[:, pixel_idx])
    echo = ac[:, pixel_idx, 0] + ac[:, pixel_idx, 1]
    return (trans * echo).T


def oracle_render(phantom: Phantom, pose: np.ndarray, spec: ProbeSpec, fine_factor: int = 4) -> np.ndarray:
    origins, directions = generate_rays(pose, spec)
    return oracle_scanlines(phantom.acoustic, origins, directions, spec, fine_factor)


def add_speckle(frame: np.ndarray, std: float, rng: np.random.Generator) -> np.ndarray:
    """Multiplicative log-normal speckle with unit mean, then clip to [0, 1]."""
    if std > 0:
        frame = frame * np.exp(std * rng.standard_normal(frame.shape) - 0.5 * std * std)
    return np.clip(frame, 0.0, 1.0)


def check_trajectory(poses: list[np.ndarray], bound: float = 1.0) -> None:
    for k, pose in enumerate(poses):
        if np.any(np.abs(pose[:3, 3]) > bound + 1e-9):
            raise ValueError(f"pose {k} places the probe at {pose[:3, 3]}, outside the normalized volume")


def simulate_sweep(phantom: Phantom, poses: list[np.ndarray], spec: ProbeSpec, noise_seed: int = 0,
                   speckle_std: float = 0.1, fine_factor: int = 4,
                   threads: int = 1) -> tuple[list[np.ndarray], list[np.ndarray]]:
    """Frames in [0, 1] for every pose; speckle drawn from ``noise_seed`` in pose order."""
    check_trajectory(poses)
    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            clean = list(pool.map(lambda p: oracle_render(phantom, p, spec, fine_factor), poses))
    else:
        clean = [oracle_render(phantom, p, spec, fine_factor) for p in poses]
    rng = np.random.default_rng(noise_seed)
    frames = [add_speckle(f, speckle_std, rng) for f in clean]
    return frames, [p.copy() for p in poses]
