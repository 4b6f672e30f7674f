"""Test-time latent optimisation with a frozen network.

* optimize_latent: fit z to B-mode frames only (no shape labels)
* invert_from_shape: fit z to an occupancy grid, then read acoustics off z
* interpolate_latents: linear paths through latent space
"""
from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor
from .field import FieldModel
from .geometry import OccupancyGrid, TriangleMesh, marching_cubes, query_occupancy_grid
from .losses import LossLog, LossTerms, LossWeights, latent_reg, occupancy_loss, tto_loss
from .render import ProbeSpec
from .training import Adam, ModelCheckpoint, NonFiniteError, random_patch

log = logging.getLogger(__name__)

LATENT_MAGIC = b"OSCARLAT"


class FrozenParamsError(RuntimeError):
    pass


@dataclass
class TTOConfig:
    iterations: int = 6000
    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    patch_size: int = 16
    patches_per_step: int = 1
    eval_every: int = 250
    eval_patches: int = 16
    grid: int = 48              # invert_from_shape target resolution
    points_per_step: int = 4096
    seed: int = 0
    weights: LossWeights = field(default_factory=LossWeights)

    def __post_init__(self):
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        if isinstance(self.weights, dict):
            self.weights = LossWeights(**self.weights)


@dataclass
class TTOResult:
    z: np.ndarray
    loss: float                 # objective at the returned iterate (fixed evaluation batch)
    initial_loss: float
    best_iteration: int
    history: list[tuple[int, float]] = field(default_factory=list)


def _optimize(ckpt: ModelCheckpoint, cfg: TTOConfig, step_loss, eval_loss,
              loss_log: LossLog | None) -> TTOResult:
    """Shared Adam loop on z with best-iterate tracking on a fixed evaluation objective."""
    before = ckpt.params.checksum()
    z = np.array(ckpt.mean_latent, dtype=np.float64, copy=True)
    init = eval_loss(z)
    best_z, best_loss, best_it = z.copy(), init, 0
    history = [(0, init)]
    opt = Adam(cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.adam_eps)
    for it in range(1, cfg.iterations + 1):
        zt = Tensor(z.copy(), requires_grad=True, name="latent")
        terms = step_loss(zt, it)
        if not np.isfinite(terms.parts["total"]):
            raise NonFiniteError(f"non-finite TTO loss at iteration {it}")
        dc.backward(terms.total)
        opt.step("latent", z, zt.grad)
        if loss_log is not None:
            loss_log.append(it, terms.parts)
        if it % cfg.eval_every == 0 or it == cfg.iterations:
            val = eval_loss(z)
            history.append((it, val))
            if val < best_loss:
                best_z, best_loss, best_it = z.copy(), val, it
    if ckpt.params.checksum() != before:
        raise FrozenParamsError("network parameters changed during test-time optimisation")
    return TTOResult(best_z, best_loss, init, best_it, history)


def optimize_latent(images: np.ndarray, poses: np.ndarray, ckpt: ModelCheckpoint, cfg: TTOConfig,
                    spec: ProbeSpec, mode: str | None = None,
                    loss_log: LossLog | None = None) -> TTOResult:
    """Label-free z* = argmin photo + l_a reg_a + l_z ||z||^2, starting at the mean code.

    ``images`` are (K, H, W) floats in [0, 1] with matching (K, 4, 4) ``poses``.
    """
    images = np.asarray(images, dtype=np.float64)
    if len(images) == 0:
        raise ValueError("optimize_latent: no frames given")
    mode = mode or ckpt.render_mode
    model = FieldModel(ckpt.params, trainable=False)
    rng = np.random.default_rng(cfg.seed)
    eval_rng = np.random.default_rng([cfg.seed, 99])
    eval_set = [random_patch(images, poses, int(eval_rng.integers(len(images))), cfg.patch_size, eval_rng)
                for _ in range(cfg.eval_patches)]

    def step_loss(zt, _it):
        patches = [random_patch(images, poses, int(rng.integers(len(images))), cfg.patch_size, rng)
                   for _ in range(cfg.patches_per_step)]
        return tto_loss(patches, model, zt, cfg.weights, spec, mode)

    def eval_loss(z):
        return tto_loss(eval_set, model, Tensor(z), cfg.weights, spec, mode).parts["total"]

    return _optimize(ckpt, cfg, step_loss, eval_loss, loss_log)


def invert_from_shape(target: OccupancyGrid, ckpt: ModelCheckpoint, cfg: TTOConfig,
                      loss_log: LossLog | None = None) -> TTOResult:
    """z* = argmin BCE(o(x|z), target) + l_z ||z||^2 on a resampled target grid."""
    grid = target.resample(cfg.grid) if target.n != cfg.grid else target
    pts, labels = grid.points(), grid.values
    model = FieldModel(ckpt.params, trainable=False)
    rng = np.random.default_rng(cfg.seed)
    eval_idx = np.random.default_rng([cfg.seed, 99]).choice(len(pts), size=min(len(pts), 2 * cfg.points_per_step),
                                                             replace=False)
    lam = cfg.weights.latent

    def objective(zt, idx):
        occ = occupancy_loss(model.occupancy(model.backbone(pts[idx], zt)), labels[idx])
        reg = latent_reg(zt)
        total = occ + lam * reg
        return LossTerms(total, {"occ": occ.item(), "reg_z": reg.item(), "total": total.item()})

    def step_loss(zt, _it):
        idx = rng.choice(len(pts), size=min(len(pts), cfg.points_per_step), replace=False)
        return objective(zt, idx)

    def eval_loss(z):
        return objective(Tensor(z), eval_idx).parts["total"]

    return _optimize(ckpt, cfg, step_loss, eval_loss, loss_log)


def interpolate_latents(z_a: np.ndarray, z_b: np.ndarray, steps: int) -> list[np.ndarray]:
    """S + 1 codes (1 - t) z_a + t z_b for t = 0, 1/S, ..., 1 (endpoints exact)."""
    z_a, z_b = np.asarray(z_a, dtype=np.float64), np.asarray(z_b, dtype=np.float64)
    if z_a.shape != z_b.shape:
        raise ValueError(f"latent dimension mismatch: {z_a.shape} vs {z_b.shape}")
    if steps < 1:
        raise ValueError("steps must be >= 1")
    out = []
    for s in range(steps + 1):
        t = s / steps
        out.append(z_a.copy() if s == 0 else z_b.copy() if s == steps else (1 - t) * z_a + t * z_b)
    return out


def interpolation_meshes(ckpt: ModelCheckpoint, z_a, z_b, steps: int,
                         resolution: int = 48) -> list[tuple[OccupancyGrid, TriangleMesh]]:
    out = []
    for z in interpolate_latents(z_a, z_b, steps):
        grid = query_occupancy_grid(ckpt.params, z, resolution)
        out.append((grid, marching_cubes(grid)))
    return out


# -- latent files ------------------------------------------------------------------------
def write_latent(path, z: np.ndarray) -> None:
    z = np.asarray(z, dtype="<f8").reshape(-1)
    Path(path).write_bytes(LATENT_MAGIC + struct.pack("<I", len(z)) + z.tobytes())


def read_latent(path, expected_dim: int | None = None) -> np.ndarray:
    data = Path(path).read_bytes()
    if data[:8] != LATENT_MAGIC:
        raise ValueError(f"{path}: not a latent file (bad magic)")
    (dim,) = struct.unpack("<I", data[8:12])
    if len(data) != 12 + 8 * dim:
        raise ValueError(f"{path}: truncated latent file")
    if expected_dim is not None and dim != expected_dim:
        raise ValueError(f"{path}: latent dimension {dim}, expected {expected_dim}")
    return np.frombuffer(data[12:], dtype="<f8").astype(np.float64)
