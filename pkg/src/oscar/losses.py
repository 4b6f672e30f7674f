"""Training and test-time objectives.

photometric:  alpha * (1 - SSIM) + (1 - alpha) * MSE, averaged over patches
occupancy:    mean binary cross-entropy over the supervision points
acoustic reg: mean(beta) + mean(mu)   (L1 sparsity on the two loss terms)
latent reg:   ||z||^2
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Sequence

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor
from .render import TRANSMISSION, ProbeSpec, render_patch

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_MIN_SIZE = 8
C1 = (0.01 * 1.0) ** 2
C2 = (0.03 * 1.0) ** 2
BCE_EPS = 1e-7


@dataclass
class LossWeights:
    alpha: float = 0.5
    occ: float = 1.0
    acoustic: float = 1e-3
    latent: float = 1e-4

    def __post_init__(self):
        vals = (self.alpha, self.occ, self.acoustic, self.latent)
        if not all(np.isfinite(v) for v in vals):
            raise ValueError("loss weights must be finite")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")
        if min(self.occ, self.acoustic, self.latent) < 0:
            raise ValueError("lambda weights must be nonnegative")


@lru_cache(maxsize=None)
def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-0.5 * (x / sigma) ** 2)
    return g / g.sum()


@lru_cache(maxsize=None)
def _valid_filter(n: int, size: int = SSIM_WINDOW) -> np.ndarray:
    """(n - w + 1, n) matrix applying the 1D window at every valid offset."""
    g = gaussian_window(size)
    w = len(g)
    out = np.zeros((n - w + 1, n))
    for i in range(n - w + 1):
        out[i, i:i + w] = g
    return out


def ssim(a, b) -> Tensor:
    """Single-scale SSIM with an 11x11 Gaussian window (std 1.5), L = 1.

    The separable filter is applied as F_rows @ X @ F_cols^T, so the mean is
    over valid window positions only. Patches between 8 and 10 pixels wide use
    a window cropped to the patch (same std, renormalised).
    """
    a, b = dc.as_tensor(a), dc.as_tensor(b)
    if a.shape != b.shape or a.ndim != 2:
        raise dc.ShapeError(f"ssim: expected two equal 2D images, got {a.shape} and {b.shape}")
    h, w = a.shape
    if h < SSIM_MIN_SIZE or w < SSIM_MIN_SIZE:
        raise ValueError(f"ssim: image {a.shape} smaller than the minimum {SSIM_MIN_SIZE}x{SSIM_MIN_SIZE} window")
    win = min(SSIM_WINDOW, h, w)
    fr, fc = Tensor(_valid_filter(h, win)), Tensor(_valid_filter(w, win).T)

    def blur(x):
        return dc.matmul(dc.matmul(fr, x), fc)

    mu_a, mu_b = blur(a), blur(b)
    mu_aa, mu_bb, mu_ab = mu_a * mu_a, mu_b * mu_b, mu_a * mu_b
    var_a = blur(a * a) - mu_aa
    var_b = blur(b * b) - mu_bb
    cov = blur(a * b) - mu_ab
    num = (2.0 * mu_ab + C1) * (2.0 * cov + C2)
    den = (mu_aa + mu_bb + C1) * (var_a + var_b + C2)
    return dc.mean(num / den)


def photometric_loss(pred, target, alpha: float = 0.5) -> Tensor:
    """One image, or the mean over a list of patches."""
    if isinstance(pred, (list, tuple)):
        if len(pred) != len(target) or not pred:
            raise dc.ShapeError("photometric_loss: prediction/target batch mismatch")
        terms = [photometric_loss(p, t, alpha) for p, t in zip(pred, target)]
        total = terms[0]
        for t in terms[1:]:
            total = total + t
        return total / float(len(terms))
    pred, target = dc.as_tensor(pred), dc.as_tensor(target)
    if pred.shape != target.shape:
        raise dc.ShapeError(f"photometric_loss: shapes {pred.shape} and {target.shape} differ")
    diff = pred - target
    mse = dc.mean(diff * diff)
    if alpha == 0.0:
        return mse
    return alpha * (1.0 - ssim(pred, target)) + (1.0 - alpha) * mse


def occupancy_loss(pred, labels) -> Tensor:
    pred = dc.as_tensor(pred)
    labels = np.asarray(labels, dtype=np.float64)
    if pred.size == 0:
        raise ValueError("occupancy_loss: empty sample set")
    if labels.shape != pred.shape:
        raise dc.ShapeError(f"occupancy_loss: shapes {pred.shape} and {labels.shape} differ")
    o = dc.clip(pred, BCE_EPS, 1.0 - BCE_EPS)
    ce = -(labels * dc.log(o) + (1.0 - labels) * dc.log(1.0 - o))
    return dc.mean(ce)


def acoustic_reg(acoustic) -> Tensor:
    """mean(beta) + mean(mu) over (..., 3) samples ordered [beta, sigma, mu]."""
    acoustic = dc.as_tensor(acoustic)
    flat = dc.reshape(acoustic, (-1, 3))
    return dc.mean(flat[:, 0]) + dc.mean(flat[:, 2])


def latent_reg(z) -> Tensor:
    z = dc.as_tensor(z)
    return dc.tsum(z * z)


@dataclass
class PatchSample:
    pose: np.ndarray
    row: int
    col: int
    target: np.ndarray   # (P, P) in [0, 1]


@dataclass
class Batch:
    subject: int
    patches: list[PatchSample]
    occ_points: np.ndarray | None = None    # (M, 3)
    occ_labels: np.ndarray | None = None    # (M,)


@dataclass
class LossTerms:
    total: Tensor
    parts: dict[str, float] = field(default_factory=dict)


def _render_patches(model, z, patches: Sequence[PatchSample], spec: ProbeSpec, mode: str):
    fn = model.acoustic_field(z)
    preds, acoustic = [], []
    for p in patches:
        size = p.target.shape[0]
        img, ac = render_patch(fn, p.pose, spec, p.row, p.col, size, mode)
        preds.append(img)
        acoustic.append(dc.reshape(ac, (-1, 3)))
    return preds, dc.concat(acoustic, axis=0)


def total_train_loss(batch: Batch, model, z, weights: LossWeights, spec: ProbeSpec,
                     mode: str = TRANSMISSION) -> LossTerms:
    """photo + l_occ * occ + l_a * reg_a + l_z * ||z||^2 for one subject's batch.

    Occupancy is skipped when the batch carries no supervision points
    (validation subjects contribute photometric terms only).
    """
    z = dc.as_tensor(z)
    preds, acoustic = _render_patches(model, z, batch.patches, spec, mode)
    photo = photometric_loss(preds, [p.target for p in batch.patches], weights.alpha)
    reg_a = acoustic_reg(acoustic)
    reg_z = latent_reg(z)
    total = photo + weights.acoustic * reg_a + weights.latent * reg_z
    parts = {"photo": photo.item(), "reg_a": reg_a.item(), "reg_z": reg_z.item()}
    if batch.occ_points is not None and len(batch.occ_points):
        occ = occupancy_loss(model.occupancy(model.backbone(batch.occ_points, z)), batch.occ_labels)
        total = total + weights.occ * occ
        parts["occ"] = occ.item()
    else:
        parts["occ"] = float("nan")
    parts["total"] = total.item()
    return LossTerms(total, parts)


def tto_loss(patches: Sequence[PatchSample], model, z, weights: LossWeights, spec: ProbeSpec,
             mode: str = TRANSMISSION) -> LossTerms:
    """Label-free objective: photo + l_a * reg_a + l_z * ||z||^2.

    ``model`` should be frozen (``trainable=False``) so only ``z`` is on the tape.
    """
    z = dc.as_tensor(z)
    preds, acoustic = _render_patches(model, z, patches, spec, mode)
    photo = photometric_loss(preds, [p.target for p in patches], weights.alpha)
    reg_a = acoustic_reg(acoustic)
    reg_z = latent_reg(z)
    total = photo + weights.acoustic * reg_a + weights.latent * reg_z
    return LossTerms(total, {"photo": photo.item(), "reg_a": reg_a.item(),
                             "reg_z": reg_z.item(), "total": total.item()})


class LossLog:
    """Accumulates per-iteration loss terms and writes them as CSV."""

    columns = ("iteration", "photo", "occ", "reg_a", "reg_z", "total")

    def __init__(self):
        self.rows: list[dict] = []

    def append(self, iteration: int, parts: dict[str, float]) -> None:
        self.rows.append({"iteration": iteration, **{k: parts.get(k, float("nan")) for k in self.columns[1:]}})

    def write(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(self.columns)
            for row in self.rows:
                writer.writerow([row["iteration"]] + [f"{row[k]:.9g}" for k in self.columns[1:]])
