"""Joint optimisation of network weights and the per-subject latent codebook."""
from __future__ import annotations

import json
import logging
import struct
import zlib
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor
from .field import FieldModel, FieldParams, init_latent_codebook, init_params, mean_latent
from .geometry import OccupancyGrid
from .losses import Batch, LossLog, LossWeights, PatchSample, occupancy_loss, photometric_loss, total_train_loss
from .render import TRANSMISSION, ProbeSpec, render_patch
from .simdata.dataset import Dataset, Subject

log = logging.getLogger(__name__)

CKPT_MAGIC = b"OSCARCKP"
CKPT_VERSION = 1


class CheckpointError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 10
    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    patch_size: int = 16
    patches_per_step: int = 1
    uniform_samples: int = 512
    surface_samples: int = 512
    surface_band: float = 0.05
    latent_dim: int = 128
    hidden: int = 128
    layers: int = 8
    latent_variance: float = 1e-3
    seed: int = 0
    val_every: int = 0          # steps; 0 = once per epoch
    val_patches: int = 8
    weights: LossWeights = field(default_factory=LossWeights)
    render_mode: str = TRANSMISSION
    deterministic: bool = False

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")
        if isinstance(self.weights, dict):
            self.weights = LossWeights(**self.weights)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


# -- Adam -----------------------------------------------------------------------------
@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0


def adam_step(param: np.ndarray, grad: np.ndarray, state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8, name: str = "param") -> None:
    """In-place bias-corrected Adam update of ``param``."""
    if not np.all(np.isfinite(grad)):
        raise NonFiniteError(f"non-finite gradient for {name}")
    state.t += 1
    state.m *= beta1
    state.m += (1 - beta1) * grad
    state.v *= beta2
    state.v += (1 - beta2) * grad * grad
    m_hat = state.m / (1 - beta1 ** state.t)
    v_hat = state.v / (1 - beta2 ** state.t)
    param -= lr * m_hat / (np.sqrt(v_hat) + eps)


class Adam:
    """Adam over named numpy arrays; state is created lazily per name."""

    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.state: dict[str, AdamState] = {}

    def step(self, name: str, param: np.ndarray, grad: np.ndarray) -> None:
        st = self.state.get(name)
        if st is None:
            st = self.state[name] = AdamState(np.zeros_like(param), np.zeros_like(param))
        adam_step(param, grad, st, self.lr, self.beta1, self.beta2, self.eps, name)


# -- checkpoint -----------------------------------------------------------------------
@dataclass
class ModelCheckpoint:
    params: FieldParams
    codebook: np.ndarray
    mean_latent: np.ndarray
    config: dict
    epoch: int = 0
    val_score: float = float("inf")
    subjects: list[str] = field(default_factory=list)
    render_mode: str = TRANSMISSION

    @property
    def latent_dim(self) -> int:
        return self.params.latent_dim

    def code_for(self, sid: str) -> np.ndarray:
        return self.codebook[self.subjects.index(sid)]


def _ckpt_arrays(ck: ModelCheckpoint) -> list[tuple[str, np.ndarray]]:
    return ck.params.arrays() + [("codebook", ck.codebook), ("mean_latent", ck.mean_latent)]


def checkpoint_bytes(ck: ModelCheckpoint) -> bytes:
    arrays = _ckpt_arrays(ck)
    header = {
        "latent_dim": ck.params.latent_dim, "hidden": ck.params.hidden, "layers": ck.params.depth,
        "arrays": [[name, list(a.shape)] for name, a in arrays],
        "config": ck.config, "epoch": ck.epoch, "val_score": ck.val_score,
        "subjects": ck.subjects, "render_mode": ck.render_mode,
    }
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    body = b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes() for _, a in arrays)
    blob = CKPT_MAGIC + struct.pack("<II", CKPT_VERSION, len(head)) + head + body
    return blob + struct.pack("<I", zlib.crc32(blob))


def save_checkpoint(ck: ModelCheckpoint, path) -> None:
    Path(path).write_bytes(checkpoint_bytes(ck))


def load_checkpoint(path, expected_latent_dim: int | None = None) -> ModelCheckpoint:
    data = Path(path).read_bytes()
    if len(data) < 20 or data[:8] != CKPT_MAGIC:
        raise CheckpointError(f"{path}: not an OSCAR checkpoint (bad magic)")
    version, head_len = struct.unpack("<II", data[8:16])
    if version != CKPT_VERSION:
        raise CheckpointError(f"{path}: checkpoint version {version}, expected {CKPT_VERSION}")
    (crc,) = struct.unpack("<I", data[-4:])
    if zlib.crc32(data[:-4]) != crc:
        raise CheckpointError(f"{path}: checksum failure (truncated or corrupted file)")
    header = json.loads(data[16:16 + head_len].decode("utf-8"))
    if expected_latent_dim is not None and header["latent_dim"] != expected_latent_dim:
        raise CheckpointError(f"{path}: latent dimension {header['latent_dim']} does not match "
                              f"expected {expected_latent_dim}")
    pos = 16 + head_len
    named = {}
    for name, shape in header["arrays"]:
        count = int(np.prod(shape)) if shape else 1
        end = pos + 8 * count
        if end > len(data) - 4:
            raise CheckpointError(f"{path}: truncated parameter block {name}")
        named[name] = np.frombuffer(data[pos:end], dtype="<f8").astype(np.float64).reshape(shape)
        pos = end
    if pos != len(data) - 4:
        raise CheckpointError(f"{path}: trailing bytes after parameter blocks")
    params = FieldParams.from_arrays(named, header["layers"])
    return ModelCheckpoint(params, named["codebook"], named["mean_latent"], header["config"],
                           header["epoch"], header["val_score"], header["subjects"], header["render_mode"])


# -- batch construction -----------------------------------------------------------------
def surface_cells(grid: OccupancyGrid) -> np.ndarray:
    """Centres of cells whose label differs from a 6-neighbour."""
    vol = grid.values.reshape(grid.n, grid.n, grid.n) >= 0.5     # [z, y, x]
    edge = np.zeros_like(vol)
    for axis in range(3):
        diff = np.diff(vol, axis=axis)
        lo = [slice(None)] * 3
        hi = [slice(None)] * 3
        lo[axis] = slice(0, -1)
        hi[axis] = slice(1, None)
        edge[tuple(lo)] |= diff
        edge[tuple(hi)] |= diff
    k, j, i = np.nonzero(edge)
    h = grid.spacing
    return np.stack([grid.lo + (i + 0.5) * h, grid.lo + (j + 0.5) * h, grid.lo + (k + 0.5) * h], axis=1)


class OccupancySampler:
    """Uniform points in [-1, 1]^3 plus points jittered around surface cells."""

    def __init__(self, grid: OccupancyGrid, uniform: int, surface: int, band: float):
        self.grid, self.uniform, self.surface, self.band = grid, uniform, surface, band
        self.cells = surface_cells(grid)

    def sample(self, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
        pts = [rng.uniform(-1.0, 1.0, size=(self.uniform, 3))]
        if len(self.cells) and self.surface:
            base = self.cells[rng.integers(len(self.cells), size=self.surface)]
            pts.append(np.clip(base + rng.uniform(-self.band, self.band, size=base.shape), -1.0, 1.0))
        pts = np.concatenate(pts)
        return pts, self.grid.lookup(pts)


def random_patch(images: np.ndarray, poses: np.ndarray, k: int, size: int,
                 rng: np.random.Generator) -> PatchSample:
    h, w = images.shape[1:]
    row = int(rng.integers(0, h - size + 1))
    col = int(rng.integers(0, w - size + 1))
    return PatchSample(poses[k], row, col, images[k, row:row + size, col:col + size])


def trainable_frames(subject: Subject) -> list[int]:
    """Validation subjects hold out their last sweep for scoring."""
    ks = range(len(subject.frames))
    if subject.split == "val" and subject.sweeps > 1:
        return [k for k in ks if subject.sweep_of(k) < subject.sweeps - 1]
    return list(ks)


def held_out_frames(subject: Subject) -> list[int]:
    if subject.split == "val" and subject.sweeps > 1:
        return [k for k in range(len(subject.frames)) if subject.sweep_of(k) == subject.sweeps - 1]
    return list(range(len(subject.frames)))


# -- training loop --------------------------------------------------------------------------
@dataclass
class _SubjectData:
    subject: Subject
    images: np.ndarray
    sampler: OccupancySampler | None


def _validation_set(data: list[_SubjectData], cfg: TrainConfig):
    """Fixed patches and occupancy points, drawn once from a dedicated stream."""
    rng = np.random.default_rng([cfg.seed, 99])
    pool = [d for d in data if d.subject.split == "val"] or [d for d in data if d.subject.split == "train"]
    out = []
    for d in pool:
        frames = held_out_frames(d.subject)
        patches = [random_patch(d.images, d.subject.poses, frames[int(rng.integers(len(frames)))],
                                cfg.patch_size, rng) for _ in range(cfg.val_patches)]
        sampler = OccupancySampler(d.subject.occupancy, cfg.uniform_samples, cfg.surface_samples, cfg.surface_band)
        pts, labels = sampler.sample(rng)
        out.append((d, patches, pts, labels))
    return out


def validation_score(params: FieldParams, codebook: np.ndarray, index: dict[str, int], vset,
                     cfg: TrainConfig, spec: ProbeSpec) -> float:
    """Photometric + l_occ * occupancy on held-out data; read-only."""
    model = FieldModel(params, trainable=False)
    total = 0.0
    for d, patches, pts, labels in vset:
        z = codebook[index[d.subject.sid]]
        fn = model.acoustic_field(z)
        preds = [render_patch(fn, p.pose, spec, p.row, p.col, cfg.patch_size, cfg.render_mode)[0]
                 for p in patches]
        photo = photometric_loss(preds, [p.target for p in patches], cfg.weights.alpha).item()
        occ = occupancy_loss(model.occupancy(model.backbone(pts, z)), labels).item()
        total += photo + cfg.weights.occ * occ
    return total / max(len(vset), 1)


def train(ds: Dataset, cfg: TrainConfig, loss_log: LossLog | None = None,
          max_steps: int | None = None) -> ModelCheckpoint:
    """Train on the train+val subjects; return the best-validation checkpoint.

    Validation subjects get a latent code fitted photometrically on their
    non-held-out frames; their occupancy labels never enter the training loss.
    """
    members = ds.split("train") + ds.split("val")
    if not members:
        raise ValueError("train: dataset has no training subjects")
    spec = ds.probe
    rng = np.random.default_rng(cfg.seed)
    params = init_params(cfg.latent_dim, cfg.hidden, cfg.layers, seed=cfg.seed)
    codebook = init_latent_codebook(len(members), cfg.latent_dim, seed=cfg.seed + 1,
                                    variance=cfg.latent_variance)
    index = {s.sid: i for i, s in enumerate(members)}
    data = []
    for s in members:
        sampler = (OccupancySampler(s.occupancy, cfg.uniform_samples, cfg.surface_samples, cfg.surface_band)
                   if s.split == "train" else None)
        data.append(_SubjectData(s, s.images, sampler))
    vset = _validation_set(data, cfg)
    pairs = [(i, k) for i, d in enumerate(data) for k in trainable_frames(d.subject)]
    opt = Adam(cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.adam_eps)

    def snapshot(epoch, score):
        return ModelCheckpoint(params.copy(), codebook.copy(), mean_latent(codebook), cfg.to_dict(),
                               epoch, score, [s.sid for s in members], cfg.render_mode)

    best = None
    step = 0
    val_every = cfg.val_every or len(pairs)
    for epoch in range(cfg.epochs):
        for p in rng.permutation(len(pairs)):
            i, k = pairs[p]
            d = data[i]
            patches = [random_patch(d.images, d.subject.poses, k, cfg.patch_size, rng)]
            for _ in range(cfg.patches_per_step - 1):
                kk = trainable_frames(d.subject)[int(rng.integers(len(trainable_frames(d.subject))))]
                patches.append(random_patch(d.images, d.subject.poses, kk, cfg.patch_size, rng))
            pts, labels = d.sampler.sample(rng) if d.sampler is not None else (None, None)
            batch = Batch(i, patches, pts, labels)
            model = FieldModel(params, trainable=True)
            z = Tensor(codebook[i].copy(), requires_grad=True, name=f"latent[{d.subject.sid}]")
            terms = total_train_loss(batch, model, z, cfg.weights, spec, cfg.render_mode)
            if not np.isfinite(terms.parts["total"]):
                raise NonFiniteError(f"non-finite training loss at step {step}")
            dc.backward(terms.total)
            for name, t in model.tensors.items():
                opt.step(name, t.data, t.grad if t.grad is not None else np.zeros_like(t.data))
            opt.step(f"latent.{i}", codebook[i], z.grad)
            if loss_log is not None:
                loss_log.append(step, terms.parts)
            step += 1
            if step % val_every == 0:
                score = validation_score(params, codebook, index, vset, cfg, spec)
                log.info("epoch %d step %d val %.5f", epoch, step, score)
                if best is None or score < best.val_score:
                    best = snapshot(epoch, score)
            if max_steps is not None and step >= max_steps:
                break
        if max_steps is not None and step >= max_steps:
            break
    if best is None:
        best = snapshot(cfg.epochs - 1, validation_score(params, codebook, index, vset, cfg, spec))
    return best
