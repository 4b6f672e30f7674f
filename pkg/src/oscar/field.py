"""Auto-decoder field: shared ReLU backbone, acoustic head and occupancy head.

The backbone consumes the concatenation [x, z] (3 + d inputs, no positional
encoding). Both heads are single linear layers reading the final hidden
activation, so acoustic properties and occupancy always decode from the same
feature vector.
"""
from __future__ import annotations

import zlib
from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from . import diffcore as dc
from .diffcore import Tensor

LATENT_DIM = 128
HIDDEN = 128
LAYERS = 8


@dataclass
class FieldParams:
    """Backbone weights (theta), acoustic head (phi), occupancy head (psi).

    Arrays are float64; ``weights[i]`` has shape (fan_in, fan_out).
    """
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    acoustic_w: np.ndarray
    acoustic_b: np.ndarray
    occupancy_w: np.ndarray
    occupancy_b: np.ndarray

    @property
    def latent_dim(self) -> int:
        return self.weights[0].shape[0] - 3

    @property
    def hidden(self) -> int:
        return self.weights[0].shape[1]

    @property
    def depth(self) -> int:
        return len(self.weights)

    def arrays(self) -> list[tuple[str, np.ndarray]]:
        named = []
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            named += [(f"backbone.{i}.w", w), (f"backbone.{i}.b", b)]
        named += [("acoustic.w", self.acoustic_w), ("acoustic.b", self.acoustic_b),
                  ("occupancy.w", self.occupancy_w), ("occupancy.b", self.occupancy_b)]
        return named

    def copy(self) -> "FieldParams":
        return FieldParams([w.copy() for w in self.weights], [b.copy() for b in self.biases],
                           self.acoustic_w.copy(), self.acoustic_b.copy(),
                           self.occupancy_w.copy(), self.occupancy_b.copy())

    def checksum(self) -> int:
        crc = 0
        for _, a in self.arrays():
            crc = zlib.crc32(np.ascontiguousarray(a, dtype="<f8").tobytes(), crc)
        return crc

    @classmethod
    def from_arrays(cls, named: dict[str, np.ndarray], depth: int) -> "FieldParams":
        return cls([named[f"backbone.{i}.w"] for i in range(depth)],
                   [named[f"backbone.{i}.b"] for i in range(depth)],
                   named["acoustic.w"], named["acoustic.b"],
                   named["occupancy.w"], named["occupancy.b"])


def init_params(latent_dim: int = LATENT_DIM, hidden: int = HIDDEN, layers: int = LAYERS,
                seed: int = 0) -> FieldParams:
    """He-uniform hidden weights, zero biases; heads use the same scheme."""
    rng = np.random.default_rng(seed)
    widths = [3 + latent_dim] + [hidden] * layers
    weights, biases = [], []
    for fan_in, fan_out in zip(widths[:-1], widths[1:]):
        bound = np.sqrt(6.0 / fan_in)
        weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    head_bound = np.sqrt(6.0 / hidden)
    acoustic_w = rng.uniform(-head_bound, head_bound, size=(hidden, 3))
    occupancy_w = rng.uniform(-head_bound, head_bound, size=(hidden, 1))
    return FieldParams(weights, biases, acoustic_w, np.zeros(3), occupancy_w, np.zeros(1))


def zero_params(latent_dim: int = LATENT_DIM, hidden: int = HIDDEN, layers: int = LAYERS) -> FieldParams:
    p = init_params(latent_dim, hidden, layers)
    for a in p.weights + p.biases:
        a[...] = 0.0
    for a in (p.acoustic_w, p.acoustic_b, p.occupancy_w, p.occupancy_b):
        a[...] = 0.0
    return p


class FieldModel:
    """Differentiable view of a :class:`FieldParams`.

    ``trainable=False`` wraps the parameters as constants so no gradient can
    reach them (the frozen-prior setting used at test time).
    """

    def __init__(self, params: FieldParams, trainable: bool = True):
        self.params = params
        self.trainable = trainable
        self.tensors = {name: Tensor(a, requires_grad=trainable, name=name)
                        for name, a in params.arrays()}

    def backbone(self, x: np.ndarray, z) -> Tensor:
        x = np.asarray(x, dtype=np.float64).reshape(-1, 3)
        z = dc.as_tensor(z)
        d = self.params.latent_dim
        if z.shape != (d,):
            raise dc.ShapeError(f"backbone: latent has shape {z.shape}, expected ({d},)")
        w0 = self.tensors["backbone.0.w"]
        # [x, z] @ W0 split so the latent row product is computed once per batch
        pre = dc.matmul(Tensor(x), w0[:3]) + dc.matmul(dc.reshape(z, (1, d)), w0[3:])
        h = dc.relu(pre + self.tensors["backbone.0.b"])
        for i in range(1, self.params.depth):
            h = dc.relu(dc.matmul(h, self.tensors[f"backbone.{i}.w"]) + self.tensors[f"backbone.{i}.b"])
        return h

    def acoustic(self, h: Tensor) -> Tensor:
        """(N, 3) nonnegative columns [beta, sigma, mu]."""
        return dc.softplus(dc.matmul(h, self.tensors["acoustic.w"]) + self.tensors["acoustic.b"])

    def occupancy_logit(self, h: Tensor) -> Tensor:
        return dc.reshape(dc.matmul(h, self.tensors["occupancy.w"]) + self.tensors["occupancy.b"], (-1,))

    def occupancy(self, h: Tensor) -> Tensor:
        return dc.sigmoid(self.occupancy_logit(h))

    def acoustic_field(self, z):
        """Callable points -> (N, 3) acoustic tensor, for the renderer."""
        return lambda pts: self.acoustic(self.backbone(pts, z))

    def parameter_tensors(self) -> list[Tensor]:
        return list(self.tensors.values())


def eval_occupancy(params: FieldParams, points: np.ndarray, z: np.ndarray, chunk: int = 65536) -> np.ndarray:
    """Forward-only occupancy at many points (numpy in, numpy out)."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    out = np.empty(len(pts))
    d = params.latent_dim
    zrow = np.asarray(z, dtype=np.float64).reshape(1, d) @ params.weights[0][3:]
    for start in range(0, len(pts), chunk):
        h = np.maximum(pts[start:start + chunk] @ params.weights[0][:3] + zrow + params.biases[0], 0.0)
        for w, b in zip(params.weights[1:], params.biases[1:]):
            h = np.maximum(h @ w + b, 0.0)
        logit = (h @ params.occupancy_w + params.occupancy_b)[:, 0]
        out[start:start + chunk] = expit(logit)
    return out


def init_latent_codebook(count: int, dim: int = LATENT_DIM, seed: int = 0,
                         variance: float = 1e-3) -> np.ndarray:
    """``count`` codes drawn i.i.d. from N(0, variance); std = sqrt(variance)."""
    if count < 1 or dim < 1:
        raise ValueError("codebook needs count >= 1 and dim >= 1")
    rng = np.random.default_rng(seed)
    return rng.normal(0.0, np.sqrt(variance), size=(count, dim))


def mean_latent(codebook: np.ndarray) -> np.ndarray:
    codebook = np.asarray(codebook, dtype=np.float64)
    if codebook.ndim != 2 or codebook.shape[0] == 0:
        raise ValueError("mean_latent: empty codebook")
    return codebook.mean(axis=0)
