"""Behavior and topology context embeddings, their summation, and training-time dropping.

Every context module emits a 128-wide vector matching the time embedding; the
conditioning seen by the denoiser is the element-wise sum. During training the
contexts of a sample are dropped with probability 0.1 (jointly by default), in
which case the sum reduces to the time embedding alone.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn

from .unet import DenoiserConfig, UNet, xavier_init

EMBED_DIM = 128
CURVE_POINTS = 13
DEFAULT_DROP_PROB = 0.1


@dataclass
class ContextBundle:
    """Optional conditioning inputs for one generation or training batch."""

    curve: np.ndarray | None = None      # (13,) normalized energies
    topology: np.ndarray | None = None   # (28, 28) grayscale in [0, 1] or uint8

    def kwargs(self, n: int, dtype=torch.float32):
        """Broadcast the bundle to per-sample model kwargs for a batch of n."""
        out = {}
        if self.curve is not None:
            curve = torch.as_tensor(np.asarray(self.curve), dtype=dtype)
            out["curve"] = curve.expand(n, CURVE_POINTS).contiguous()
        if self.topology is not None:
            topo = np.asarray(self.topology)
            if topo.dtype == np.uint8:
                topo = topo.astype(np.float32) / 255.0
            topo_t = torch.as_tensor(topo, dtype=dtype)
            out["topology"] = topo_t.expand(n, *topo_t.shape[-2:]).contiguous()
        return out


class CurveEncoder(nn.Module):
    """Energy-curve context: two 128-wide dense layers (SiLU, then linear)."""

    def __init__(self, points: int = CURVE_POINTS, dim: int = EMBED_DIM):
        super().__init__()
        self.points = points
        self.net = nn.Sequential(nn.Linear(points, dim), nn.SiLU(), nn.Linear(dim, dim))
        xavier_init(self)

    def forward(self, curve: torch.Tensor) -> torch.Tensor:
        if curve.shape[-1] != self.points:
            raise ValueError(f"curve context must have {self.points} values, "
                             f"got {curve.shape[-1]}")
        return self.net(curve)


class TopologyEncoder(nn.Module):
    """Topology context: two conv/pool stages then three 128-wide dense layers.

    Input is the raw grayscale map in [0, 1] at 28x28. Convolutions are ReLU
    activated; the dense stack is ReLU, ReLU, then linear out.
    """

    def __init__(self, dim: int = EMBED_DIM):
        super().__init__()
        self.conv = nn.Sequential(
            nn.Conv2d(1, 16, 3, stride=1, padding=1), nn.ReLU(), nn.MaxPool2d(2, 2),
            nn.Conv2d(16, 16, 3, stride=1, padding=1), nn.ReLU(), nn.MaxPool2d(2, 2),
        )
        self.flat_features = 16 * 7 * 7
        self.dense = nn.Sequential(
            nn.Linear(self.flat_features, dim), nn.ReLU(),
            nn.Linear(dim, dim), nn.ReLU(),
            nn.Linear(dim, dim),
        )
        xavier_init(self)

    def forward(self, image: torch.Tensor) -> torch.Tensor:
        if image.dim() == 3:
            image = image[:, None]
        if image.shape[-2:] != (28, 28):
            raise ValueError(f"topology context must be 28x28, got {tuple(image.shape[-2:])}")
        return self.dense(self.conv(image).flatten(1))


def combine(time_emb: torch.Tensor, *context_embs) -> torch.Tensor:
    """Element-wise sum of the time embedding and all present context embeddings."""
    total = time_emb
    for emb in context_embs:
        if emb is None:
            continue
        if emb.shape[-1] != time_emb.shape[-1]:
            raise ValueError("context embedding width mismatch")
        total = total + emb
    return total


def draw_drop_mask(n: int, drop_prob: float, generator: torch.Generator | None = None):
    """Per-sample Bernoulli drop decisions (True = drop the contexts)."""
    if not 0.0 <= drop_prob <= 1.0:
        raise ValueError(f"drop probability {drop_prob} outside [0, 1]")
    return torch.rand(n, generator=generator) < drop_prob


class ConditionedDenoiser(nn.Module):
    """U-Net plus context modules, combined per the embedding-summation rule."""

    def __init__(self, config: DenoiserConfig | None = None, use_curve: bool = True,
                 use_topology: bool = False):
        super().__init__()
        self.unet = UNet(config)
        dim = self.unet.config.embed_dim
        self.curve_encoder = CurveEncoder(dim=dim) if use_curve else None
        self.topology_encoder = TopologyEncoder(dim=dim) if use_topology else None

    @property
    def config(self):
        return self.unet.config

    def embeddings(self, t, curve=None, topology=None, drop=None):
        """Return (time, curve, topology) embeddings with dropping applied.

        `drop` is a per-sample boolean mask dropping both contexts together, or
        a (curve_mask, topology_mask) pair for independent dropping.
        """
        time_emb = self.unet.time_embed(t)
        curve_emb = topo_emb = None
        if curve is not None:
            if self.curve_encoder is None:
                raise ValueError("model has no curve context module")
            curve_emb = self.curve_encoder(curve)
        if topology is not None:
            if self.topology_encoder is None:
                raise ValueError("model has no topology context module")
            topo_emb = self.topology_encoder(topology)
        if drop is not None:
            drop_curve, drop_topo = drop if isinstance(drop, (tuple, list)) else (drop, drop)
            if curve_emb is not None:
                curve_emb = curve_emb * (~drop_curve).to(time_emb.dtype)[:, None]
            if topo_emb is not None:
                topo_emb = topo_emb * (~drop_topo).to(time_emb.dtype)[:, None]
        return time_emb, curve_emb, topo_emb

    def forward(self, x, t, curve=None, topology=None, drop=None):
        time_emb, curve_emb, topo_emb = self.embeddings(t, curve, topology, drop)
        return self.unet(x, combine(time_emb, curve_emb, topo_emb))
