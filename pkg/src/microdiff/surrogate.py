"""CNN surrogate: predicts the 13-value normalized energy curve from a bitmap.

Used to rank and filter generated microstructures without running the FEM
solver. Inputs are grayscale maps scaled to [0, 1]; targets are curves
normalized by the dataset constant, so the acceptance threshold (MSE < 1e-4
at full scale) applies in normalized units.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn

from .dataset import CURVE_STEPS, EnergyCurve
from .errors import NumericalFailureError
from .unet import xavier_init


@dataclass
class SurrogateConfig:
    conv_channels: int = 16
    dense_widths: tuple = (120, 84, CURVE_STEPS)


class SurrogateNet(nn.Module):
    """Two conv/pool stages then dense layers 120-84-13, ReLU hidden, linear out."""

    def __init__(self, config: SurrogateConfig | None = None):
        super().__init__()
        self.config = config or SurrogateConfig()
        ch = self.config.conv_channels
        w1, w2, w3 = self.config.dense_widths
        self.features = nn.Sequential(
            nn.Conv2d(1, ch, 3, stride=1, padding=1), nn.ReLU(), nn.MaxPool2d(2, 2),
            nn.Conv2d(ch, ch, 3, stride=1, padding=1), nn.ReLU(), nn.MaxPool2d(2, 2),
        )
        self.regressor = nn.Sequential(
            nn.Linear(ch * 7 * 7, w1), nn.ReLU(),
            nn.Linear(w1, w2), nn.ReLU(),
            nn.Linear(w2, w3),
        )
        xavier_init(self)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.dim() == 3:
            x = x[:, None]
        if x.shape[-2:] != (28, 28):
            raise ValueError(f"surrogate input must be 28x28, got {tuple(x.shape[-2:])}")
        return self.regressor(self.features(x).flatten(1))


@torch.no_grad()
def predict(model: SurrogateNet, images) -> np.ndarray:
    """Predict normalized energy curves for a stack of bitmaps.

    Accepts uint8 bitmaps (scaled by 1/255) or float arrays already in [0, 1].
    Returns (n, 13) float64.
    """
    images = np.asarray(images)
    single = images.ndim == 2
    if single:
        images = images[None]
    x = torch.as_tensor(images.astype(np.float32))
    if images.dtype == np.uint8:
        x = x / 255.0
    model.eval()
    out = model(x).double().numpy()
    return out[0] if single else out


def mse(pred, target) -> float:
    """Mean squared error over the 13 curve points."""
    pred = pred.energies if isinstance(pred, EnergyCurve) else np.asarray(pred, dtype=np.float64)
    target = target.energies if isinstance(target, EnergyCurve) else np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ValueError(f"curve length mismatch: {pred.shape} vs {target.shape}")
    return float(np.mean((pred - target) ** 2))


@dataclass
class SurrogateTrainConfig:
    epochs: int = 200
    batch_size: int = 256
    lr: float = 1e-3
    plateau_factor: float = 0.9
    plateau_patience: int = 5
    val_fraction: float = 0.1
    seed: int = 0
    early_stop: bool = False  # fixed-epoch schedule by default
    log_rows: list = field(default_factory=list)


class PlateauDecay:
    """Multiply the learning rate by `factor` after `patience` epochs without
    validation improvement; the counter resets on each decay or improvement."""

    def __init__(self, factor: float, patience: int):
        self.factor = factor
        self.patience = patience
        self.best = float("inf")
        self.bad_epochs = 0
        self.events = 0

    def step(self, val_loss: float, lr: float) -> float:
        if val_loss < self.best:
            self.best = val_loss
            self.bad_epochs = 0
            return lr
        self.bad_epochs += 1
        if self.bad_epochs >= self.patience:
            self.bad_epochs = 0
            self.events += 1
            return lr * self.factor
        return lr


def train_surrogate(images, curves, config: SurrogateTrainConfig | None = None,
                    model: SurrogateNet | None = None):
    """Train the surrogate on aligned (bitmap, normalized curve) pairs.

    Returns (model, log) where log rows are dicts with epoch, train_mse,
    val_mse, lr. Split, batching, and init are seeded for reproducibility.
    """
    config = config or SurrogateTrainConfig()
    images = np.asarray(images)
    curves = np.asarray(curves, dtype=np.float32)
    if len(images) != len(curves):
        raise ValueError("images and curves must align")

    torch.manual_seed(config.seed)
    rng = np.random.default_rng(config.seed)
    order = rng.permutation(len(images))
    n_val = max(1, int(round(config.val_fraction * len(images)))) if config.val_fraction > 0 else 0
    val_idx, train_idx = order[:n_val], order[n_val:]

    x = torch.as_tensor(images.astype(np.float32))
    if images.dtype == np.uint8:
        x = x / 255.0
    x = x[:, None]
    y = torch.as_tensor(curves)

    model = model or SurrogateNet()
    optimizer = torch.optim.Adam(model.parameters(), lr=config.lr)
    loss_fn = nn.MSELoss()
    decay = PlateauDecay(config.plateau_factor, config.plateau_patience)

    log = []
    for epoch in range(1, config.epochs + 1):
        model.train()
        perm = rng.permutation(len(train_idx))
        train_losses = []
        for start in range(0, len(perm), config.batch_size):
            batch = torch.as_tensor(train_idx[perm[start : start + config.batch_size]])
            optimizer.zero_grad()
            loss = loss_fn(model(x[batch]), y[batch])
            if not torch.isfinite(loss):
                raise NumericalFailureError("non-finite surrogate loss", step=epoch)
            loss.backward()
            optimizer.step()
            train_losses.append(float(loss))
        train_mse = float(np.mean(train_losses))

        if n_val:
            model.eval()
            with torch.no_grad():
                val_mse = float(loss_fn(model(x[torch.as_tensor(val_idx)]),
                                        y[torch.as_tensor(val_idx)]))
        else:
            val_mse = train_mse

        lr = optimizer.param_groups[0]["lr"]
        new_lr = decay.step(val_mse, lr)
        if new_lr != lr:
            for group in optimizer.param_groups:
                group["lr"] = new_lr
        log.append({"epoch": epoch, "train_mse": train_mse, "val_mse": val_mse, "lr": new_lr})
    return model, log


def save_surrogate(path, model: SurrogateNet, extra=None):
    payload = {
        "kind": "surrogate",
        "config": {"conv_channels": model.config.conv_channels,
                   "dense_widths": list(model.config.dense_widths)},
        "model_state": model.state_dict(),
    }
    if extra:
        payload["extra"] = extra
    torch.save(payload, path)


def load_surrogate(path) -> SurrogateNet:
    from .errors import CheckpointError

    try:
        payload = torch.load(path, map_location="cpu", weights_only=False)
    except Exception as err:
        raise CheckpointError(f"cannot read surrogate checkpoint {path}: {err}") from err
    if payload.get("kind") != "surrogate":
        raise CheckpointError(f"{path}: not a surrogate checkpoint (kind={payload.get('kind')!r})")
    cfg = payload["config"]
    model = SurrogateNet(SurrogateConfig(cfg["conv_channels"], tuple(cfg["dense_widths"])))
    try:
        model.load_state_dict(payload["model_state"])
    except RuntimeError as err:
        raise CheckpointError(f"{path}: weight shapes do not match config: {err}") from err
    return model
