"""Diffusion training loop, loss logging, and the self-describing checkpoint container."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from . import diffusion
from .context import ConditionedDenoiser, draw_drop_mask
from .diffusion import NoiseSchedule, linear_beta_schedule, loss_hybrid
from .errors import CheckpointError, NumericalFailureError
from .unet import DenoiserConfig, pad_to_canvas

LOSS_HEADER = "step,l_mu,l_vlb,l_hybrid"


@dataclass
class TrainConfig:
    steps: int = 50_000
    batch_size: int = 128
    lr: float = 1e-4
    timesteps: int = 1000
    beta_start: float | None = None
    beta_end: float | None = None
    drop_prob: float = 0.1
    independent_drop: bool = False
    seed: int = 0
    checkpoint_every: int = 1000


def write_loss_log(path, rows):
    lines = [LOSS_HEADER]
    lines += [f"{r['step']},{r['l_mu']:.10g},{r['l_vlb']:.10g},{r['l_hybrid']:.10g}" for r in rows]
    Path(path).write_text("\n".join(lines) + "\n")


def read_loss_log(path):
    lines = Path(path).read_text().splitlines()
    rows = []
    for line in lines[1:]:
        step, l_mu, l_vlb, l_hybrid = line.split(",")
        rows.append({"step": int(step), "l_mu": float(l_mu),
                     "l_vlb": float(l_vlb), "l_hybrid": float(l_hybrid)})
    return rows


def save_checkpoint(path, model: ConditionedDenoiser, sched: NoiseSchedule,
                    config: TrainConfig, step: int, optimizer=None):
    payload = {
        "kind": "diffusion",
        "denoiser_config": dataclasses.asdict(model.config),
        "use_curve": model.curve_encoder is not None,
        "use_topology": model.topology_encoder is not None,
        "schedule": {"T": sched.T, "beta_start": float(sched.beta[0]),
                     "beta_end": float(sched.beta[-1])},
        "train_config": dataclasses.asdict(config),
        "step": step,
        "model_state": model.state_dict(),
        "optimizer_state": optimizer.state_dict() if optimizer is not None else None,
        "torch_rng_state": torch.get_rng_state(),
    }
    torch.save(payload, path)


def load_checkpoint(path):
    """Rebuild (model, schedule, config, step, payload) from a checkpoint file."""
    try:
        payload = torch.load(path, map_location="cpu", weights_only=False)
    except Exception as err:
        raise CheckpointError(f"cannot read checkpoint {path}: {err}") from err
    if payload.get("kind") != "diffusion":
        raise CheckpointError(f"{path}: not a diffusion checkpoint (kind={payload.get('kind')!r})")
    dc = payload["denoiser_config"]
    dc["channel_mults"] = tuple(dc["channel_mults"])
    dc["attention_resolutions"] = tuple(dc["attention_resolutions"])
    model = ConditionedDenoiser(DenoiserConfig(**dc), use_curve=payload["use_curve"],
                                use_topology=payload["use_topology"])
    try:
        model.load_state_dict(payload["model_state"])
    except RuntimeError as err:
        raise CheckpointError(f"{path}: weights do not match stored config: {err}") from err
    sc = payload["schedule"]
    sched = linear_beta_schedule(sc["T"], sc["beta_start"], sc["beta_end"])
    config = TrainConfig(**payload["train_config"])
    return model, sched, config, payload["step"], payload


class DiffusionTrainer:
    """Single-writer training loop over aligned images/curves.

    Images are uint8 bitmaps; they are scaled to [-1, 1] and padded to the
    32x32 canvas once up front. Curves condition the behavior module; the
    sample's own bitmap conditions the topology module when enabled.
    """

    def __init__(self, model: ConditionedDenoiser, images, curves=None,
                 config: TrainConfig | None = None):
        self.model = model
        self.config = config or TrainConfig()
        self.sched = linear_beta_schedule(self.config.timesteps, self.config.beta_start,
                                          self.config.beta_end)
        images = np.asarray(images)
        self.x0 = pad_to_canvas(diffusion.scale_to_unit(images)[:, None])
        self.curves = None
        if model.curve_encoder is not None:
            if curves is None:
                raise ValueError("model expects curve contexts but none were given")
            self.curves = torch.as_tensor(np.asarray(curves, dtype=np.float32))
            if len(self.curves) != len(images):
                raise ValueError("images and curves must align")
        self.topologies = None
        if model.topology_encoder is not None:
            self.topologies = torch.as_tensor(images.astype(np.float32) / 255.0)
        self.optimizer = torch.optim.Adam(model.parameters(), lr=self.config.lr)
        self.step = 0
        self.log_rows = []

    def _batch(self, generator):
        n = self.x0.shape[0]
        idx = torch.randint(0, n, (min(self.config.batch_size, n),), generator=generator)
        kwargs = {}
        drop = None
        if self.curves is not None:
            kwargs["curve"] = self.curves[idx]
        if self.topologies is not None:
            kwargs["topology"] = self.topologies[idx]
        if kwargs:
            if self.config.independent_drop:
                drop = (draw_drop_mask(len(idx), self.config.drop_prob, generator),
                        draw_drop_mask(len(idx), self.config.drop_prob, generator))
            else:
                drop = draw_drop_mask(len(idx), self.config.drop_prob, generator)
            kwargs["drop"] = drop
        return self.x0[idx], kwargs

    def run(self, steps=None, checkpoint_path=None, log_path=None,
            progress=None):
        """Train for `steps` more steps (default: up to config.steps total).

        On a non-finite loss the last good weights are checkpointed and a
        NumericalFailureError raised. Returns the accumulated log rows.
        """
        config = self.config
        target = self.step + steps if steps is not None else config.steps
        generator = torch.Generator().manual_seed(config.seed + self.step)
        self.model.train()
        while self.step < target:
            x0, kwargs = self._batch(generator)
            t = torch.randint(1, self.sched.T + 1, (x0.shape[0],), generator=generator)
            eps = torch.randn(x0.shape, generator=generator)
            losses = loss_hybrid(self.model, x0, t, eps, self.sched, model_kwargs=kwargs)
            if not torch.isfinite(losses.l_hybrid):
                if checkpoint_path:
                    save_checkpoint(checkpoint_path, self.model, self.sched, config,
                                    self.step, self.optimizer)
                raise NumericalFailureError("non-finite training loss", step=self.step,
                                            checkpoint=checkpoint_path)
            self.optimizer.zero_grad()
            losses.l_hybrid.backward()
            self.optimizer.step()
            self.step += 1
            self.log_rows.append({
                "step": self.step,
                "l_mu": float(losses.l_mu),
                "l_vlb": float(losses.l_vlb),
                "l_hybrid": float(losses.l_hybrid),
            })
            if progress and self.step % progress == 0:
                print(f"step {self.step}/{target}  l_mu={losses.l_mu:.4f}  "
                      f"l_vlb={losses.l_vlb:.4f}", flush=True)
            if checkpoint_path and (self.step % config.checkpoint_every == 0
                                    or self.step == target):
                save_checkpoint(checkpoint_path, self.model, self.sched, config,
                                self.step, self.optimizer)
                if log_path:
                    write_loss_log(log_path, self.log_rows)
        if checkpoint_path:
            save_checkpoint(checkpoint_path, self.model, self.sched, config,
                            self.step, self.optimizer)
        if log_path:
            write_loss_log(log_path, self.log_rows)
        return self.log_rows

    @classmethod
    def resume(cls, path, images, curves=None):
        model, sched, config, step, payload = load_checkpoint(path)
        trainer = cls(model, images, curves, config)
        trainer.step = step
        if payload.get("optimizer_state"):
            trainer.optimizer.load_state_dict(payload["optimizer_state"])
        return trainer
