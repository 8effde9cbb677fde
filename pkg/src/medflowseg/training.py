"""Training loop: batch assembly, optimization, EMA tracking, and checkpoints.

One step draws fresh noise and per-sample times, places each target on the
linear path, runs both streams, and optimizes the combined objective with
decoupled weight decay (AdamW), global-norm gradient clipping at 1.0, and
an EMA update.  Every randomness source is owned by a single seeded
generator, so a fixed seed reproduces the loss trace bitwise on one device.

Checkpoints are a weights blob (live + EMA + optimizer + RNG state) plus a
sidecar JSON manifest recording the architecture, encoding, EMA decay, and
step count — enough to rebuild the model without the original script.
"""
from __future__ import annotations

import copy
import csv
import dataclasses
import json
from dataclasses import dataclass
from pathlib import Path

import torch
from torch import Tensor, nn

from .data import MaskEncoding, Sample, encode_mask
from .errors import ConfigurationError, DomainError, NumericError
from .fa_attention import FAConfig
from .flow import Endpoints, interpolate, sample_time, target_velocity, velocity_loss
from .losses import EMAState, LossWeights, ce_loss, dice_loss, total_loss
from .networks import BackboneConfig, MedFlowSeg

METRICS_FIELDS = ("step", "vel_loss", "dice_loss", "ce_loss", "total_loss", "lr")


@dataclass(frozen=True)
class TrainConfig:
    """Optimization settings; full-scale runs use batch 48, the small-scale default is 8."""

    lr: float = 1e-4
    batch_size: int = 8
    max_steps: int = 1000
    seed: int = 0
    weight_decay: float = 1e-4
    ema_decay: float = 0.999
    grad_clip: float = 1.0

    def __post_init__(self) -> None:
        if self.lr <= 0:
            raise DomainError(f"lr must be positive, got {self.lr}")
        if self.batch_size < 1:
            raise DomainError(f"batch_size must be >= 1, got {self.batch_size}")


def build_model(
    backbone: BackboneConfig, fa: FAConfig | None = None, seed: int = 0
) -> MedFlowSeg:
    """Construct the model with a deterministic parameter initialization."""
    torch.manual_seed(seed)
    return MedFlowSeg(backbone, fa)


def train_step(
    model: MedFlowSeg,
    images: Tensor,
    labels: Tensor,
    optimizer: torch.optim.Optimizer,
    ema: EMAState,
    weights: LossWeights,
    encoding: MaskEncoding,
    generator: torch.Generator,
    step: int = 0,
    grad_clip: float = 1.0,
) -> dict:
    """One optimization step over a prepared batch; returns scalar losses for logging."""
    x1 = encode_mask(labels, encoding)
    x0 = torch.randn(x1.shape, generator=generator, dtype=x1.dtype)
    t = sample_time(x1.shape[0], generator, dtype=x1.dtype)
    state = interpolate(Endpoints(x0, x1), t)
    u_target = target_velocity(Endpoints(x0, x1))

    u_pred, bundle = model(state.x_t, state.t, images)
    vel = velocity_loss(u_pred, u_target)
    dice = dice_loss(bundle.aux_logits, labels)
    ce = ce_loss(bundle.aux_logits, labels)
    total = total_loss(vel, dice, ce, weights)
    if not torch.isfinite(total):
        raise NumericError(
            f"non-finite loss at step {step}: vel={vel.item()}, "
            f"dice={dice.item()}, ce={ce.item()}"
        )

    optimizer.zero_grad()
    total.backward()
    if grad_clip > 0:
        nn.utils.clip_grad_norm_(model.parameters(), grad_clip)
    optimizer.step()
    ema.update(model)

    return {
        "step": step,
        "vel_loss": vel.item(),
        "dice_loss": dice.item(),
        "ce_loss": ce.item(),
        "total_loss": total.item(),
        "lr": optimizer.param_groups[0]["lr"],
    }


class Trainer:
    """Owns one model's optimization run, its metrics log, and its checkpoints."""

    def __init__(
        self,
        model: MedFlowSeg,
        samples: list[Sample],
        cfg: TrainConfig,
        weights: LossWeights | None = None,
        encoding: MaskEncoding | None = None,
        run_dir: str | Path | None = None,
    ):
        if not samples:
            raise DomainError("training requires at least one sample")
        self.model = model
        self.cfg = cfg
        self.weights = weights or LossWeights()
        self.encoding = encoding or MaskEncoding(model.cfg.num_classes)
        self.images = torch.stack([s.image for s in samples])
        self.labels = torch.stack([s.labelmap for s in samples])
        self.optimizer = torch.optim.AdamW(
            model.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay
        )
        self.ema = EMAState(model, decay=cfg.ema_decay)
        self.generator = torch.Generator().manual_seed(cfg.seed)
        self.step = 0
        self.run_dir = Path(run_dir) if run_dir is not None else None
        self.metrics_path = self.run_dir / "metrics.csv" if self.run_dir else None
        if self.run_dir is not None:
            self.run_dir.mkdir(parents=True, exist_ok=True)

    def _draw_batch(self) -> tuple[Tensor, Tensor]:
        idx = torch.randint(
            len(self.images), (self.cfg.batch_size,), generator=self.generator
        )
        return self.images[idx], self.labels[idx]

    def step_once(self) -> dict:
        self.model.train()
        images, labels = self._draw_batch()
        record = train_step(
            self.model,
            images,
            labels,
            self.optimizer,
            self.ema,
            self.weights,
            self.encoding,
            self.generator,
            step=self.step,
            grad_clip=self.cfg.grad_clip,
        )
        self.step += 1
        record["step"] = self.step
        self._log(record)
        return record

    def run(self, steps: int | None = None) -> list[dict]:
        """Advance until `steps` more are done (default: up to cfg.max_steps total)."""
        target = self.step + steps if steps is not None else self.cfg.max_steps
        records = []
        while self.step < target:
            records.append(self.step_once())
        return records

    def _log(self, record: dict) -> None:
        if self.metrics_path is None:
            return
        new_file = not self.metrics_path.exists()
        with self.metrics_path.open("a", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=METRICS_FIELDS)
            if new_file:
                writer.writeheader()
            writer.writerow({k: record[k] for k in METRICS_FIELDS})

    def ema_model(self) -> MedFlowSeg:
        """A frozen copy of the model carrying the EMA weights (inference weights)."""
        model = copy.deepcopy(self.model)
        self.ema.copy_to(model)
        model.eval()
        return model

    def save_checkpoint(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        torch.save(
            {
                "model": self.model.state_dict(),
                "ema": self.ema.state_dict(),
                "optimizer": self.optimizer.state_dict(),
                "step": self.step,
                "generator": self.generator.get_state(),
            },
            path,
        )
        manifest = {
            "backbone": dataclasses.asdict(self.model.cfg),
            "fa": dataclasses.asdict(self.model.fa_cfg),
            "loss_weights": dataclasses.asdict(self.weights),
            "train": dataclasses.asdict(self.cfg),
            "num_classes": self.encoding.num_classes,
            "mask_encoding": dataclasses.asdict(self.encoding),
            "resolution": int(self.images.shape[-1]),
            "ema_decay": self.ema.decay,
            "step": self.step,
        }
        manifest_path(path).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
        return path

    def load_checkpoint(self, path: str | Path) -> None:
        blob = torch.load(Path(path), weights_only=False)
        self.model.load_state_dict(blob["model"])
        self.ema.load_state_dict(blob["ema"])
        self.optimizer.load_state_dict(blob["optimizer"])
        self.step = blob["step"]
        self.generator.set_state(blob["generator"])


def manifest_path(checkpoint: str | Path) -> Path:
    return Path(checkpoint).with_suffix(".json")


def load_model_from_checkpoint(
    path: str | Path, use_ema: bool = True
) -> tuple[MedFlowSeg, dict]:
    """Rebuild the model described by a checkpoint's manifest and load its weights."""
    path = Path(path)
    sidecar = manifest_path(path)
    if not sidecar.exists():
        raise ConfigurationError(f"checkpoint manifest {sidecar} not found")
    manifest = json.loads(sidecar.read_text())
    backbone = BackboneConfig.from_dict(manifest["backbone"])
    fa = FAConfig.from_dict(manifest["fa"])
    model = MedFlowSeg(backbone, fa)
    blob = torch.load(path, weights_only=False)
    model.load_state_dict(blob["model"])
    if use_ema:
        shadow = blob["ema"]["shadow"]
        with torch.no_grad():
            for name, param in model.named_parameters():
                param.copy_(shadow[name])
    model.eval()
    return model, manifest
