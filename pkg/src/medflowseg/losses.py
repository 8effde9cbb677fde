"""Training objectives and EMA parameter tracking.

The total objective combines the velocity regression term with an auxiliary
segmentation term on the condition network's head:

    total = velocity + lam * (dice + alpha * ce)

with defaults lam = 0.1 and alpha = 10, making the total affine in each
component.  The EMA shadow follows shadow <- decay * shadow +
(1 - decay) * param with decay 0.999; the shadow weights are the ones used
at inference.
"""
from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .errors import DataError, DomainError, ShapeError

DICE_EPS = 1e-5


@dataclass(frozen=True)
class LossWeights:
    """Mixing coefficients: `lam` scales the auxiliary term, `alpha` its CE part."""

    lam: float = 0.1
    alpha: float = 10.0

    def __post_init__(self) -> None:
        if self.lam < 0 or self.alpha < 0:
            raise DomainError("loss weights must be nonnegative")


def _check_labels(logits: Tensor, labels: Tensor) -> None:
    if logits.shape[0] != labels.shape[0] or logits.shape[-2:] != labels.shape[-2:]:
        raise ShapeError(
            f"logits {tuple(logits.shape)} and labels {tuple(labels.shape)} disagree"
        )
    num_classes = logits.shape[1]
    if labels.numel() and (int(labels.min()) < 0 or int(labels.max()) >= num_classes):
        raise DataError(
            f"labels must lie in [0, {num_classes}), found "
            f"[{int(labels.min())}, {int(labels.max())}]"
        )


def dice_loss(logits: Tensor, labels: Tensor, eps: float = DICE_EPS) -> Tensor:
    """1 - mean soft Dice over all classes, on softmax probabilities.

    Intersections and cardinalities are summed over batch and pixels per
    class; `eps` smooths numerator and denominator.
    """
    _check_labels(logits, labels)
    num_classes = logits.shape[1]
    probs = logits.softmax(dim=1)
    target = F.one_hot(labels.long(), num_classes).movedim(-1, 1).to(probs.dtype)
    dims = (0, 2, 3)
    intersection = (probs * target).sum(dims)
    cardinality = probs.sum(dims) + target.sum(dims)
    score = (2.0 * intersection + eps) / (cardinality + eps)
    return 1.0 - score.mean()


def ce_loss(logits: Tensor, labels: Tensor) -> Tensor:
    """Mean negative log-likelihood of the true class."""
    _check_labels(logits, labels)
    return F.cross_entropy(logits, labels.long())


def total_loss(vel: Tensor, dice: Tensor, ce: Tensor, weights: LossWeights) -> Tensor:
    return vel + weights.lam * (dice + weights.alpha * ce)


class EMAState:
    """Exponential moving average of a model's parameters."""

    def __init__(self, model: nn.Module, decay: float = 0.999):
        if not (0.0 <= decay < 1.0):
            raise DomainError(f"decay must lie in [0, 1), got {decay}")
        self.decay = decay
        self.updates = 0
        self.shadow = {
            name: param.detach().clone()
            for name, param in model.named_parameters()
        }

    @torch.no_grad()
    def update(self, model: nn.Module) -> None:
        for name, param in model.named_parameters():
            shadow = self.shadow[name]
            if shadow.shape != param.shape:
                raise ShapeError(
                    f"shadow for {name} has shape {tuple(shadow.shape)}, "
                    f"parameter has {tuple(param.shape)}"
                )
            shadow.mul_(self.decay).add_(param.detach(), alpha=1.0 - self.decay)
        self.updates += 1

    @torch.no_grad()
    def copy_to(self, model: nn.Module) -> None:
        for name, param in model.named_parameters():
            param.copy_(self.shadow[name])

    def state_dict(self) -> dict:
        return {"decay": self.decay, "updates": self.updates, "shadow": self.shadow}

    def load_state_dict(self, state: dict) -> None:
        self.decay = state["decay"]
        self.updates = state["updates"]
        self.shadow = state["shadow"]
