"""Inference pipeline: ODE sampling, multi-run ensembling, and STAPLE fusion.

A model used here must expose two methods (the trained wrapper does, and so
does the constant-field test oracle):

* ``condition(image)`` — compute per-image conditioning once; the result is
  reused across every integration step of every run.
* ``velocity(x_t, t, cond)`` — evaluate the learned field at state ``x_t``
  and time batch ``t`` under that conditioning.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import Tensor

from .data import MaskEncoding, decode_mask
from .errors import DomainError, NumericError
from .flow import euler_integrate

STAPLE_INIT = 0.99999


@dataclass(frozen=True)
class SamplerConfig:
    """Sampling protocol: Euler step count, ensemble size, and master seed."""

    steps: int = 50
    runs: int = 10
    seed: int = 0

    def __post_init__(self) -> None:
        if self.steps < 1:
            raise DomainError(f"steps must be >= 1, got {self.steps}")
        if self.runs < 1:
            raise DomainError(f"runs must be >= 1, got {self.runs}")


@dataclass
class StapleResult:
    """Binary STAPLE output: consensus probabilities and per-rater reliabilities.

    `degenerate` is set when every rater mask is empty; sensitivities are
    then undefined (NaN) and the fused mask is empty.
    """

    probability: np.ndarray
    fused: np.ndarray
    sensitivity: np.ndarray
    specificity: np.ndarray
    log_likelihoods: list[float] = field(default_factory=list)
    iterations: int = 0
    degenerate: bool = False


def staple_fuse(
    rater_masks, tol: float = 1e-6, max_iters: int = 100
) -> StapleResult:
    """EM consensus estimation over binary rater masks of shape [R, H, W].

    Protocol: sensitivities/specificities start at 0.99999; the spatial
    prior is uniform, equal to the mean foreground fraction over raters.
    The E-step computes per-pixel consensus weights from the current (p, q),
    the M-step re-estimates (p, q), and iteration stops when
    max|Δp| + max|Δq| < tol or after `max_iters` iterations.  The fused mask
    thresholds the consensus at 0.5.  The observed-data log-likelihood is
    recorded each iteration and is non-decreasing.
    """
    masks = np.asarray(rater_masks).astype(bool)
    if masks.ndim == 2:
        masks = masks[None]
    if masks.ndim != 3 or masks.shape[0] < 1:
        raise DomainError(f"expected [R, H, W] rater masks, got shape {masks.shape}")
    n_raters = masks.shape[0]
    shape = masks.shape[1:]
    d = masks.reshape(n_raters, -1).astype(np.float64)

    prior = float(d.mean())
    if prior == 0.0:
        return StapleResult(
            probability=np.zeros(shape),
            fused=np.zeros(shape, dtype=bool),
            sensitivity=np.full(n_raters, np.nan),
            specificity=np.ones(n_raters),
            degenerate=True,
        )

    p = np.full(n_raters, STAPLE_INIT)
    q = np.full(n_raters, STAPLE_INIT)
    log_likelihoods: list[float] = []
    weights = np.full(d.shape[1], prior)
    iterations = 0

    for iterations in range(1, max_iters + 1):
        # E-step: per-pixel probability that the true label is foreground.
        fg = np.prod(np.where(d == 1.0, p[:, None], 1.0 - p[:, None]), axis=0)
        bg = np.prod(np.where(d == 1.0, 1.0 - q[:, None], q[:, None]), axis=0)
        numer = prior * fg
        denom = numer + (1.0 - prior) * bg
        weights = np.where(denom > 0.0, numer / np.maximum(denom, 1e-300), prior)
        log_likelihoods.append(float(np.log(np.maximum(denom, 1e-300)).sum()))

        # M-step: re-estimate sensitivity and specificity per rater.
        w_sum = weights.sum()
        cw_sum = (1.0 - weights).sum()
        new_p = (d @ weights) / w_sum if w_sum > 0 else p
        new_q = ((1.0 - d) @ (1.0 - weights)) / cw_sum if cw_sum > 0 else q
        delta = np.abs(new_p - p).max() + np.abs(new_q - q).max()
        p, q = new_p, new_q
        if delta < tol:
            break

    probability = weights.reshape(shape)
    return StapleResult(
        probability=probability,
        fused=probability >= 0.5,
        sensitivity=p,
        specificity=q,
        log_likelihoods=log_likelihoods,
        iterations=iterations,
    )


def _field_from_model(model, cond):
    def field(x: Tensor, t: float) -> Tensor:
        t_batch = torch.full((x.shape[0],), t, dtype=x.dtype, device=x.device)
        return model.velocity(x, t_batch, cond)

    return field


def _expand_condition(cond, runs: int):
    """Repeat a batch-1 conditioning object along the batch dimension."""
    if runs == 1:
        return cond
    if torch.is_tensor(cond):
        return cond.expand(runs, *cond.shape[1:])
    if dataclasses.is_dataclass(cond):
        expanded = {
            f.name: _expand_condition(getattr(cond, f.name), runs)
            for f in dataclasses.fields(cond)
        }
        return dataclasses.replace(cond, **expanded)
    raise TypeError(f"cannot expand conditioning of type {type(cond)!r}")


@torch.no_grad()
def sample_once(
    model,
    image: Tensor,
    encoding: MaskEncoding,
    cfg: SamplerConfig,
    generator: torch.Generator | None = None,
) -> Tensor:
    """Draw one segmentation: noise -> Euler ODE under cached conditioning -> decode."""
    if generator is None:
        generator = torch.Generator().manual_seed(cfg.seed)
    batch = image[None] if image.dim() == 3 else image
    cond = model.condition(batch)
    x0 = torch.randn(
        (batch.shape[0], encoding.channels, batch.shape[-2], batch.shape[-1]),
        generator=generator,
        dtype=batch.dtype,
    )
    x1 = euler_integrate(_field_from_model(model, cond), x0, cfg.steps)
    if not torch.isfinite(x1).all():
        raise NumericError("sampled state is non-finite after integration")
    labels = decode_mask(x1, encoding)
    return labels[0] if image.dim() == 3 else labels


@dataclass
class EnsembleResult:
    """Per-run decoded masks plus the STAPLE consensus over them.

    `sensitivity` and `specificity` have shape [num_foreground_classes,
    runs]; `class_probability` holds the per-class consensus maps used for
    the final class assignment.
    """

    run_labels: Tensor
    fused: Tensor
    sensitivity: np.ndarray
    specificity: np.ndarray
    class_probability: np.ndarray
    degenerate_classes: list[int] = field(default_factory=list)


@torch.no_grad()
def sample_ensemble(
    model,
    image: Tensor,
    encoding: MaskEncoding,
    cfg: SamplerConfig,
    generator: torch.Generator | None = None,
) -> EnsembleResult:
    """Run `cfg.runs` independent samplings of one image and fuse them.

    Runs share the cached conditioning and are integrated as one batch; each
    run has its own noise draw.  Fusion runs binary STAPLE one-vs-rest per
    foreground class; a pixel takes the class of maximal consensus
    probability if that probability reaches 0.5, else background.
    """
    if generator is None:
        generator = torch.Generator().manual_seed(cfg.seed)
    if image.dim() != 3:
        raise DomainError("sample_ensemble expects a single [C, H, W] image")
    cond = model.condition(image[None])
    cond = _expand_condition(cond, cfg.runs)
    x0 = torch.randn(
        (cfg.runs, encoding.channels, image.shape[-2], image.shape[-1]),
        generator=generator,
        dtype=image.dtype,
    )
    x1 = euler_integrate(_field_from_model(model, cond), x0, cfg.steps)
    run_labels = decode_mask(x1, encoding)
    fused, sens, spec, probs, degenerate = fuse_runs(run_labels, encoding.num_classes)
    return EnsembleResult(
        run_labels=run_labels,
        fused=fused,
        sensitivity=sens,
        specificity=spec,
        class_probability=probs,
        degenerate_classes=degenerate,
    )


def fuse_runs(run_labels: Tensor, num_classes: int) -> tuple:
    """Per-class STAPLE over a stack of label maps; returns the fused map and (p, q)."""
    labels_np = run_labels.cpu().numpy()
    n_runs = labels_np.shape[0]
    n_fg = num_classes - 1
    shape = labels_np.shape[1:]
    probs = np.zeros((n_fg, *shape))
    sens = np.full((n_fg, n_runs), np.nan)
    spec = np.full((n_fg, n_runs), np.nan)
    degenerate = []
    for k in range(1, num_classes):
        result = staple_fuse(labels_np == k)
        probs[k - 1] = result.probability
        sens[k - 1] = result.sensitivity
        spec[k - 1] = result.specificity
        if result.degenerate:
            degenerate.append(k)
    if n_fg == 0:
        fused = np.zeros(shape, dtype=np.int64)
    else:
        best = probs.argmax(axis=0)
        best_prob = probs.max(axis=0)
        fused = np.where(best_prob >= 0.5, best + 1, 0).astype(np.int64)
    return torch.from_numpy(fused), sens, spec, probs, degenerate


class OracleVelocityModel:
    """Constant-field stand-in used by transport tests and CLI oracle mode.

    Its conditioning is the encoded ground-truth target itself, and its
    velocity is the exact field (x1 - x) / (1 - t), which equals x1 - x0
    everywhere on the linear path.  Euler integration under it recovers x1
    regardless of step count.
    """

    def __init__(self, target: Tensor):
        self._target = target

    def condition(self, image: Tensor) -> Tensor:
        x1 = self._target
        if x1.dim() == 3:
            x1 = x1[None]
        return x1.to(image.dtype)

    def velocity(self, x_t: Tensor, t: Tensor, cond: Tensor) -> Tensor:
        x1 = cond
        if x1.shape[0] != x_t.shape[0]:
            x1 = x1.expand(x_t.shape[0], *x1.shape[1:])
        tb = t.reshape(-1, *([1] * (x_t.dim() - 1)))
        return (x1 - x_t) / (1.0 - tb)
